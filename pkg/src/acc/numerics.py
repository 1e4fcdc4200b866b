"""Dense numerics: stable softmax, cross-entropy, small MLPs and Adam.

Everything is float64. Weight matrices are stored as ``(out, in)`` so a
batch ``x`` of shape ``(B, in)`` maps to ``x @ W.T + b``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidArgumentError, ShapeError


def _check_temperature(temperature):
    if not np.isfinite(temperature) or temperature <= 0:
        raise InvalidArgumentError(f"temperature must be positive and finite, got {temperature}")


def softmax(logits, temperature=1.0):
    """Softmax over the last axis of ``logits / temperature``."""
    _check_temperature(temperature)
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("logits must be finite")
    z = z / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits, temperature=1.0):
    _check_temperature(temperature)
    z = np.asarray(logits, dtype=np.float64) / temperature
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("logits must be finite")
    zmax = z.max(axis=-1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True))


def cross_entropy(probs, label):
    """Negative log-probability of ``label`` under ``probs``."""
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise IndexError(f"label {label} out of range for {p.shape[-1]} classes")
    with np.errstate(divide="ignore"):
        return float(-np.log(p[label]))


def l2_normalize(v):
    """Scale ``v`` (or each row of a 2-D ``v``) to unit Euclidean norm."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise DegenerateInputError("cannot normalize a zero or non-finite vector")
    return v / norms


def l2_normalize_backward(v, unit, grad_unit):
    """Pull ``grad_unit`` (gradient w.r.t. ``v/|v|``) back to ``v``."""
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    radial = np.sum(grad_unit * unit, axis=-1, keepdims=True)
    return (grad_unit - radial * unit) / norms


@dataclass
class MlpParams:
    """Weights and biases of a ReLU MLP with an identity output layer."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("an MLP needs at least one layer")
        prev = None
        for i, (w, b) in enumerate(self.layers):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if prev is not None and w.shape[1] != prev:
                raise ShapeError(f"layer {i} expects input {w.shape[1]}, previous layer gives {prev}")
            prev = w.shape[0]

    @property
    def input_dim(self):
        return self.layers[0][0].shape[1]

    @property
    def output_dim(self):
        return self.layers[-1][0].shape[0]

    @property
    def sizes(self):
        return [self.input_dim] + [w.shape[0] for w, _ in self.layers]

    def arrays(self):
        """Flat list ``[W0, b0, W1, b1, ...]`` of the underlying arrays."""
        return [a for pair in self.layers for a in pair]

    @classmethod
    def from_arrays(cls, arrays):
        return cls([(arrays[i], arrays[i + 1]) for i in range(0, len(arrays), 2)])

    def copy(self):
        return MlpParams([(w.copy(), b.copy()) for w, b in self.layers])

    def zeros_like(self):
        return MlpParams([(np.zeros_like(w), np.zeros_like(b)) for w, b in self.layers])

    def same_shape(self, other):
        return [a.shape for a in self.arrays()] == [a.shape for a in other.arrays()]

    def num_parameters(self):
        return sum(a.size for a in self.arrays())


def init_mlp(sizes, rng, scheme="fan_in"):
    """Random MLP with layer widths ``sizes`` (input first, output last).

    ``scheme="fan_in"`` draws uniform(-1/sqrt(fan_in), 1/sqrt(fan_in));
    ``scheme="uniform01"`` draws uniform(0, 1) for every parameter.
    """
    if len(sizes) < 2:
        raise ShapeError("sizes needs an input and an output width")
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        if scheme == "fan_in":
            s = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-s, s, size=(fan_out, fan_in))
            b = rng.uniform(-s, s, size=fan_out)
        elif scheme == "uniform01":
            w = rng.uniform(0.0, 1.0, size=(fan_out, fan_in))
            b = rng.uniform(0.0, 1.0, size=fan_out)
        else:
            raise InvalidArgumentError(f"unknown init scheme {scheme!r}")
        layers.append((w, b))
    return MlpParams(layers)


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]  # input to each layer
    pre: list[np.ndarray]  # affine output of each layer

    @property
    def penultimate(self):
        """Input to the final affine layer."""
        return self.inputs[-1]

    def __len__(self):
        return len(self.pre)


def mlp_forward(params, x):
    """Run ``x`` (one vector or a batch of rows) through the network."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise ShapeError(f"input has dimension {x.shape[-1]}, network expects {params.input_dim}")
    inputs, pre = [], []
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        inputs.append(h)
        a = h @ w.T + b
        pre.append(a)
        h = np.maximum(a, 0.0) if i < last else a
    return h, ForwardCache(inputs, pre)


def mlp_backward(params, cache, output_grad, return_input_grad=False):
    """Gradients of a scalar loss w.r.t. every parameter, given dL/d(output)."""
    if len(cache) != len(params.layers):
        raise ShapeError(f"cache has {len(cache)} layers, params have {len(params.layers)}")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != cache.pre[-1].shape:
        raise ShapeError(f"output_grad shape {g.shape} != output shape {cache.pre[-1].shape}")
    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        w, _ = params.layers[i]
        if i < len(params.layers) - 1:
            g = g * (cache.pre[i] > 0)
        h = cache.inputs[i]
        if g.ndim == 1:
            grads[i] = (np.outer(g, h), g.copy())
        else:
            grads[i] = (g.T @ h, g.sum(axis=0))
        g = g @ w
    out = MlpParams(grads)
    return (out, g) if return_input_grad else out


@dataclass
class AdamState:
    m: MlpParams
    v: MlpParams
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, beta1=0.9, beta2=0.999, eps=1e-8):
    return AdamState(params.zeros_like(), params.zeros_like(), 0, beta1, beta2, eps)


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    if not (params.same_shape(grads) and params.same_shape(state.m)):
        raise ShapeError("params, grads and optimizer state must share shapes")
    b1, b2 = state.beta1, state.beta2
    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        new_p.append(p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
        new_m.append(m)
        new_v.append(v)
    new_state = AdamState(MlpParams.from_arrays(new_m), MlpParams.from_arrays(new_v), t, b1, b2, state.eps)
    return MlpParams.from_arrays(new_p), new_state
