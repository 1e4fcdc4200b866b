"""Query/key encoders for both modalities, momentum updates and checkpoints."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import AccError, FeatureDisabledError, InvalidArgumentError, ShapeError
from .numerics import (
    AdamState,
    ForwardCache,
    MlpParams,
    init_mlp,
    l2_normalize,
    l2_normalize_backward,
    mlp_backward,
    mlp_forward,
)

MODALITIES = ("visual", "audio")
CHECKPOINT_VERSION = 1


@dataclass
class ModalityEncoders:
    query: MlpParams
    key: MlpParams
    query_head: MlpParams | None = None
    key_head: MlpParams | None = None

    def __post_init__(self):
        if not self.query.same_shape(self.key):
            raise ShapeError("query and key encoders must have identical shapes")
        if (self.query_head is None) != (self.key_head is None):
            raise ShapeError("query and key heads must both be present or both absent")
        if self.query_head is not None:
            if len(self.query_head.layers) != 1 or not self.query_head.same_shape(self.key_head):
                raise ShapeError("heads must be single affine layers of identical shape")

    @property
    def has_head(self):
        return self.query_head is not None

    @property
    def input_dim(self):
        return self.query.input_dim

    @property
    def embed_dim(self):
        return self.query_head.output_dim if self.has_head else self.query.output_dim


@dataclass
class EncoderBundle:
    visual: ModalityEncoders
    audio: ModalityEncoders
    momentum: float = 0.999
    temperature: float = 0.7

    def __post_init__(self):
        # m = 1 (frozen keys) is admitted for ablations
        if not 0.0 <= self.momentum <= 1.0:
            raise InvalidArgumentError(f"momentum must lie in [0, 1], got {self.momentum}")
        if self.temperature <= 0:
            raise InvalidArgumentError(f"temperature must be positive, got {self.temperature}")
        if self.visual.embed_dim != self.audio.embed_dim:
            raise ShapeError("both modalities must embed into the same dimension")
        if self.visual.has_head != self.audio.has_head:
            raise ShapeError("heads must be enabled for both modalities or neither")
        if self.heads_enabled and not self.visual.query_head.same_shape(self.audio.query_head):
            raise ShapeError("heads must have identical shapes across all four encoders")

    @property
    def heads_enabled(self):
        return self.visual.has_head

    def modality(self, name):
        if name not in MODALITIES:
            raise InvalidArgumentError(f"unknown modality {name!r}")
        return getattr(self, name)

    def copy(self):
        def cp(enc):
            return ModalityEncoders(
                enc.query.copy(),
                enc.key.copy(),
                enc.query_head.copy() if enc.has_head else None,
                enc.key_head.copy() if enc.has_head else None,
            )

        return EncoderBundle(cp(self.visual), cp(self.audio), self.momentum, self.temperature)


def make_bundle(
    visual_dim,
    audio_dim,
    hidden,
    embed_dim,
    rng,
    heads=False,
    momentum=0.999,
    temperature=0.7,
    init="fan_in",
):
    """Fresh bundle with key encoders copied from the query encoders.

    With ``heads`` the key head of each modality starts as a copy of the
    other modality's query head, matching the direction of the head tie.
    """
    hidden = list(hidden)
    qv = init_mlp([visual_dim] + hidden + [embed_dim], rng, init)
    qa = init_mlp([audio_dim] + hidden + [embed_dim], rng, init)
    hv = ha = None
    if heads:
        hv = init_mlp([embed_dim, embed_dim], rng, init)
        ha = init_mlp([embed_dim, embed_dim], rng, init)
    visual = ModalityEncoders(qv, qv.copy(), hv, ha.copy() if heads else None)
    audio = ModalityEncoders(qa, qa.copy(), ha, hv.copy() if heads else None)
    return EncoderBundle(visual, audio, momentum, temperature)


@dataclass
class QueryCache:
    """Everything a query forward pass leaves behind for backprop."""

    base: ForwardCache
    head: ForwardCache | None
    output: np.ndarray  # pre-normalization affine output, (B, d)
    embeddings: np.ndarray  # unit rows, (B, d)

    @property
    def penultimate(self):
        """Input to the final affine layer (``z`` per query)."""
        return self.head.penultimate if self.head is not None else self.base.penultimate

    @property
    def norms(self):
        return np.linalg.norm(self.output, axis=-1)


def _as_batch(batch, dim):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"expected a batch of {dim}-dimensional inputs, got shape {x.shape}")
    return x


def encode_query(bundle, modality, batch):
    """Unit-norm query embeddings plus the caches needed for backprop."""
    enc = bundle.modality(modality)
    x = _as_batch(batch, enc.input_dim)
    out, base_cache = mlp_forward(enc.query, x)
    head_cache = None
    if enc.has_head:
        out, head_cache = mlp_forward(enc.query_head, out)
    emb = l2_normalize(out)
    return emb, QueryCache(base_cache, head_cache, out, emb)


def encode_key(bundle, modality, batch):
    """Unit-norm key embeddings; no gradient path."""
    enc = bundle.modality(modality)
    x = _as_batch(batch, enc.input_dim)
    out, _ = mlp_forward(enc.key, x)
    if enc.has_head:
        out, _ = mlp_forward(enc.key_head, out)
    return l2_normalize(out)


def query_backward(bundle, modality, cache, grad_embeddings):
    """Gradients of the query encoder (and head) given dL/d(embeddings)."""
    enc = bundle.modality(modality)
    g = l2_normalize_backward(cache.output, cache.embeddings, grad_embeddings)
    head_grads = None
    if enc.has_head:
        head_grads, g = mlp_backward(enc.query_head, cache.head, g, return_input_grad=True)
    return mlp_backward(enc.query, cache.base, g), head_grads


def _lerp(key, query, m):
    if not key.same_shape(query):
        raise ShapeError("key and query parameters must share shapes")
    return MlpParams.from_arrays([m * k + (1.0 - m) * q for k, q in zip(key.arrays(), query.arrays())])


def momentum_update(bundle, modality):
    """key <- m * key + (1 - m) * query, in place on the bundle."""
    enc = bundle.modality(modality)
    enc.key = _lerp(enc.key, enc.query, bundle.momentum)
    return enc.key


def cross_modal_head_update(bundle):
    """Tie each key head to the *other* modality's query head.

    audio key head <- m * itself + (1 - m) * visual query head, and the
    symmetric update for the visual key head.
    """
    if not bundle.heads_enabled:
        raise FeatureDisabledError("projection heads are disabled for this bundle")
    m = bundle.momentum
    new_audio = _lerp(bundle.audio.key_head, bundle.visual.query_head, m)
    new_visual = _lerp(bundle.visual.key_head, bundle.audio.query_head, m)
    bundle.audio.key_head = new_audio
    bundle.visual.key_head = new_visual
    return new_visual, new_audio


# -- checkpoints -------------------------------------------------------------

_SLOTS = ("query", "key", "query_head", "key_head")


def _params_to_arrays(prefix, params, out):
    for i, a in enumerate(params.arrays()):
        out[f"{prefix}/{i}"] = a


def _params_from_arrays(prefix, data):
    arrays = []
    i = 0
    while f"{prefix}/{i}" in data:
        arrays.append(data[f"{prefix}/{i}"])
        i += 1
    return MlpParams.from_arrays(arrays) if arrays else None


def save_checkpoint(path, bundle, optimizers=None, meta=None):
    """Write the bundle and optional Adam states to an ``.npz`` archive."""
    arrays = {}
    for mod in MODALITIES:
        enc = bundle.modality(mod)
        for slot in _SLOTS:
            p = getattr(enc, slot)
            if p is not None:
                _params_to_arrays(f"{mod}/{slot}", p, arrays)
    opt_meta = {}
    for name, st in (optimizers or {}).items():
        _params_to_arrays(f"opt/{name}/m", st.m, arrays)
        _params_to_arrays(f"opt/{name}/v", st.v, arrays)
        opt_meta[name] = {"step": st.step, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps}
    header = {
        "version": CHECKPOINT_VERSION,
        "momentum": bundle.momentum,
        "temperature": bundle.temperature,
        "optimizers": opt_meta,
        "meta": meta or {},
    }
    arrays["header"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`. Returns ``(bundle, optimizers, meta)``."""
    with np.load(path) as data:
        data = {k: data[k] for k in data.files}
    header = json.loads(data.pop("header").tobytes().decode())
    if header.get("version") != CHECKPOINT_VERSION:
        raise AccError(f"unsupported checkpoint version {header.get('version')}")
    encs = {}
    for mod in MODALITIES:
        encs[mod] = ModalityEncoders(*[_params_from_arrays(f"{mod}/{slot}", data) for slot in _SLOTS])
    bundle = EncoderBundle(encs["visual"], encs["audio"], header["momentum"], header["temperature"])
    optimizers = {}
    for name, st in header["optimizers"].items():
        optimizers[name] = AdamState(
            _params_from_arrays(f"opt/{name}/m", data),
            _params_from_arrays(f"opt/{name}/v", data),
            st["step"],
            st["beta1"],
            st["beta2"],
            st["eps"],
        )
    return bundle, optimizers, header["meta"]
