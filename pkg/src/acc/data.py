"""Paired two-modality synthetic data with controllable mutual information.

Each sample carries a tuple of characters, one per slot, slot ``i`` drawing
from an alphabet of size ``l_i``. Modality A renders the tuple through one
random codebook; modality B renders the partner tuple ``(c_i + 1) mod l_i``
through an independent codebook. Both add Gaussian noise. Because the
partner map is a bijection, the two noise-free renderings share exactly the
entropy of the tuple, ``sum_i log l_i`` nats for uniform characters.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InvalidArgumentError, ValidationError

# Tifinagh, Hiragana, Gujarati, Katakana, Bengali, Grantha, Sanskrit,
# Armenian, Mkhedruli
DEFAULT_ALPHABETS = (55, 52, 48, 47, 46, 43, 42, 41, 41)

LABEL_MODES = ("tuple", "coarse")


@dataclass(frozen=True)
class MiSpec:
    alphabet_sizes: tuple = (55,)
    embed_dim: int = 16
    noise_sigma: float = 0.1
    dataset_size: int = 5000
    seed: int = 0
    label_mode: str = "tuple"
    # Zipf exponent for the first slot's characters; 0 keeps them uniform
    skew: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "alphabet_sizes", tuple(int(x) for x in self.alphabet_sizes))
        if not self.alphabet_sizes:
            raise ValidationError("alphabet_sizes", "need at least one slot")
        if any(x < 2 for x in self.alphabet_sizes):
            raise ValidationError("alphabet_sizes", "every alphabet needs at least 2 characters")
        if self.dataset_size < 1:
            raise ValidationError("dataset_size", "must be at least 1")
        if self.embed_dim < 1:
            raise ValidationError("embed_dim", "must be at least 1")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma", "must be nonnegative")
        if self.label_mode not in LABEL_MODES:
            raise ValidationError("label_mode", f"must be one of {LABEL_MODES}")
        if self.skew < 0:
            raise ValidationError("skew", "must be nonnegative")

    @property
    def num_slots(self):
        return len(self.alphabet_sizes)

    @property
    def input_dim(self):
        return self.num_slots * self.embed_dim

    @property
    def num_categories(self):
        if self.label_mode == "coarse":
            return self.alphabet_sizes[0]
        return math.prod(self.alphabet_sizes)

    def to_dict(self):
        d = asdict(self)
        d["alphabet_sizes"] = list(self.alphabet_sizes)
        return d


def slot_probabilities(spec, slot):
    l = spec.alphabet_sizes[slot]
    if slot == 0 and spec.skew > 0:
        p = np.arange(1, l + 1, dtype=np.float64) ** (-spec.skew)
        return p / p.sum()
    return np.full(l, 1.0 / l)


def mutual_information(spec):
    """Mutual information (nats) between the two noise-free modalities.

    Equals ``sum(log l_i)`` when characters are uniform.
    """
    total = 0.0
    for i, l in enumerate(spec.alphabet_sizes):
        if i == 0 and spec.skew > 0:
            p = slot_probabilities(spec, 0)
            total += float(-np.sum(p * np.log(p)))
        else:
            total += math.log(l)
    return total


@dataclass
class PairedDataset:
    modality_a: np.ndarray  # (n, slots * embed_dim), the "visual" side
    modality_b: np.ndarray  # the "audio" side
    category_labels: np.ndarray
    chars: np.ndarray  # (n, slots) character tuple per sample
    spec: MiSpec = field(default_factory=MiSpec)

    def __post_init__(self):
        n = len(self.modality_a)
        if not (len(self.modality_b) == len(self.category_labels) == len(self.chars) == n):
            raise InvalidArgumentError("modalities, labels and chars must have equal length")

    def __len__(self):
        return len(self.modality_a)

    def inputs(self, modality):
        if modality == "visual":
            return self.modality_a
        if modality == "audio":
            return self.modality_b
        raise InvalidArgumentError(f"unknown modality {modality!r}")


@dataclass
class MiniBatch:
    indices: np.ndarray
    modality_a: np.ndarray
    modality_b: np.ndarray

    def __len__(self):
        return len(self.indices)


def generate(spec):
    rng = np.random.default_rng(spec.seed)
    e = spec.embed_dim
    scale = 1.0 / math.sqrt(e)
    # codebooks first so they depend on the seed alone
    books_a = [rng.standard_normal((l, e)) * scale for l in spec.alphabet_sizes]
    books_b = [rng.standard_normal((l, e)) * scale for l in spec.alphabet_sizes]
    n = spec.dataset_size
    chars = np.empty((n, spec.num_slots), dtype=np.int64)
    for i, l in enumerate(spec.alphabet_sizes):
        chars[:, i] = rng.choice(l, size=n, p=slot_probabilities(spec, i))
    partner = (chars + 1) % np.asarray(spec.alphabet_sizes)
    a = np.concatenate([books_a[i][chars[:, i]] for i in range(spec.num_slots)], axis=1)
    b = np.concatenate([books_b[i][partner[:, i]] for i in range(spec.num_slots)], axis=1)
    a = a + spec.noise_sigma * rng.standard_normal(a.shape)
    b = b + spec.noise_sigma * rng.standard_normal(b.shape)
    return PairedDataset(a, b, category_labels(chars, spec), chars, spec)


def category_labels(chars, spec):
    if spec.label_mode == "coarse":
        return chars[:, 0].copy()
    labels = np.zeros(len(chars), dtype=np.int64)
    stride = 1
    for i, l in enumerate(spec.alphabet_sizes):
        labels += chars[:, i] * stride
        stride *= l
    return labels


def minibatch(dataset, indices):
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= len(dataset)):
        raise IndexError(f"batch indices must lie in [0, {len(dataset)})")
    return MiniBatch(idx, dataset.modality_a[idx], dataset.modality_b[idx])


def save_dataset(path, dataset):
    header = json.dumps({"format": 1, "spec": dataset.spec.to_dict()}, sort_keys=True)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            header=np.frombuffer(header.encode(), dtype=np.uint8),
            modality_a=dataset.modality_a,
            modality_b=dataset.modality_b,
            category_labels=dataset.category_labels,
            chars=dataset.chars,
        )


def load_dataset(path):
    with np.load(path) as data:
        header = json.loads(data["header"].tobytes().decode())
        spec = MiSpec(**header["spec"])
        return PairedDataset(
            data["modality_a"], data["modality_b"], data["category_labels"], data["chars"], spec
        )
