"""Fixed-capacity FIFO queue of negative keys."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, ShapeError


@dataclass(frozen=True)
class KeyEntry:
    sample_id: int
    embedding: np.ndarray
    age: int


@dataclass
class KeyDictionary:
    """Queue of keys, oldest first.

    ``ids[i]``, ``embeddings[i]`` and ``ages[i]`` describe entry ``i``; the
    arrays are never mutated in place, each update builds new ones.
    """

    capacity: int
    ids: np.ndarray
    embeddings: np.ndarray
    ages: np.ndarray

    def __post_init__(self):
        n = len(self.ids)
        if self.embeddings.shape[0] != n or len(self.ages) != n:
            raise ShapeError("ids, embeddings and ages must have equal length")

    def __len__(self):
        return len(self.ids)

    @property
    def entries(self):
        return [KeyEntry(int(i), e, int(a)) for i, e, a in zip(self.ids, self.embeddings, self.ages)]

    def contains(self, ids):
        """Boolean mask: which of ``ids`` are currently queued."""
        return np.isin(ids, self.ids)


def init_dictionary(num_samples, encode, capacity, rng):
    """Fill a dictionary with ``capacity`` distinct random samples.

    ``encode`` maps an index array to key embeddings (the current key
    encoder applied to those samples).
    """
    if capacity > num_samples:
        raise CapacityError(f"dictionary size {capacity} exceeds dataset size {num_samples}")
    ids = rng.choice(num_samples, size=capacity, replace=False).astype(np.int64)
    emb = np.asarray(encode(ids), dtype=np.float64)
    return KeyDictionary(capacity, ids, emb, np.zeros(capacity, dtype=np.int64))


def enqueue_dequeue(dictionary, ids, embeddings, age=0):
    """Drop the ``len(ids)`` oldest entries and append the new ones."""
    ids = np.asarray(ids, dtype=np.int64)
    embeddings = np.asarray(embeddings, dtype=np.float64)
    m = len(ids)
    if m > dictionary.capacity:
        raise CapacityError(f"cannot enqueue {m} entries into a dictionary of size {dictionary.capacity}")
    if embeddings.shape != (m, dictionary.embeddings.shape[1]):
        raise ShapeError(f"expected embeddings of shape {(m, dictionary.embeddings.shape[1])}, got {embeddings.shape}")
    return KeyDictionary(
        dictionary.capacity,
        np.concatenate([dictionary.ids[m:], ids]),
        np.concatenate([dictionary.embeddings[m:], embeddings]),
        np.concatenate([dictionary.ages[m:], np.full(m, age, dtype=np.int64)]),
    )


def snapshot(dictionary):
    """Read-only ``(embeddings, ids)`` view, oldest row first."""
    emb = dictionary.embeddings.view()
    ids = dictionary.ids.view()
    emb.flags.writeable = False
    ids.flags.writeable = False
    return emb, ids
