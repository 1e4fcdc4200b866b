"""Choosing which pool candidates enter a key dictionary.

Active sampling scores each candidate key by the last-layer gradient of a
pseudo-label cross-entropy against the current query batch, then picks a
diverse, high-magnitude subset with k-means++ seeding. Random and
hard-example-mining (OHEM) selectors are provided as baselines.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import CapacityError, DegenerateInputError, InvalidArgumentError, ShapeError
from .numerics import softmax

log = logging.getLogger(__name__)

SAMPLERS = ("active", "feature", "random", "ohem")


@dataclass
class CandidatePool:
    """Candidate ids with their key embeddings (encoded once per epoch)."""

    ids: np.ndarray
    keys: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.keys = np.asarray(self.keys, dtype=np.float64)
        if self.keys.shape[0] != len(self.ids):
            raise ShapeError("pool ids and keys must have equal length")
        self._pos = {int(i): p for p, i in enumerate(self.ids)}
        if len(self._pos) != len(self.ids):
            raise InvalidArgumentError("pool ids must be distinct")

    def __len__(self):
        return len(self.ids)

    def keys_for(self, ids):
        return self.keys[[self._pos[int(i)] for i in ids]]

    def outside(self, dictionary):
        """Positions of candidates whose id is not in ``dictionary``."""
        return np.flatnonzero(~dictionary.contains(self.ids))


@dataclass
class PseudoLabelResult:
    posterior: np.ndarray
    pseudo_label: int


@dataclass
class GradientEmbedding:
    """Last-layer gradient ``g = outer(key_factor, activation_factor)``."""

    key_factor: np.ndarray
    activation_factor: np.ndarray

    def flatten(self):
        return np.outer(self.key_factor, self.activation_factor).ravel()

    @property
    def sq_norm(self):
        return float(self.key_factor @ self.key_factor) * float(self.activation_factor @ self.activation_factor)


@dataclass
class GradientEmbeddings:
    """A batch of factored gradients, one row of each factor per candidate."""

    key_factors: np.ndarray
    activation_factors: np.ndarray

    def __len__(self):
        return self.key_factors.shape[0]

    def __getitem__(self, i):
        return GradientEmbedding(self.key_factors[i], self.activation_factors[i])

    @property
    def sq_norms(self):
        return np.sum(self.key_factors**2, axis=1) * np.sum(self.activation_factors**2, axis=1)


def _as_queries(query_batch):
    q = np.atleast_2d(np.asarray(query_batch, dtype=np.float64))
    if q.shape[0] == 0:
        raise InvalidArgumentError("the query batch is empty")
    return q


def pseudo_posterior(candidate_key, query_batch):
    """Softmax over queries of ``key . q_j`` (temperature 1) and its argmax."""
    q = _as_queries(query_batch)
    k = np.asarray(candidate_key, dtype=np.float64)
    if k.shape != (q.shape[1],):
        raise ShapeError(f"key dimension {k.shape} does not match queries {q.shape}")
    p = softmax(q @ k)
    return PseudoLabelResult(p, int(np.argmax(p)))


def pseudo_posteriors(keys, queries):
    """Row-wise :func:`pseudo_posterior` for a matrix of candidate keys."""
    q = _as_queries(queries)
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[1] != q.shape[1]:
        raise ShapeError(f"keys {keys.shape} and queries {q.shape} disagree")
    p = softmax(keys @ q.T)
    return p, np.argmax(p, axis=1)


def _activation_factors(posteriors, labels, penultimate, norms):
    # The query normalizer |r_j| is held at its current value, so the logit
    # k . r_j / |r_j| is linear in the last-layer weights.
    resid = posteriors.copy()
    resid[np.arange(len(labels)), labels] -= 1.0
    return resid @ (penultimate / norms[:, None])


def _check_cache(q, cache):
    z = np.asarray(cache.penultimate, dtype=np.float64)
    norms = np.asarray(cache.norms, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] != q.shape[0] or norms.shape != (q.shape[0],):
        raise ShapeError(f"query caches ({z.shape}, {norms.shape}) do not match {q.shape[0]} queries")
    return z, norms


def gradient_embedding(candidate_key, query_batch, query_caches):
    """Gradient of the pseudo-label cross-entropy w.r.t. the final affine
    weights of the query encoder, in factored form.

    ``query_caches`` needs ``penultimate`` (input ``z_j`` of the final layer)
    and ``norms`` (length of each pre-normalization output).
    """
    q = _as_queries(query_batch)
    z, norms = _check_cache(q, query_caches)
    res = pseudo_posterior(candidate_key, q)
    w = _activation_factors(res.posterior[None, :], np.array([res.pseudo_label]), z, norms)[0]
    return GradientEmbedding(np.asarray(candidate_key, dtype=np.float64).copy(), w)


def gradient_embeddings(keys, queries, query_caches):
    q = _as_queries(queries)
    z, norms = _check_cache(q, query_caches)
    p, labels = pseudo_posteriors(keys, q)
    return GradientEmbeddings(np.asarray(keys, dtype=np.float64), _activation_factors(p, labels, z, norms))


def grad_distance_sq(a, b):
    """Squared Frobenius distance between two factored gradients."""
    if a.key_factor.shape != b.key_factor.shape or a.activation_factor.shape != b.activation_factor.shape:
        raise ShapeError("gradient embeddings have different dimensions")
    d = a.sq_norm + b.sq_norm - 2.0 * float(a.key_factor @ b.key_factor) * float(a.activation_factor @ b.activation_factor)
    return max(d, 0.0)


def _distance_fn(points):
    """Closure returning squared distances from every point to point ``i``."""
    if isinstance(points, GradientEmbeddings):
        u, w = points.key_factors, points.activation_factors
        sq = points.sq_norms

        def dist(i):
            d = sq + sq[i] - 2.0 * (u @ u[i]) * (w @ w[i])
            # cancellation leaves ~1e-16 residue for exact duplicates
            d[d <= 1e-12 * (sq + sq[i])] = 0.0
            return d

        return dist

    def dist(i):
        diff = points - points[i]
        diff *= diff
        return diff.sum(axis=1)

    return dist


def kmeanspp_seed(embeddings, num_seeds, rng, first_index=None, on_degenerate="raise"):
    """k-means++ seeding: indices of ``num_seeds`` distinct, spread-out points.

    The first index is uniform (or ``first_index``); each later index is drawn
    with probability proportional to its squared distance to the nearest
    chosen seed. ``embeddings`` is an ``(n, D)`` array or a
    :class:`GradientEmbeddings` batch.

    If every remaining point sits on a chosen seed while seeds are still
    needed, ``on_degenerate="raise"`` raises :class:`DegenerateInputError`
    and ``"uniform"`` fills the rest uniformly from the unchosen points.
    """
    if not isinstance(embeddings, GradientEmbeddings):
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if embeddings.ndim == 1:
            embeddings = embeddings[:, None]
    n = len(embeddings)
    if num_seeds > n:
        raise CapacityError(f"cannot pick {num_seeds} seeds from {n} points")
    if num_seeds <= 0:
        return np.empty(0, dtype=np.int64)
    first = int(rng.integers(n)) if first_index is None else int(first_index)
    chosen = [first]
    taken = np.zeros(n, dtype=bool)
    taken[first] = True
    dist = _distance_fn(embeddings)
    d2 = dist(first)
    d2[taken] = 0.0
    while len(chosen) < num_seeds:
        cum = d2.cumsum()
        total = cum[-1]
        if not total > 0:
            if on_degenerate != "uniform":
                raise DegenerateInputError(
                    f"no positive-distance points left after {len(chosen)} of {num_seeds} seeds"
                )
            log.warning("k-means++ ran out of distinct points after %d seeds; filling uniformly", len(chosen))
            rest = rng.choice(np.flatnonzero(~taken), size=num_seeds - len(chosen), replace=False)
            chosen.extend(int(i) for i in rest)
            break
        idx = int(cum.searchsorted(rng.random() * total, side="right"))
        chosen.append(idx)
        taken[idx] = True
        if len(chosen) < num_seeds:
            np.minimum(d2, dist(idx), out=d2)
            d2[idx] = 0.0
    return np.asarray(chosen, dtype=np.int64)


def _candidates(pool, dictionary, m):
    pos = pool.outside(dictionary)
    if len(pos) < m:
        raise CapacityError(f"only {len(pos)} pool candidates outside the dictionary, need {m}")
    return pos


def active_select(pool, dictionary, queries, query_cache, m, rng, embedding="gradient", trace=None):
    """Pick ``m`` candidate ids by k-means++ over gradient (or key) embeddings.

    ``queries`` are the unit query embeddings of the *other* modality's
    mini-batch and ``query_cache`` their forward cache. If ``trace`` is a
    dict it receives the gradient norms of the chosen candidates.
    """
    pos = _candidates(pool, dictionary, m)
    keys = pool.keys[pos]
    if embedding == "gradient":
        emb = gradient_embeddings(keys, queries, query_cache)
        if not np.any(emb.sq_norms > 0):
            log.warning("all %d candidates have zero gradient embedding; sampling uniformly", len(pos))
    elif embedding == "feature":
        emb = keys
    else:
        raise InvalidArgumentError(f"unknown embedding kind {embedding!r}")
    picked = kmeanspp_seed(emb, m, rng, on_degenerate="uniform")
    if trace is not None and embedding == "gradient":
        trace["grad_norms"] = np.sqrt(emb.sq_norms[picked]).tolist()
    return pool.ids[pos[picked]]


def random_select(pool, dictionary, m, rng):
    """``m`` ids drawn uniformly without replacement from pool minus dictionary."""
    pos = _candidates(pool, dictionary, m)
    return pool.ids[rng.choice(pos, size=m, replace=False)]


def ohem_scores(keys, queries):
    """Pseudo-label cross-entropy ``-log max_j p_j`` of each candidate key."""
    q = _as_queries(queries)
    logits = np.asarray(keys, dtype=np.float64) @ q.T
    top = logits.max(axis=1)
    return np.log(np.exp(logits - top[:, None]).sum(axis=1))


def ohem_select(pool, dictionary, queries, m):
    """The ``m`` candidates with the highest pseudo-label loss (ties: lowest id)."""
    pos = _candidates(pool, dictionary, m)
    scores = ohem_scores(pool.keys[pos], queries)
    ids = pool.ids[pos]
    order = np.lexsort((ids, -scores))
    return ids[order[:m]]
