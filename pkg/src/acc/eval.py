"""Measuring what the samplers and encoders do.

Category coverage of selected negatives, a frozen-encoder linear probe,
and the two experiment drivers built on them (coverage over training and
probe accuracy across mutual-information levels).
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln

from .data import generate, mutual_information
from .encoders import encode_query
from .errors import InvalidArgumentError
from .numerics import log_softmax
from .sampling import active_select
from .training import epochs_for, run


def unique_category_count(selected_ids, labels):
    ids = np.asarray(selected_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= len(labels)):
        raise IndexError("selected id outside the label array")
    return int(len(np.unique(np.asarray(labels)[ids])))


def expected_unique_categories(category_counts, m):
    """Expected distinct categories in ``m`` draws without replacement.

    Exact: sum over categories of ``1 - C(n - n_c, m) / C(n, m)``.
    """
    counts = np.asarray(category_counts, dtype=np.float64)
    n = counts.sum()
    if m > n:
        raise InvalidArgumentError(f"cannot draw {m} from {int(n)} items")

    def log_comb(a, b):
        return gammaln(a + 1) - gammaln(b + 1) - gammaln(a - b + 1)

    rest = n - counts
    miss = np.where(rest >= m, np.exp(log_comb(rest, m) - log_comb(n, m)), 0.0)
    return float(np.sum(1.0 - miss))


@dataclass
class CoverageSeries:
    sampler: str
    M: int
    seed: int
    counts: np.ndarray  # unique categories among each step's selected negatives
    num_categories: int
    embedding: str = "gradient"

    @property
    def fractions(self):
        return self.counts / self.num_categories


def active_feature_variant(pool, dictionary, m, rng):
    """Active selection with k-means++ over the raw key embeddings."""
    return active_select(pool, dictionary, None, None, m, rng, embedding="feature")


_EMBEDDING_KIND = {"active": "gradient", "feature": "feature", "random": "none", "ohem": "loss"}


def coverage_experiment(dataset, config, samplers=("active", "feature", "random"), batch_sizes=(32, 64, 128), steps=300, seeds=None):
    """Per-step category coverage of the visual-dictionary selections.

    ``config`` supplies everything but ``M`` (and the seed when ``seeds`` is
    given); all samplers share seeds and therefore initialization and data
    order.
    """
    seeds = [config.seed] if seeds is None else list(seeds)
    labels = dataset.category_labels
    num_categories = int(dataset.spec.num_categories)
    out = []
    for m in batch_sizes:
        for seed in seeds:
            for sampler in samplers:
                cfg = replace(config, M=m, sampler=sampler, seed=seed, max_steps=steps)
                cfg = replace(cfg, epochs=epochs_for(cfg, len(dataset), steps))
                hist = run(cfg, dataset, labels=labels).history if steps > 0 else []
                counts = np.array([h.selected_unique_v for h in hist], dtype=np.int64)
                out.append(CoverageSeries(sampler, m, seed, counts, num_categories, _EMBEDDING_KIND[sampler]))
    return out


@dataclass
class ProbeResult:
    train_accuracy: float
    test_accuracy: float
    per_task: list  # (train, test) accuracy per label column


def _fit_softmax_regression(x, y, num_classes, l2=1e-4, tol=1e-6, max_iter=1000):
    n, d = x.shape
    xb = np.hstack([x, np.ones((n, 1))])
    onehot = np.zeros((n, num_classes))
    onehot[np.arange(n), y] = 1.0

    def objective(flat):
        w = flat.reshape(d + 1, num_classes)
        logp = log_softmax(xb @ w)
        loss = -np.sum(onehot * logp) / n + 0.5 * l2 * np.sum(w[:-1] ** 2)
        grad = xb.T @ (np.exp(logp) - onehot) / n
        grad[:-1] += l2 * w[:-1]
        return loss, grad.ravel()

    res = minimize(objective, np.zeros((d + 1) * num_classes), jac=True, method="L-BFGS-B", options={"ftol": tol, "gtol": 1e-8, "maxiter": max_iter})
    return res.x.reshape(d + 1, num_classes)


def _probe_accuracy(w, x, y):
    xb = np.hstack([x, np.ones((len(x), 1))])
    return float(np.mean(np.argmax(xb @ w, axis=1) == y)) if len(y) else float("nan")


def probe_features(features, labels, split_seed, train_fraction=0.8):
    """Fit a multinomial logistic probe per label column on an 80/20 split."""
    x = np.asarray(features, dtype=np.float64)
    y_all = np.asarray(labels, dtype=np.int64)
    if y_all.ndim == 1:
        y_all = y_all[:, None]
    rng = np.random.default_rng(split_seed)
    perm = rng.permutation(len(x))
    cut = int(round(train_fraction * len(x)))
    tr, te = perm[:cut], perm[cut:]
    per_task = []
    for col in range(y_all.shape[1]):
        y = y_all[:, col]
        classes, y_enc = np.unique(y, return_inverse=True)
        if len(classes) == 1:
            per_task.append((1.0, 1.0))
            continue
        if len(np.unique(y_enc[tr])) == 1:
            raise InvalidArgumentError("training split holds a single class")
        w = _fit_softmax_regression(x[tr], y_enc[tr], len(classes))
        per_task.append((_probe_accuracy(w, x[tr], y_enc[tr]), _probe_accuracy(w, x[te], y_enc[te])))
    tr_acc = float(np.mean([a for a, _ in per_task]))
    te_acc = float(np.mean([b for _, b in per_task]))
    return ProbeResult(tr_acc, te_acc, per_task)


def linear_probe(bundle, dataset, split_seed, modality="visual", labels=None):
    """Probe frozen query-encoder embeddings.

    By default the targets are the per-slot characters and the reported
    accuracy is their mean over slots.
    """
    emb, _ = encode_query(bundle, modality, dataset.inputs(modality))
    return probe_features(emb, dataset.chars if labels is None else labels, split_seed)


def _sweep_cell(args):
    spec, config, sampler, seed, steps, split_seed = args
    ds = generate(spec)
    cfg = replace(config, sampler=sampler, seed=seed, max_steps=steps)
    cfg = replace(cfg, epochs=epochs_for(cfg, len(ds), steps))
    result = run(cfg, ds, labels=False)
    probe = linear_probe(result.state.bundle, ds, split_seed)
    return {
        "e_mi": float(math.prod(spec.alphabet_sizes)) if spec.skew == 0 else math.exp(mutual_information(spec)),
        "slots": spec.num_slots,
        "sampler": sampler,
        "seed": seed,
        "accuracy": probe.test_accuracy,
    }


def worker_count():
    try:
        cap = int(os.environ.get("ACC_THREADS", "0"))
    except ValueError:
        cap = 0
    avail = os.cpu_count() or 1
    return max(1, min(cap, avail) if cap > 0 else avail)


def mi_sweep(specs, config, samplers=("active", "random"), seeds=(0,), steps=2000, split_seed=0, workers=None):
    """Probe accuracy for every (spec, sampler, seed) cell.

    Returns rows ordered by spec, then seed, then sampler. Cells are
    independent and run in a process pool when more than one worker is
    allowed; results do not depend on the worker count.
    """
    cells = [(spec, config, s, seed, steps, split_seed) for spec in specs for seed in seeds for s in samplers]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(_sweep_cell, cells))
    return [_sweep_cell(c) for c in cells]
