"""Fast invariant checks runnable from an installed package (``acc selftest``).

Each check returns ``(ok, detail)``. They are small versions of the test
suite's oracles, sized to finish in a few seconds together.
"""
from __future__ import annotations

import numpy as np

from . import dictionary as dq
from .encoders import make_bundle, momentum_update
from .numerics import init_mlp, log_softmax, mlp_forward, softmax
from .sampling import gradient_embedding, grad_distance_sq, kmeanspp_seed


def frozen_norm_pseudo_loss(w, b, z, norms, key, label):
    """Pseudo-label cross-entropy as a function of the final affine layer,
    with each query's normalizer held at ``norms``."""
    logits = (z @ w.T + b) @ key / norms
    return -log_softmax(logits)[label]


def check_softmax():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 7)) * 50
    p = softmax(x, 0.3)
    ok = np.allclose(p.sum(axis=1), 1.0) and np.all(p >= 0)
    big = softmax(np.array([1000.0, 1000.0]))
    ok = ok and np.allclose(big, [0.5, 0.5])
    return bool(ok), "rows sum to 1, overflow-safe"


def check_gradient_embedding(trials=20, h=1e-5):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(trials):
        d_in, dp, d, m = (int(v) for v in rng.integers(2, 7, size=4))
        params = init_mlp([d_in, dp, d], rng)
        x = rng.normal(size=(m, d_in))
        out, cache = mlp_forward(params, x)
        z = cache.penultimate
        norms = np.linalg.norm(out, axis=1)
        q = out / norms[:, None]
        key = rng.normal(size=d)
        key /= np.linalg.norm(key)
        cache_like = type("C", (), {"penultimate": z, "norms": norms})()
        g = gradient_embedding(key, q, cache_like)
        label = int(np.argmax(q @ key))
        w, b = params.layers[-1]
        fd = np.zeros_like(w)
        for idx in np.ndindex(*w.shape):
            wp, wm = w.copy(), w.copy()
            wp[idx] += h
            wm[idx] -= h
            fd[idx] = (frozen_norm_pseudo_loss(wp, b, z, norms, key, label) - frozen_norm_pseudo_loss(wm, b, z, norms, key, label)) / (2 * h)
        full = np.outer(g.key_factor, g.activation_factor)
        scale = max(np.linalg.norm(fd), 1e-12)
        worst = max(worst, float(np.linalg.norm(full - fd) / scale))
    return worst < 1e-6, f"max relative error {worst:.2e}"


def check_distance_identity():
    rng = np.random.default_rng(2)
    from .sampling import GradientEmbedding

    worst = 0.0
    for _ in range(50):
        a = GradientEmbedding(rng.normal(size=5), rng.normal(size=4))
        b = GradientEmbedding(rng.normal(size=5), rng.normal(size=4))
        direct = float(np.sum((a.flatten() - b.flatten()) ** 2))
        worst = max(worst, abs(grad_distance_sq(a, b) - direct))
    return worst < 1e-10, f"max abs error {worst:.2e}"


def check_queue():
    rng = np.random.default_rng(3)
    k, d = 6, 3
    q = dq.KeyDictionary(k, np.arange(k), rng.normal(size=(k, d)), np.zeros(k, dtype=np.int64))
    history = list(range(k))
    nxt = k
    for _ in range(30):
        m = int(rng.integers(0, k + 1))
        ids = np.arange(nxt, nxt + m)
        nxt += m
        q = dq.enqueue_dequeue(q, ids, rng.normal(size=(m, d)))
        history.extend(ids.tolist())
    ok = q.ids.tolist() == history[-k:]
    return ok, "contents equal the last K enqueued"


def check_momentum():
    rng = np.random.default_rng(4)
    ok = True
    for m in (0.0, 1.0, 0.9):
        b = make_bundle(4, 4, (5,), 3, rng, momentum=m)
        b.visual.query = init_mlp([4, 5, 3], rng)
        k0 = [a.copy() for a in b.visual.key.arrays()]
        q0 = b.visual.query.arrays()
        momentum_update(b, "visual")
        for k, kn, q in zip(k0, b.visual.key.arrays(), q0):
            ok = ok and np.array_equal(kn, m * k + (1.0 - m) * q)
    return bool(ok), "m=0 copies, m=1 freezes, elementwise blend otherwise"


def check_kmeanspp(trials=20000, alpha_crit=6.635):
    # chi-square critical value for 1 dof at alpha = 0.01
    rng = np.random.default_rng(5)
    pts = np.array([[0.0], [1.0], [10.0]])
    hits = sum(int(kmeanspp_seed(pts, 2, rng, first_index=0)[1] == 2) for _ in range(trials))
    p = 100.0 / 101.0
    exp_hit, exp_miss = trials * p, trials * (1 - p)
    chi2 = (hits - exp_hit) ** 2 / exp_hit + (trials - hits - exp_miss) ** 2 / exp_miss
    return chi2 < alpha_crit, f"chi2={chi2:.3f} over {trials} draws"


CHECKS = {
    "softmax": check_softmax,
    "gradient_embedding": check_gradient_embedding,
    "distance_identity": check_distance_identity,
    "queue_fifo": check_queue,
    "momentum": check_momentum,
    "kmeanspp": check_kmeanspp,
}


def run_all(out=print):
    failures = 0
    for name, fn in CHECKS.items():
        ok, detail = fn()
        failures += not ok
        out(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return failures


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(1 if run_all() else 0)
