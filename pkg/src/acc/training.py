"""Cross-modal momentum-contrast training with pluggable negative sampling.

``run`` drives the active-sampling loop: each epoch draws and encodes a
candidate pool per modality, and each step picks new negatives for both
dictionaries before the bidirectional contrastive update. ``run_baseline``
is the variant without pools, where each step enqueues the mini-batch keys
directly.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import dictionary as dq
from .encoders import (
    cross_modal_head_update,
    encode_key,
    encode_query,
    make_bundle,
    momentum_update,
    query_backward,
)
from .errors import CapacityError, DivergenceError, ValidationError
from .numerics import adam_init, adam_step, log_softmax, softmax
from .sampling import SAMPLERS, CandidatePool, active_select, ohem_select

log = logging.getLogger(__name__)

CSV_HEADER = "step,loss_v2a,loss_a2v,dict_unique_categories_v,dict_unique_categories_a"


@dataclass
class TrainConfig:
    M: int = 128
    K: int = 3840
    N: int = 38400
    m: float = 0.999
    tau: float = 0.7
    lr: float = 1e-3
    warmup_steps: int = 500
    epochs: int = 1
    sampler: str = "active"
    heads_enabled: bool = False
    seed: int = 0
    max_steps: int | None = None
    hidden: tuple = (64,)
    repr_dim: int = 16
    init: str = "fan_in"
    # re-encode pool keys every this many steps; 0 encodes once per epoch
    pool_refresh: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)

    def validate(self, dataset_size=None):
        if self.M < 1:
            raise ValidationError("M", "mini-batch size must be at least 1")
        if self.K < self.M:
            raise ValidationError("K", f"dictionary size {self.K} must be at least M={self.M}")
        if self.N < self.K:
            raise ValidationError("N", f"pool size {self.N} must be at least K={self.K}")
        if dataset_size is not None and self.N > dataset_size:
            raise ValidationError("N", f"pool size {self.N} exceeds dataset size {dataset_size}")
        if not (isinstance(self.tau, (int, float)) and math.isfinite(self.tau) and self.tau > 0):
            raise ValidationError("tau", "temperature must be positive")
        if not 0.0 <= self.m <= 1.0:
            raise ValidationError("m", f"momentum must lie in [0, 1], got {self.m}")
        if not self.lr >= 0:
            raise ValidationError("lr", "learning rate must be nonnegative")
        if self.warmup_steps < 0:
            raise ValidationError("warmup_steps", "must be nonnegative")
        if self.epochs < 0:
            raise ValidationError("epochs", "must be nonnegative")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValidationError("max_steps", "must be nonnegative")
        if self.sampler not in SAMPLERS:
            raise ValidationError("sampler", f"must be one of {SAMPLERS}")
        if self.pool_refresh < 0:
            raise ValidationError("pool_refresh", "must be nonnegative")
        if self.init not in ("fan_in", "uniform01"):
            raise ValidationError("init", "must be 'fan_in' or 'uniform01'")
        if self.repr_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValidationError("hidden", "layer widths must be positive")
        return self

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class StepMetrics:
    step: int
    loss_v2a: float
    loss_a2v: float
    dict_unique_categories_v: int | None = None
    dict_unique_categories_a: int | None = None
    selected_unique_v: int | None = None
    selected_unique_a: int | None = None
    grad_norm_v: float = 0.0
    grad_norm_a: float = 0.0

    def csv_row(self):
        def fmt(x):
            return "" if x is None else str(x)

        return ",".join(
            [
                str(self.step),
                repr(self.loss_v2a),
                repr(self.loss_a2v),
                fmt(self.dict_unique_categories_v),
                fmt(self.dict_unique_categories_a),
            ]
        )


@dataclass
class TrainState:
    config: TrainConfig
    bundle: object
    optimizers: dict
    dict_v: dq.KeyDictionary
    dict_a: dq.KeyDictionary
    rngs: dict
    pool_v: CandidatePool | None = None
    pool_a: CandidatePool | None = None
    step: int = 0


@dataclass
class RunResult:
    history: list = field(default_factory=list)
    state: TrainState | None = None


def _streams(seed):
    init, order, pool, sampler = np.random.SeedSequence(seed).spawn(4)
    return {
        "init": np.random.default_rng(init),
        "order": np.random.default_rng(order),
        "pool": np.random.default_rng(pool),
        "sampler": np.random.default_rng(sampler),
    }


def init_state(config, dataset):
    """Initial parameters and randomly filled dictionaries.

    Uses only the ``init`` random stream, so every sampler starts from the
    same point for a given seed.
    """
    config.validate(len(dataset))
    rngs = _streams(config.seed)
    bundle = make_bundle(
        dataset.modality_a.shape[1],
        dataset.modality_b.shape[1],
        config.hidden,
        config.repr_dim,
        rngs["init"],
        heads=config.heads_enabled,
        momentum=config.m,
        temperature=config.tau,
        init=config.init,
    )
    optimizers = {"visual": adam_init(bundle.visual.query), "audio": adam_init(bundle.audio.query)}
    if bundle.heads_enabled:
        optimizers["visual_head"] = adam_init(bundle.visual.query_head)
        optimizers["audio_head"] = adam_init(bundle.audio.query_head)
    n = len(dataset)
    dict_v = dq.init_dictionary(n, lambda ids: encode_key(bundle, "visual", dataset.modality_a[ids]), config.K, rngs["init"])
    dict_a = dq.init_dictionary(n, lambda ids: encode_key(bundle, "audio", dataset.modality_b[ids]), config.K, rngs["init"])
    return TrainState(config, bundle, optimizers, dict_v, dict_a, rngs)


def draw_pools(state, dataset):
    """Fresh candidate pools for both modalities, encoded by the key encoders."""
    n, N = len(dataset), state.config.N
    rng = state.rngs["pool"]
    ids_v = rng.choice(n, size=N, replace=False)
    ids_a = rng.choice(n, size=N, replace=False)
    state.pool_v = CandidatePool(ids_v, encode_key(state.bundle, "visual", dataset.modality_a[ids_v]))
    state.pool_a = CandidatePool(ids_a, encode_key(state.bundle, "audio", dataset.modality_b[ids_a]))


def refresh_pools(state, dataset):
    """Re-encode the current pools' keys without redrawing their ids."""
    for mod, attr, x in (("visual", "pool_v", dataset.modality_a), ("audio", "pool_a", dataset.modality_b)):
        pool = getattr(state, attr)
        setattr(state, attr, CandidatePool(pool.ids, encode_key(state.bundle, mod, x[pool.ids])))


def contrastive_posterior(query, positive_key, dict_snapshot, tau):
    """(K+1)-way softmax of ``q.k / tau`` with the positive key at index 0."""
    emb = dict_snapshot[0] if isinstance(dict_snapshot, tuple) else dict_snapshot
    emb = np.asarray(emb, dtype=np.float64).reshape(-1, len(query))
    logits = np.concatenate([[query @ positive_key], emb @ query])
    return softmax(logits, tau)


def contrastive_loss(queries, positives, negatives, tau):
    """Mean cross-entropy at index 0 and its gradient w.r.t. the queries."""
    m = len(queries)
    logits = np.concatenate([np.sum(queries * positives, axis=1, keepdims=True), queries @ negatives.T], axis=1)
    logp = log_softmax(logits, tau)
    loss = float(-np.mean(logp[:, 0]))
    p = np.exp(logp)
    grad = (p[:, :1] - 1.0) * positives + p[:, 1:] @ negatives
    return loss, grad / (tau * m)


def learning_rate(config, step):
    if config.warmup_steps <= 0:
        return config.lr
    return config.lr * min(1.0, (step + 1) / config.warmup_steps)


def _unique(labels, ids):
    return None if labels is None else int(len(np.unique(labels[ids])))


def _select(state, target, queries, cache, batch_ids, batch_keys, trace):
    """Ids and keys to enqueue into the ``target`` modality's dictionary."""
    cfg = state.config
    d = state.dict_v if target == "visual" else state.dict_a
    pool = state.pool_v if target == "visual" else state.pool_a
    if cfg.sampler == "random":
        return batch_ids, batch_keys
    if pool is None:
        raise CapacityError("no candidate pool has been drawn")
    if cfg.sampler == "ohem":
        ids = ohem_select(pool, d, queries, cfg.M)
    else:
        kind = "gradient" if cfg.sampler == "active" else "feature"
        ids = active_select(pool, d, queries, cache, cfg.M, state.rngs["sampler"], embedding=kind, trace=trace)
    return ids, pool.keys_for(ids)


def _update_parameters(state, cache_v, grad_v, cache_a, grad_a):
    b, cfg = state.bundle, state.config
    lr = learning_rate(cfg, state.step)
    norms = {}
    for mod, cache, g in (("visual", cache_v, grad_v), ("audio", cache_a, grad_a)):
        enc = b.modality(mod)
        grads, head_grads = query_backward(b, mod, cache, g)
        norms[mod] = math.sqrt(sum(float(np.sum(a * a)) for a in grads.arrays()))
        enc.query, state.optimizers[mod] = adam_step(enc.query, grads, state.optimizers[mod], lr)
        if head_grads is not None:
            enc.query_head, state.optimizers[mod + "_head"] = adam_step(
                enc.query_head, head_grads, state.optimizers[mod + "_head"], lr
            )
    momentum_update(b, "visual")
    momentum_update(b, "audio")
    if b.heads_enabled:
        cross_modal_head_update(b)
    return norms


def _finish_step(state, loss_v2a, loss_a2v, cache_v, g_v, cache_a, g_a, labels, sel_v, sel_a):
    limit = 10.0 * math.log(state.config.K + 1)
    for name, loss in (("v2a", loss_v2a), ("a2v", loss_a2v)):
        if not math.isfinite(loss) or loss > limit:
            raise DivergenceError(f"step {state.step}: loss_{name}={loss} exceeds {limit:.3f}", state)
    norms = _update_parameters(state, cache_v, g_v, cache_a, g_a)
    metrics = StepMetrics(
        state.step,
        loss_v2a,
        loss_a2v,
        _unique(labels, state.dict_v.ids),
        _unique(labels, state.dict_a.ids),
        _unique(labels, sel_v),
        _unique(labels, sel_a),
        norms["visual"],
        norms["audio"],
    )
    state.step += 1
    return metrics


def train_step(state, batch, labels=None, trace=None):
    """One iteration of cross-modal contrastive coding with negative sampling.

    ``labels`` (category per sample id) is used for metrics only. ``trace``,
    if given, is a callable receiving one dict per dictionary update.
    """
    b, cfg = state.bundle, state.config
    ids = batch.indices
    keys_v = encode_key(b, "visual", batch.modality_a)
    keys_a = encode_key(b, "audio", batch.modality_b)

    # negatives for the visual dictionary, scored against audio queries
    q_a, cache_a = encode_query(b, "audio", batch.modality_b)
    info_v = {} if trace else None
    sel_v, sel_keys_v = _select(state, "visual", q_a, cache_a, ids, keys_v, info_v)
    state.dict_v = dq.enqueue_dequeue(state.dict_v, sel_v, sel_keys_v, age=state.step)

    q_v, cache_v = encode_query(b, "visual", batch.modality_a)
    info_a = {} if trace else None
    sel_a, sel_keys_a = _select(state, "audio", q_v, cache_v, ids, keys_a, info_a)
    state.dict_a = dq.enqueue_dequeue(state.dict_a, sel_a, sel_keys_a, age=state.step)

    if trace:
        for mod, sel, info in (("visual", sel_v, info_v), ("audio", sel_a, info_a)):
            rec = {"step": state.step, "dictionary": mod, "sampler": cfg.sampler, "selected_ids": [int(i) for i in sel]}
            if labels is not None:
                rec["labels"] = [int(x) for x in labels[sel]]
            rec.update(info)
            trace(rec)

    loss_v2a, g_v = contrastive_loss(q_v, keys_a, state.dict_a.embeddings, cfg.tau)
    loss_a2v, g_a = contrastive_loss(q_a, keys_v, state.dict_v.embeddings, cfg.tau)
    return _finish_step(state, loss_v2a, loss_a2v, cache_v, g_v, cache_a, g_a, labels, sel_v, sel_a)


def baseline_step(state, batch, labels=None):
    """One iteration without active sampling: enqueue the batch keys, then code."""
    b, cfg = state.bundle, state.config
    keys_v = encode_key(b, "visual", batch.modality_a)
    keys_a = encode_key(b, "audio", batch.modality_b)
    state.dict_v = dq.enqueue_dequeue(state.dict_v, batch.indices, keys_v, age=state.step)
    state.dict_a = dq.enqueue_dequeue(state.dict_a, batch.indices, keys_a, age=state.step)
    q_v, cache_v = encode_query(b, "visual", batch.modality_a)
    q_a, cache_a = encode_query(b, "audio", batch.modality_b)
    loss_v2a, g_v = contrastive_loss(q_v, keys_a, state.dict_a.embeddings, cfg.tau)
    loss_a2v, g_a = contrastive_loss(q_a, keys_v, state.dict_v.embeddings, cfg.tau)
    return _finish_step(state, loss_v2a, loss_a2v, cache_v, g_v, cache_a, g_a, labels, batch.indices, batch.indices)


def _batches(state, n):
    m = state.config.M
    order = state.rngs["order"].permutation(n)
    for t in range(n // m):
        yield order[t * m : (t + 1) * m]


def _loop(config, dataset, step_fn, uses_pools, labels, trace_path, on_step):
    from .data import minibatch

    state = init_state(config, dataset)
    result = RunResult([], state)
    labels = dataset.category_labels if labels is None else labels
    if labels is False:
        labels = None
    trace_fh = open(trace_path, "w") if trace_path else None
    trace = (lambda rec: trace_fh.write(json.dumps(rec) + "\n")) if trace_fh else None
    try:
        for _ in range(config.epochs):
            if config.max_steps is not None and state.step >= config.max_steps:
                break
            if uses_pools:
                draw_pools(state, dataset)
            for idx in _batches(state, len(dataset)):
                if config.max_steps is not None and state.step >= config.max_steps:
                    break
                if uses_pools and config.pool_refresh and state.step % config.pool_refresh == 0:
                    refresh_pools(state, dataset)
                batch = minibatch(dataset, idx)
                if step_fn is train_step:
                    metrics = train_step(state, batch, labels, trace)
                else:
                    metrics = step_fn(state, batch, labels)
                result.history.append(metrics)
                if on_step is not None:
                    on_step(state, metrics)
    finally:
        if trace_fh:
            trace_fh.close()
    return result


def run(config, dataset, labels=None, trace_path=None, on_step=None):
    """Train for ``config.epochs`` epochs (capped at ``max_steps`` steps).

    ``labels`` defaults to the dataset's category labels and only feeds the
    coverage metrics; pass ``False`` to disable them.
    """
    uses_pools = config.sampler != "random"
    return _loop(config, dataset, train_step, uses_pools, labels, trace_path, on_step)


def run_baseline(config, dataset, labels=None, on_step=None):
    return _loop(config, dataset, baseline_step, False, labels, None, on_step)


def steps_per_epoch(config, dataset_size):
    return dataset_size // config.M


def epochs_for(config, dataset_size, steps):
    """Smallest epoch count that reaches ``steps`` iterations."""
    per = steps_per_epoch(config, dataset_size)
    return 0 if steps <= 0 else -(-steps // per)
