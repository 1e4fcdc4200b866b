import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from acc.data import MiSpec, generate, minibatch
from acc.encoders import encode_key, encode_query, make_bundle, query_backward
from acc.errors import DivergenceError, ValidationError
from acc.training import (
    CSV_HEADER,
    TrainConfig,
    baseline_step,
    contrastive_loss,
    contrastive_posterior,
    epochs_for,
    init_state,
    learning_rate,
    run,
    run_baseline,
    train_step,
)
from oracles import central_diff, info_nce, rel_err, softmax_direct

TINY = dict(M=8, K=32, N=128, m=0.9, tau=0.2, warmup_steps=5, hidden=(12,), repr_dim=6)


@pytest.fixture(scope="module")
def ds():
    return generate(MiSpec(alphabet_sizes=(6, 4), dataset_size=240, seed=1))


def _unit(x):
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def test_contrastive_loss_matches_oracle():
    rng = np.random.default_rng(0)
    q, pos = _unit(rng.normal(size=(3, 4))), _unit(rng.normal(size=(3, 4)))
    neg = _unit(rng.normal(size=(5, 4)))
    loss, _ = contrastive_loss(q, pos, neg, 0.3)
    expected = np.mean([info_nce(q[i], pos[i], neg, 0.3) for i in range(3)])
    assert math.isclose(loss, expected, rel_tol=1e-12)


def test_contrastive_loss_grad_fd():
    rng = np.random.default_rng(1)
    q, pos = rng.normal(size=(3, 4)), _unit(rng.normal(size=(3, 4)))
    neg = _unit(rng.normal(size=(6, 4)))
    _, g = contrastive_loss(q, pos, neg, 0.5)
    fd = central_diff(lambda: contrastive_loss(q, pos, neg, 0.5)[0], q)
    assert rel_err(g, fd) < 1e-8


def test_contrastive_posterior_positive_first():
    rng = np.random.default_rng(2)
    q = _unit(rng.normal(size=4))
    p = contrastive_posterior(q, q, _unit(rng.normal(size=(7, 4))), 0.1)
    assert p.shape == (8,) and math.isclose(p.sum(), 1.0)
    assert np.argmax(p) == 0


@pytest.mark.parametrize("heads", [False, True])
def test_full_objective_backprop_fd(heads):
    """Both directions of the contrastive loss w.r.t. every query parameter."""
    rng = np.random.default_rng(3)
    b = make_bundle(5, 4, (6,), 3, rng, heads=heads, momentum=0.9, temperature=0.4)
    xv, xa = rng.normal(size=(2, 5)), rng.normal(size=(2, 4))
    dv, da = _unit(rng.normal(size=(2, 3))), _unit(rng.normal(size=(2, 3)))
    kv, ka = encode_key(b, "visual", xv), encode_key(b, "audio", xa)

    def total():
        qv, _ = encode_query(b, "visual", xv)
        qa, _ = encode_query(b, "audio", xa)
        return sum(info_nce(qv[i], ka[i], da, 0.4) + info_nce(qa[i], kv[i], dv, 0.4) for i in range(2)) / 2

    qv, cv = encode_query(b, "visual", xv)
    qa, ca = encode_query(b, "audio", xa)
    gv = query_backward(b, "visual", cv, contrastive_loss(qv, ka, da, 0.4)[1])
    ga = query_backward(b, "audio", ca, contrastive_loss(qa, kv, dv, 0.4)[1])
    for mod, (grads, head_grads) in (("visual", gv), ("audio", ga)):
        enc = b.modality(mod)
        for a, g in zip(enc.query.arrays(), grads.arrays()):
            assert rel_err(g, central_diff(total, a)) < 1e-5
        if heads:
            for a, g in zip(enc.query_head.arrays(), head_grads.arrays()):
                assert rel_err(g, central_diff(total, a)) < 1e-5


def test_learning_rate_warmup():
    cfg = TrainConfig(lr=1e-3, warmup_steps=4)
    assert [learning_rate(cfg, s) for s in range(6)] == pytest.approx([2.5e-4, 5e-4, 7.5e-4, 1e-3, 1e-3, 1e-3])
    assert learning_rate(TrainConfig(lr=0.1, warmup_steps=0), 0) == 0.1


@pytest.mark.parametrize(
    "kw,field",
    [
        ({"M": 0}, "M"),
        ({"M": 64, "K": 32}, "K"),
        ({"K": 64, "N": 32}, "N"),
        ({"m": 1.5}, "m"),
        ({"m": -0.1}, "m"),
        ({"tau": 0.0}, "tau"),
        ({"lr": -1.0}, "lr"),
        ({"warmup_steps": -1}, "warmup_steps"),
        ({"sampler": "hardest"}, "sampler"),
        ({"init": "xavier"}, "init"),
        ({"pool_refresh": -1}, "pool_refresh"),
    ],
)
def test_config_validation_names_field(kw, field):
    base = dict(M=8, K=32, N=128)
    base.update(kw)
    with pytest.raises(ValidationError) as e:
        TrainConfig(**base).validate()
    assert e.value.field == field


def test_pool_larger_than_dataset():
    with pytest.raises(ValidationError) as e:
        TrainConfig(M=8, K=32, N=500).validate(dataset_size=240)
    assert e.value.field == "N"


@pytest.mark.parametrize("sampler", ["active", "feature", "ohem", "random"])
def test_train_step_enqueues_selection(ds, sampler):
    cfg = TrainConfig(sampler=sampler, **TINY)
    state = init_state(cfg, ds)
    from acc.training import draw_pools

    draw_pools(state, ds)
    recs = []
    batch = minibatch(ds, np.arange(8))
    m = train_step(state, batch, ds.category_labels, trace=recs.append)
    assert m.step == 0 and state.step == 1
    assert [r["dictionary"] for r in recs] == ["visual", "audio"]
    for r, d in zip(recs, (state.dict_v, state.dict_a)):
        assert d.ids[-8:].tolist() == r["selected_ids"]
        assert len(set(r["selected_ids"])) == 8
    if sampler == "random":
        assert recs[0]["selected_ids"] == list(range(8))
    if sampler == "active":
        assert len(recs[0]["grad_norms"]) == 8


def test_loss_decreases_on_small_problem(ds):
    cfg = TrainConfig(sampler="active", epochs=10, **TINY)
    h = run(cfg, ds).history
    first = np.mean([x.loss_v2a for x in h[:20]])
    last = np.mean([x.loss_v2a for x in h[-20:]])
    assert last < first


def test_runs_are_deterministic(ds):
    cfg = TrainConfig(sampler="active", max_steps=25, epochs=1, **TINY)
    a = [x.csv_row() for x in run(cfg, ds).history]
    b = [x.csv_row() for x in run(cfg, ds).history]
    assert a == b


def test_labels_do_not_change_training(ds):
    # coverage labels only feed metrics, never the learner or the sampler
    cfg = TrainConfig(sampler="active", max_steps=20, epochs=1, **TINY)
    with_labels = run(cfg, ds).history
    shuffled = np.random.default_rng(0).permutation(ds.category_labels)
    other = run(cfg, ds, labels=shuffled).history
    blind = run(cfg, ds, labels=False).history
    for a, b, c in zip(with_labels, other, blind):
        assert a.loss_v2a == b.loss_v2a == c.loss_v2a
        assert a.loss_a2v == b.loss_a2v == c.loss_a2v
    assert blind[0].dict_unique_categories_v is None


def test_random_sampler_equals_baseline(ds):
    cfg = TrainConfig(sampler="random", max_steps=30, epochs=2, **TINY)
    a = [(x.loss_v2a, x.loss_a2v) for x in run(cfg, ds).history]
    b = [(x.loss_v2a, x.loss_a2v) for x in run_baseline(cfg, ds).history]
    assert a == b and len(a) == 30


def test_frozen_keys_never_move(ds):
    cfg = TrainConfig(sampler="active", max_steps=15, epochs=1, **dict(TINY, m=1.0))
    state = init_state(cfg, ds)
    before = [a.copy() for a in state.bundle.visual.key.arrays() + state.bundle.audio.key.arrays()]
    state = run(cfg, ds).state
    after = state.bundle.visual.key.arrays() + state.bundle.audio.key.arrays()
    for x, y in zip(before, after):
        assert_array_equal(x, y)


def test_heads_run(ds):
    cfg = TrainConfig(sampler="active", max_steps=10, heads_enabled=True, **TINY)
    st = run(cfg, ds).state
    assert st.bundle.heads_enabled and "visual_head" in st.optimizers


def test_divergence_guard(ds):
    cfg = TrainConfig(sampler="random", max_steps=5, **dict(TINY, tau=1e-4))
    state = init_state(cfg, ds)
    with pytest.raises(DivergenceError) as e:
        for t in range(5):
            baseline_step(state, minibatch(ds, np.arange(8 * t, 8 * t + 8)))
    assert e.value.state is state


def test_zero_epochs_and_epoch_math(ds):
    res = run(TrainConfig(epochs=0, **TINY), ds)
    assert res.history == [] and res.state.step == 0
    cfg = TrainConfig(**TINY)
    assert epochs_for(cfg, 240, 31) == 2 and epochs_for(cfg, 240, 0) == 0


def test_csv_row_format():
    from acc.training import StepMetrics

    assert CSV_HEADER.count(",") == 4
    assert StepMetrics(3, 0.5, 0.25, 7, None).csv_row() == "3,0.5,0.25,7,"


def test_pool_refresh_changes_pool_keys(ds):
    seen = []
    cfg = TrainConfig(sampler="active", max_steps=4, pool_refresh=1, **TINY)
    run(cfg, ds, on_step=lambda st, m: seen.append(st.pool_v.keys.copy()))
    assert not np.array_equal(seen[0], seen[-1])
    cfg = TrainConfig(sampler="active", max_steps=4, pool_refresh=0, **TINY)
    seen.clear()
    run(cfg, ds, on_step=lambda st, m: seen.append(st.pool_v.keys.copy()))
    assert_allclose(seen[0], seen[-1])


def test_contrastive_posterior_spec_examples():
    assert contrastive_posterior(np.array([0.6, 0.8]), np.array([1.0, 0.0]), np.empty((0, 2)), 0.7).tolist() == [1.0]
    k = np.array([0.0, 1.0])
    p = contrastive_posterior(np.array([0.6, 0.8]), k, np.tile(k, (4, 1)), 0.7)
    assert_allclose(p, np.full(5, 0.2), rtol=1e-14)
    p = contrastive_posterior(np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([[0.0, 1.0]]), 0.7)
    assert_allclose(p, softmax_direct([1 / 0.7, 0.0]), rtol=1e-14)


def test_zero_lr_full_momentum_changes_nothing(ds):
    cfg = TrainConfig(sampler="active", lr=0.0, **dict(TINY, m=1.0))
    state = init_state(cfg, ds)
    from acc.training import draw_pools

    draw_pools(state, ds)
    b = state.bundle
    before = [a.copy() for mod in (b.visual, b.audio) for a in mod.query.arrays() + mod.key.arrays()]
    m = train_step(state, minibatch(ds, np.arange(8)))
    after = [a for mod in (b.visual, b.audio) for a in mod.query.arrays() + mod.key.arrays()]
    for x, y in zip(before, after):
        assert_array_equal(x, y)
    assert np.isfinite(m.loss_v2a) and m.loss_v2a > 0


def test_two_sample_single_step_loss():
    tiny = generate(MiSpec(alphabet_sizes=(2,), dataset_size=2, seed=3))
    cfg = TrainConfig(M=1, K=1, N=2, m=0.9, tau=0.5, warmup_steps=1, hidden=(4,), repr_dim=3, sampler="active")
    state = init_state(cfg, tiny)
    from acc.training import draw_pools

    draw_pools(state, tiny)
    b = state.bundle
    batch = minibatch(tiny, np.array([1]))
    q_v = encode_query(b, "visual", batch.modality_a)[0][0]
    k_a = encode_key(b, "audio", batch.modality_b)[0]
    m = train_step(state, batch)
    # the single dictionary slot now holds the selected key
    assert len(state.dict_a) == 1
    p = contrastive_posterior(q_v, k_a, state.dict_a.embeddings, cfg.tau)
    assert math.isclose(m.loss_v2a, -math.log(p[0]), rel_tol=1e-12)
    expected = info_nce(q_v, k_a, state.dict_a.embeddings, cfg.tau)
    assert math.isclose(m.loss_v2a, expected, rel_tol=1e-12)


@pytest.mark.parametrize("sampler", ["active", "ohem", "random"])
def test_dictionary_size_stays_k(ds, sampler):
    cfg = TrainConfig(sampler=sampler, max_steps=12, **TINY)

    def check(state, _metrics):
        assert len(state.dict_v) == len(state.dict_a) == cfg.K

    run(cfg, ds, on_step=check)


def test_baseline_and_random_share_dictionary_ids(ds):
    cfg = TrainConfig(sampler="random", max_steps=20, **TINY)
    seq_a, seq_b = [], []
    run(cfg, ds, on_step=lambda s, _m: seq_a.append((s.dict_v.ids.copy(), s.dict_a.ids.copy())))
    run_baseline(cfg, ds, on_step=lambda s, _m: seq_b.append((s.dict_v.ids.copy(), s.dict_a.ids.copy())))
    assert len(seq_a) == len(seq_b) == 20
    for (va, aa), (vb, ab) in zip(seq_a, seq_b):
        assert_array_equal(va, vb)
        assert_array_equal(aa, ab)


def test_single_slot_a2v_loss_falls():
    one = generate(MiSpec(alphabet_sizes=(10,), dataset_size=1000, seed=0))
    cfg = TrainConfig(M=8, K=32, N=128, tau=0.2, warmup_steps=20, max_steps=200, epochs=2, hidden=(16,), repr_dim=8)
    h = run(cfg, one).history
    assert len(h) == 200
    assert np.mean([x.loss_a2v for x in h[-20:]]) < np.mean([x.loss_a2v for x in h[:20]])
