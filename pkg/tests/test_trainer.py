import io
import math

import numpy as np
import pytest

from oracles import dense_adjacency, rel_err, torch_lightgcn_adam_step
from signrec.config import TrainConfig
from signrec.errors import NonFiniteError
from signrec.graph import SignedBipartiteGraph, split_folds
from signrec.losses import BprBatch, EdgeBatch
from signrec.synthetic import planted_communities
from signrec.trainer import (
    PARAM_NAMES,
    ModelParams,
    adam_step,
    compute_objective,
    embed,
    fit,
    fit_fold,
    init_params,
    lr_schedule,
    read_checkpoint,
    train_epoch,
    write_checkpoint,
    xavier_bound,
)

QUIET = dict(enable_bpr_neg=False, enable_mse=False, enable_ortho=False)


def toy_graph(rng, m=10, n=10, neg=True):
    users, items = np.nonzero(rng.random((m, n)) < 0.4)
    signs = np.where(rng.random(len(users)) < 0.7, 1, -1) if neg else np.ones(len(users))
    ratings = np.where(signs > 0, rng.integers(3, 6, len(users)), rng.integers(1, 3, len(users))).astype(float)
    return SignedBipartiteGraph.from_edges(m, n, users, items, signs, ratings)


# --- init -----------------------------------------------------------------------


def test_xavier_bound_example():
    assert xavier_bound(100, 64) == pytest.approx(math.sqrt(6 / 164))


def test_init_shapes_bounds_and_determinism():
    cfg = TrainConfig(dim=8)
    a = init_params(cfg, 5, 7, np.random.default_rng(1))
    b = init_params(cfg, 5, 7, np.random.default_rng(1))
    shapes = {"e0_user": (5, 8), "e0_item": (7, 8), "w1": (16, 16), "w2": (16, 1)}
    for name in PARAM_NAMES:
        t = a.tensors[name]
        assert t.shape == shapes[name]
        assert np.abs(t).max() <= xavier_bound(*shapes[name])
        np.testing.assert_array_equal(t, b.tensors[name])
        assert a.m[name].shape == a.v[name].shape == a.grads[name].shape == t.shape
        assert not a.m[name].any() and not a.v[name].any()
    assert a.step == 0


def test_init_variance():
    cfg = TrainConfig(dim=64)
    p = init_params(cfg, 1_000_000 // 64, 1, np.random.default_rng(0))
    x = p.e0_user
    bound = xavier_bound(*x.shape)
    assert abs(x.var() / (bound**2 / 3) - 1) < 0.02


def test_init_single_precision():
    p = init_params(TrainConfig(dim=4, precision="single"), 3, 3, np.random.default_rng(0))
    assert p.e0_user.dtype == np.float32


# --- Adam ---------------------------------------------------------------------------


def _scalar_params(value=1.0):
    return ModelParams({"x": np.array([value])})


def test_adam_zero_gradient_is_noop():
    p = _scalar_params()
    adam_step(p, 0.1)
    assert p.tensors["x"][0] == 1.0
    assert p.step == 1


def test_adam_first_step_closed_form():
    p = _scalar_params()
    p.grads["x"][0] = 0.3
    adam_step(p, 0.01)
    # m_hat = g, v_hat = g^2
    assert p.tensors["x"][0] == pytest.approx(1.0 - 0.01 * 0.3 / (0.3 + 1e-8), abs=1e-15)
    assert p.grads["x"][0] == 0.0


def test_adam_constant_gradient_step_tends_to_lr():
    p = _scalar_params(0.0)
    prev = 0.0
    for _ in range(2000):
        p.grads["x"][0] = -2.5
        adam_step(p, 1e-3)
        step, prev = p.tensors["x"][0] - prev, p.tensors["x"][0]
    assert step == pytest.approx(1e-3, rel=1e-6)


def test_adam_non_finite_gradient():
    p = _scalar_params()
    p.grads["x"][0] = np.nan
    with pytest.raises(NonFiniteError):
        adam_step(p, 0.1)


# --- schedule -------------------------------------------------------------------------


def test_lr_schedule_examples():
    cfg = TrainConfig(lr=0.005, lr_milestones=(100, 150), lr_gamma=0.5)
    assert lr_schedule(cfg, 0) == 0.005
    assert lr_schedule(cfg, 120) == 0.0025
    assert lr_schedule(cfg, 160) == 0.00125
    assert lr_schedule(cfg.replace(lr_milestones=()), 199) == 0.005


# --- objective ---------------------------------------------------------------------------


def _batch(rng, g, size=16):
    idx = rng.integers(0, g.num_edges, size)
    neg = []
    for u in g.users[idx]:
        while True:
            j = int(rng.integers(0, g.num_items))
            if not g.has_edges(np.array([u]), np.array([j]))[0]:
                neg.append(j)
                break
    batch = BprBatch(g.users[idx], g.items[idx], np.array(neg), g.signs[idx])
    e = rng.integers(0, g.num_edges, size)
    return batch, EdgeBatch(g.users[e], g.items[e], g.ratings[e])


def test_total_is_sum_of_components(rng):
    g = toy_graph(rng)
    cfg = TrainConfig(dim=4, reg_weight=0.01)
    p = init_params(cfg, g.num_users, g.num_items, rng)
    losses, _ = compute_objective(g, p, cfg, *_batch(rng, g))
    parts = losses.bpr_pos + losses.bpr_neg + losses.mse + losses.ortho + cfg.reg_weight * losses.l2
    assert abs(losses.total - parts) <= 1e-12


def test_disabled_terms_are_exactly_zero_and_others_unchanged(rng):
    g = toy_graph(rng)
    cfg = TrainConfig(dim=4)
    p = init_params(cfg, g.num_users, g.num_items, rng)
    batch, edges = _batch(rng, g)
    full, _ = compute_objective(g, p, cfg, batch, edges)
    for flag, field in (("enable_bpr_neg", "bpr_neg"), ("enable_mse", "mse"), ("enable_ortho", "ortho")):
        part, _ = compute_objective(g, p, cfg.replace(**{flag: False}), batch, edges)
        assert getattr(part, field) == 0.0
        for other in ("bpr_pos", "bpr_neg", "mse", "ortho", "l2"):
            if other != field:
                assert getattr(part, other) == getattr(full, other)
    only, grads = compute_objective(g, p, cfg.replace(**QUIET), batch)
    assert only.total == only.bpr_pos + cfg.reg_weight * only.l2
    # the rating head only sees the L2 term
    np.testing.assert_array_equal(grads["w1"], cfg.reg_weight * 2 * p.tensors["w1"])


def test_full_objective_finite_differences(rng):
    g = toy_graph(rng, 6, 6)
    cfg = TrainConfig(dim=3, reg_weight=0.05, layers=2)
    p = init_params(cfg, g.num_users, g.num_items, rng)
    batch, edges = _batch(rng, g, 8)
    _, grads = compute_objective(g, p, cfg, batch, edges)
    h = 1e-4
    for name in PARAM_NAMES:
        t = p.tensors[name]
        num = np.zeros_like(t)
        for idx in np.ndindex(t.shape):
            old = t[idx]
            t[idx] = old + h
            fp = compute_objective(g, p, cfg, batch, edges)[0].total
            t[idx] = old - h
            fm = compute_objective(g, p, cfg, batch, edges)[0].total
            t[idx] = old
            num[idx] = (fp - fm) / (2 * h)
        assert rel_err(grads[name], num) < 1e-4, name


def test_lightgcn_degenerate_case_matches_torch(rng):
    g = toy_graph(rng, 8, 9, neg=False)
    cfg = TrainConfig(dim=5, layers=3, c1=1.0, reg_weight=1e-3, lr=0.01, **QUIET)
    p = init_params(cfg, g.num_users, g.num_items, rng)
    batch, _ = _batch(rng, g, 12)
    before = p.copy()
    state = embed(g, p, cfg.layers)
    _, grads = compute_objective(g, p, cfg, batch)
    for k, v in grads.items():
        p.grads[k] += v
    adam_step(p, cfg.lr)
    fu, fi, after = torch_lightgcn_adam_step(
        dense_adjacency(g, 1),
        before.e0_user,
        before.e0_item,
        {"w1": before.tensors["w1"], "w2": before.tensors["w2"]},
        (batch.users, batch.pos_items, batch.neg_items),
        cfg.layers,
        cfg.lr,
        cfg.reg_weight,
    )
    assert np.abs(state.final_pos_user - fu).max() < 1e-6
    assert np.abs(state.final_pos_item - fi).max() < 1e-6
    for name in PARAM_NAMES:
        assert np.abs(p.tensors[name] - after[name]).max() < 1e-8, name


# --- epochs and fitting -----------------------------------------------------------------


def test_lr_zero_leaves_params_bit_identical(rng):
    g = toy_graph(rng)
    cfg = TrainConfig(dim=4, batch_size=8)
    p = init_params(cfg, g.num_users, g.num_items, rng)
    before = p.copy()
    train_epoch(g, p, cfg, rng, lr=0.0)
    for name in PARAM_NAMES:
        np.testing.assert_array_equal(p.tensors[name], before.tensors[name])


def test_steps_per_epoch(rng, monkeypatch):
    import signrec.trainer as tr

    g = toy_graph(rng)
    cfg = TrainConfig(dim=4, batch_size=7)
    p = init_params(cfg, g.num_users, g.num_items, rng)
    calls = []
    real = tr.train_step
    monkeypatch.setattr(tr, "train_step", lambda *a, **k: calls.append(1) or real(*a, **k))
    train_epoch(g, p, cfg, rng)
    assert len(calls) == math.ceil(g.num_edges / 7)


def test_toy_loss_halves_in_fifty_epochs():
    rng = np.random.default_rng(2024)
    g = toy_graph(rng, 10, 10)
    cfg = TrainConfig(dim=8, batch_size=16, lr=0.01, lr_milestones=())
    p = init_params(cfg, g.num_users, g.num_items, rng)
    curve = [train_epoch(g, p, cfg, rng).total for _ in range(50)]
    assert curve[-1] <= 0.5 * curve[0]


def _planted_split(seed=0):
    recs = planted_communities(users_per_group=10, items_per_group=12, liked_per_user=6, disliked_per_user=3, disliked_pool=4, seed=seed)
    return split_folds(recs, 0.8, 2, seed=seed)


def test_epochs_zero_returns_init():
    split = _planted_split()[0]
    cfg = TrainConfig(dim=4, epochs=0)
    res = fit_fold(split, cfg)
    assert res.log == [] and res.best_epoch == -1
    ref = init_params(cfg, split.train.num_users, split.train.num_items, np.random.default_rng([cfg.seed, 0]))
    np.testing.assert_array_equal(res.best_params.e0_user, ref.e0_user)


def test_fit_is_deterministic_and_logs_every_epoch():
    splits = _planted_split()
    cfg = TrainConfig(dim=4, epochs=6, eval_every=2, batch_size=32)
    seen = []
    a = fit(splits, cfg, on_epoch=lambda fold, e: seen.append((fold, e.epoch)))
    b = fit(splits, cfg)
    assert [r.best_recall for r in a] == [r.best_recall for r in b]
    np.testing.assert_array_equal(a[1].best_params.e0_item, b[1].best_params.e0_item)
    assert seen == [(f, e) for f in (0, 1) for e in range(6)]
    for r in a:
        assert len(r.log) == 6
        assert all(e.secs > 0 for e in r.log)
        assert [e.recall is not None for e in r.log] == [False, True] * 3
        assert r.report is not None and r.report.secs_per_epoch == pytest.approx(r.secs_per_epoch)


def test_fit_keeps_best_checkpoint():
    split = _planted_split()[0]
    cfg = TrainConfig(dim=4, epochs=6, eval_every=1, batch_size=32, lr=0.05)
    res = fit_fold(split, cfg)
    recalls = [e.recall for e in res.log]
    assert res.best_recall == max(recalls)
    assert res.best_epoch == int(np.argmax(recalls))


def test_checkpoint_roundtrip(rng):
    p = init_params(TrainConfig(dim=3), 4, 5, rng)
    for name in PARAM_NAMES:
        p.m[name] += rng.normal(size=p.m[name].shape)
        p.v[name] += rng.random(p.v[name].shape)
    p.step = 17
    buf = io.BytesIO()
    write_checkpoint(buf, p, 2)
    buf.seek(0)
    q, layers = read_checkpoint(buf)
    assert layers == 2 and q.step == 17
    for name in PARAM_NAMES:
        np.testing.assert_array_equal(p.tensors[name], q.tensors[name])
        np.testing.assert_array_equal(p.m[name], q.m[name])
        np.testing.assert_array_equal(p.v[name], q.v[name])
