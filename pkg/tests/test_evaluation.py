import io
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import brute_ndcg, brute_precision_recall
from signrec.errors import ContractError, EmptyDatasetError
from signrec.evaluation import (
    EvalReport,
    aggregate_folds,
    evaluate,
    format_table,
    ndcg_at_k,
    precision_recall_at_k,
    write_report_csv,
)
from signrec.graph import RatingRecord, build_vocabs, make_split
from signrec.propagation import full_forward


def test_precision_recall_examples():
    assert precision_recall_at_k(["a", "b"], {"a"}, 2) == (0.5, 1.0)
    assert precision_recall_at_k([1, 2], {3}, 2) == (0.0, 0.0)
    with pytest.raises(ValueError):
        precision_recall_at_k([1], set(), 1)


def test_ndcg_examples():
    assert ndcg_at_k([7, 1, 2], {7}, 3) == 1.0
    assert ndcg_at_k([1, 7], {7}, 2) == pytest.approx(1 / math.log2(3))
    assert ndcg_at_k([1, 7], {7}, 2) == pytest.approx(0.6309, abs=1e-4)


fixture = st.tuples(
    st.lists(st.integers(0, 30), min_size=0, max_size=20, unique=True),
    st.sets(st.integers(0, 30), min_size=1, max_size=12),
    st.integers(1, 20),
)


@given(fixture)
def test_metrics_match_brute_force(case):
    recs, relevant, k = case
    recs = recs[:k]
    assert precision_recall_at_k(recs, relevant, k) == brute_precision_recall(recs, relevant, k)
    assert abs(ndcg_at_k(recs, relevant, k) - brute_ndcg(recs, relevant, k)) <= 1e-12


@given(fixture)
def test_metric_properties(case):
    recs, relevant, k = case
    n = ndcg_at_k(recs, relevant, k)
    top = recs[: min(k, len(relevant))]
    ideal = len(top) == min(k, len(relevant)) and all(i in relevant for i in top)
    assert (abs(n - 1.0) < 1e-12) == ideal
    for m in range(1, k):
        p_small, r_small = precision_recall_at_k(recs, relevant, m)
        p_big, r_big = precision_recall_at_k(recs, relevant, m + 1)
        assert r_small <= r_big
        assert p_small * m <= p_big * (m + 1) + 1e-12


def _split(user_items, delta=2.5):
    """``user_items[u] = (train [(item, rating)], test [(item, rating)])``."""
    train, test = [], []
    for u, (tr, te) in enumerate(user_items):
        train += [RatingRecord(f"u{u}", f"i{i}", r) for i, r in tr]
        test += [RatingRecord(f"u{u}", f"i{i}", r) for i, r in te]
    umap, imap = build_vocabs(train + test)
    return make_split(train, test, delta, umap, imap)


def test_perfect_model_single_user():
    split = _split([([(0, 5.0), (1, 1.0)], [(2, 5.0)])])
    g = split.train
    d = g.num_items + 1
    e0i = np.eye(g.num_items, d)
    e0u = np.zeros((1, d))
    e0u[0, split.item_map["i2"]] = 100.0
    state = full_forward(g, e0u, e0i, 1)
    # i2 is the only candidate, so the filter would remove it
    rep = evaluate(state, split, ks=(1,), filter_enabled=False)
    assert rep.per_k[1] == {"precision": 1.0, "recall": 1.0, "ndcg": 1.0}
    assert rep.users_evaluated == 1


def test_users_without_positive_test_items_are_skipped():
    split = _split([([(0, 5.0)], [(1, 5.0)]), ([(0, 4.0)], [(1, 1.0)])])
    state = full_forward(split.train, np.ones((2, 2)), np.ones((2, 2)), 1)
    rep = evaluate(state, split, ks=(1,))
    assert rep.users_evaluated == 1
    only_negative = _split([([(0, 4.0)], [(1, 1.0)])])
    with pytest.raises(EmptyDatasetError):
        evaluate(full_forward(only_negative.train, np.ones((1, 2)), np.ones((2, 2)), 1), only_negative)


def test_heldout_dislikes_are_never_hits():
    split = _split([([(0, 5.0)], [(1, 1.0), (2, 5.0)])])
    e0u = np.array([[1.0, 0.0]])
    e0i = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 1.0]])
    state = full_forward(split.train, e0u, e0i, 1)
    rep = evaluate(state, split, ks=(1,), filter_enabled=False)
    assert rep.metric("recall", 1) == 0.0


def test_random_ranking_expectation():
    rng = np.random.default_rng(5)
    n_items, k = 400, 10
    users = []
    for _ in range(30):
        items = rng.choice(n_items, 10, replace=False)
        users.append(([(int(i), 5.0) for i in items[:5]], [(int(i), 5.0) for i in items[5:]]))
    # make sure every item exists in the vocabulary
    users.append(([(i, 5.0) for i in range(n_items)], []))
    split = _split(users)
    g = split.train
    expect = np.mean([k / (n_items - len(g.user_items(u))) for u in split.test_positive])
    values = []
    for seed in range(100):
        r = np.random.default_rng(seed)
        state = full_forward(g, r.normal(size=(g.num_users, 8)), r.normal(size=(g.num_items, 8)), 2)
        values.append(evaluate(state, split, ks=(k,)).metric("recall", k))
    sem = np.std(values, ddof=1) / math.sqrt(len(values))
    assert abs(np.mean(values) - expect) < 3 * sem


def test_filter_off_report_has_same_schema():
    split = _split([([(0, 5.0)], [(1, 5.0), (2, 4.0)])] * 1 + [([(1, 5.0)], [(0, 4.0)])])
    state = full_forward(split.train, np.eye(2, 3), np.eye(3), 1)
    on = evaluate(state, split, ks=(1, 2))
    off = evaluate(state, split, ks=(1, 2), filter_enabled=False)
    assert on.per_k.keys() == off.per_k.keys()
    assert all(on.per_k[k].keys() == off.per_k[k].keys() for k in on.per_k)


def _report(values, fold=0, ks=(10, 20)):
    return EvalReport({k: dict(zip(("precision", "recall", "ndcg"), values)) for k in ks}, 5, fold)


def test_aggregate_examples():
    single = _report((0.1, 0.2, 0.3))
    assert aggregate_folds([single]).per_k == single.per_k
    two = aggregate_folds([_report((0.2, 0.2, 0.2), 0), _report((0.4, 0.4, 0.4), 1)])
    assert two.metric("recall", 10) == pytest.approx(0.3)
    assert set(two.per_fold) == {0, 1}
    with pytest.raises(ContractError):
        aggregate_folds([_report((0, 0, 0)), _report((0, 0, 0), ks=(10,))])
    with pytest.raises(ContractError):
        aggregate_folds([])


def test_aggregate_matches_naive_mean(rng):
    reps = [_report(tuple(rng.random(3)), f) for f in range(5)]
    agg = aggregate_folds(reps)
    for k in (10, 20):
        for m in ("precision", "recall", "ndcg"):
            naive = 0.0
            for r in reps:
                naive += r.per_k[k][m]
            assert agg.per_k[k][m] == pytest.approx(naive / 5, abs=1e-15)


def test_table_and_csv_shapes():
    reports = {"full": _report((0.1, 0.2, 0.3)), "w/o filter": _report((0.05, 0.1, 0.15))}
    reports["full"].secs_per_epoch = 1.5
    table = format_table(reports)
    rows = [line for line in table.splitlines() if line.split()[0].endswith(("@10", "@20"))]
    assert len(rows) == 6
    assert "Secs/Epoch" in table and "1.50" in table
    assert table.startswith("# relevance")
    buf = io.StringIO()
    write_report_csv(buf, {"full": aggregate_folds([_report((0.1, 0.2, 0.3), 0), _report((0.3, 0.2, 0.1), 1)])})
    lines = buf.getvalue().splitlines()
    assert lines[1] == "metric,K,fold,value"
    # 2 Ks x 3 metrics x (2 folds + mean)
    assert len(lines) - 2 == 18
    assert any(line.startswith("recall,10,mean,0.2") for line in lines)
