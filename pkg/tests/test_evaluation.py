import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from nothink_rerank.errors import EmptyIntersection, TooFewPairs, ZeroVariance
from nothink_rerank.evaluation import (
    EvaluationReport,
    average_ranks,
    evaluate_run,
    ndcg_at_k,
    paired_t_test,
    significance,
    wilcoxon_signed_rank,
)


def test_ndcg_examples():
    assert ndcg_at_k(["a", "b", "c"], {"a": 3, "b": 2, "c": 1}) == 1.0
    assert ndcg_at_k(["a", "b"], {"a": 0, "b": 0}) == 0.0
    assert ndcg_at_k(["a", "b"], {"a": 0, "b": 3}) == pytest.approx(0.6309, abs=5e-5)
    assert ndcg_at_k([], {"a": 1}) == 0.0
    with pytest.raises(ValueError):
        ndcg_at_k(["a"], {"a": 1}, k=0)


def test_exponential_gain():
    value = ndcg_at_k(["a", "b"], {"a": 1, "b": 2}, k=2, gain="exponential")
    ideal = 3 / 1 + 1 / math.log2(3)
    assert value == pytest.approx((1 + 3 / math.log2(3)) / ideal, abs=1e-15)


def test_evaluate_run_rules():
    qrels = {"q1": {"a": 2, "b": 0}, "q2": {"c": 1}, "q3": {"d": 1}}
    run = {"q1": ["a", "b"], "q2": ["x", "c"], "q9": ["z"]}
    per_query, mean = evaluate_run(run, qrels)
    assert set(per_query) == {"q1", "q2", "q3"}
    assert per_query["q1"] == 1.0 and per_query["q3"] == 0.0
    assert per_query["q2"] == pytest.approx(1 / math.log2(3), abs=1e-15)
    assert mean == pytest.approx(np.mean(list(per_query.values())), abs=1e-15)
    with pytest.raises(EmptyIntersection):
        evaluate_run({"zz": ["a"]}, qrels)


def test_five_random_queries_match_oracle():
    rng = random.Random(5)
    qrels, run = {}, {}
    for q in range(5):
        docs = [f"q{q}d{i}" for i in range(8)]
        qrels[f"q{q}"] = {d: rng.randint(0, 3) for d in docs}
        rng.shuffle(docs)
        run[f"q{q}"] = docs
    per_query, _ = evaluate_run(run, qrels)
    for q in qrels:
        assert per_query[q] == pytest.approx(oracles.ndcg_oracle(run[q], qrels[q], 10), abs=1e-12)


grades = st.lists(st.integers(0, 3), min_size=1, max_size=8)


@given(grades, st.integers(1, 10), st.integers(0, 5))
def test_ndcg_range_and_padding(gs, k, pad):
    docs = [f"d{i}" for i in range(len(gs))]
    judgments = dict(zip(docs, gs))
    v = ndcg_at_k(docs, judgments, k)
    assert 0.0 <= v <= 1.0 + 1e-15
    padded = docs + [f"z{i}" for i in range(pad)]
    assert ndcg_at_k(padded, {**judgments, **{f"z{i}": 0 for i in range(pad)}}, k) == pytest.approx(v, abs=1e-15)


@given(grades, st.randoms(use_true_random=False))
def test_ndcg_invariant_within_equal_grades(gs, rnd):
    docs = [f"d{i}" for i in range(len(gs))]
    judgments = dict(zip(docs, gs))
    ranking = sorted(docs, key=lambda d: -judgments[d])
    # shuffle inside each grade group
    groups = {}
    for d in ranking:
        groups.setdefault(judgments[d], []).append(d)
    shuffled = []
    for g in sorted(groups, reverse=True):
        grp = groups[g][:]
        rnd.shuffle(grp)
        shuffled += grp
    assert ndcg_at_k(shuffled, judgments, 5) == ndcg_at_k(ranking, judgments, 5)


def test_t_test_examples():
    d = [0.1, -0.2, 0.3, 0.05, -0.1]
    a = {f"q{i}": x for i, x in enumerate(d)}
    b = {f"q{i}": 0.0 for i in range(5)}
    t, p = paired_t_test(a, b)
    t_ref, p_ref = oracles.t_test_oracle(d)
    assert t == pytest.approx(t_ref, rel=1e-12) and abs(p - p_ref) < 1e-6
    rng = np.random.default_rng(0)
    a = {f"q{i}": 0.5 + 0.1 + rng.normal(0, 1e-3) for i in range(10)}
    b = {f"q{i}": 0.5 for i in range(10)}
    assert paired_t_test(a, b)[1] < 0.01
    with pytest.raises(ZeroVariance):
        paired_t_test(b, b)
    with pytest.raises(TooFewPairs):
        paired_t_test({"q": 1.0}, {"q": 0.0})


def test_wilcoxon_12_element_vector():
    d = [0.3, -0.1, 0.25, 0.4, 0.05, -0.2, 0.15, 0.35, 0.1, -0.05, 0.45, 0.2]
    a = {f"q{i}": x for i, x in enumerate(d)}
    b = {f"q{i}": 0.0 for i in range(12)}
    w, p = wilcoxon_signed_rank(a, b)
    w_ref, p_ref = oracles.wilcoxon_enumeration_oracle(d)
    assert w == w_ref and abs(p - p_ref) < 1e-6


def test_wilcoxon_tie_free_matches_scipy_exact():
    # scipy's exact table assumes untied ranks, so only compare on distinct magnitudes
    d = [0.31, -0.12, 0.25, 0.4, 0.05, -0.2, 0.15, 0.35, 0.1, -0.07, 0.45, 0.22]
    a = {f"q{i}": x for i, x in enumerate(d)}
    b = {f"q{i}": 0.0 for i in range(12)}
    w, p = wilcoxon_signed_rank(a, b)
    w_sp, p_sp = oracles.wilcoxon_scipy_oracle(d, "exact")
    assert w == w_sp and abs(p - p_sp) < 1e-6


def test_wilcoxon_drops_zeros_and_needs_six():
    a = {f"q{i}": 1.0 for i in range(10)}
    with pytest.raises(TooFewPairs):
        wilcoxon_signed_rank(a, dict(a))
    b = dict(a)
    for i in range(5):
        b[f"q{i}"] = 0.5
    with pytest.raises(TooFewPairs):
        wilcoxon_signed_rank(a, b)


def test_wilcoxon_normal_branch_matches_scipy():
    rng = np.random.default_rng(3)
    d = np.round(rng.normal(0.02, 0.1, 40), 3)
    a = {f"q{i}": x for i, x in enumerate(d)}
    b = {f"q{i}": 0.0 for i in range(40)}
    w, p = wilcoxon_signed_rank(a, b)
    w_ref, p_ref = oracles.wilcoxon_scipy_oracle(d, "approx")
    assert w == pytest.approx(w_ref) and abs(p - p_ref) < 1e-9


def test_average_ranks():
    np.testing.assert_array_equal(average_ranks([3, 1, 3, 2]), [3.5, 1, 3.5, 2])


@given(st.lists(st.floats(-1, 1, allow_nan=False).filter(lambda x: abs(x) > 1e-6), min_size=6, max_size=30))
def test_swap_symmetry(d):
    a = {f"q{i}": x for i, x in enumerate(d)}
    b = {f"q{i}": 0.0 for i in range(len(d))}
    w1, p1 = wilcoxon_signed_rank(a, b)
    w2, p2 = wilcoxon_signed_rank(b, a)
    assert w1 == w2 and p1 == pytest.approx(p2, rel=1e-12)
    assert 0 <= p1 <= 1
    try:
        t1, tp1 = paired_t_test(a, b)
    except ZeroVariance:
        return
    t2, tp2 = paired_t_test(b, a)
    assert t2 == pytest.approx(-t1) and tp2 == pytest.approx(tp1)


def test_significance_report_and_table():
    rng = np.random.default_rng(1)
    a = {f"q{i}": float(x) for i, x in enumerate(rng.uniform(0, 1, 12))}
    b = {f"q{i}": float(x) for i, x in enumerate(rng.uniform(0, 1, 12))}
    b["extra"] = 0.3
    rep = significance(a, b)
    assert rep.n == 12
    assert set(rep.to_dict()) == {"n", "t_statistic", "t_p_value", "wilcoxon_statistic", "wilcoxon_p_value"}
    table = EvaluationReport(10, 0.5, a, rep).format_table()
    assert "NDCG@10" in table and "wilcoxon" in table
