"""Acceptance suite: one group of tests per criterion, summarized as PASS/FAIL lines."""

import math
import os
import random
import time

import numpy as np
import pytest

import oracles
from conftest import make_benchmark
from nothink_rerank import cli
from nothink_rerank.backend import GenerationResult, MockBackend, TokenLogprob, fixture_from_qrels
from nothink_rerank.core import (
    Document,
    LabelGranularity,
    ListOrder,
    PairPreference,
    Query,
    RelevanceLabel,
    TaskParadigm,
    ThinkMode,
)
from nothink_rerank.datagen import AnnotatedPair, CorpusSources, SamplingConfig, build_corpus, filter_finegrained
from nothink_rerank.errors import TooFewPairs, ZeroVariance
from nothink_rerank.evaluation import evaluate_run, ndcg_at_k, paired_t_test, wilcoxon_signed_rank
from nothink_rerank.prompting import render_listwise, render_pairwise, render_pointwise, render_sft_sample
from nothink_rerank.ranking import RerankConfig, rerank_run
from nothink_rerank.rewards import Rollout, total_reward
from nothink_rerank.scoring import extract_p_bi, extract_s_fg, fuse, locate_answer_tokens, score_result

FUSION = "fusion math matches brute-force oracle (1000 configs, 1e-9; shift 1e-12; < 5 s)"
FALLBACK = "missing 'no' or all digits gives exactly 0.5 with fallback flag"
E2E = "oracle mock reranking of 50x20 benchmark gives mean NDCG@10 = 1.0 (< 30 s)"
NDCG = "NDCG@k equals exhaustive oracle on 200 instances (1e-12); (0,3) -> 0.6309"
SIGNIF = "t-test and Wilcoxon match statistics oracle on 20 vectors (1e-6)"
REWARDS = "gold self-reward grid = 1.0; yes(2) vs 4 -> 0.875; total 1.2083 at lambda 0.5"
DATA = "filter equals brute force on 10k records; x2x2 expansion; seeded byte-determinism"
CONC = "100 prompts at limit 8 and 10 ms within 3x of ideal; peak <= limit; qph within 1%"
GOLDEN = "pointwise fine-grained no-think prompt and response reproduce byte-for-byte"
LIVE = "live endpoint rerank of 10x20 run has fallback_rate < 0.2 (optional)"


def _gen(yes_alts, digit_alts, answer="yes", digit="2"):
    tokens = [
        TokenLogprob("<think>", 0.0, (("<think>", 0.0),)),
        TokenLogprob("\n\n", 0.0, (("\n\n", 0.0),)),
        TokenLogprob("</think>", 0.0, (("</think>", 0.0),)),
        TokenLogprob(answer, 0.0, yes_alts),
        TokenLogprob("(", 0.0, (("(", 0.0),)),
        TokenLogprob(digit, 0.0, digit_alts),
        TokenLogprob(")", 0.0, ((")", 0.0),)),
    ]
    return GenerationResult("".join(t.token_text for t in tokens), tuple(tokens))


def _random_config(rng):
    l_yes, l_no = rng.uniform(-30, 0), rng.uniform(-30, 0)
    present = [d for d in range(5) if rng.random() < 0.8] or [rng.randrange(5)]
    digits = {d: rng.uniform(-30, 0) for d in present}
    filler = [(f"tok{i}", rng.uniform(-40, 0)) for i in range(rng.randint(0, 10))]
    yes_alts = [("yes", l_yes), ("no", l_no)] + filler
    digit_alts = [(str(d), lp) for d, lp in digits.items()] + filler
    return l_yes, l_no, digits, yes_alts, digit_alts


def _score(result):
    pos = locate_answer_tokens(result)
    p, _ = extract_p_bi(result, pos)
    s, _ = extract_s_fg(result, pos)
    return p, s, fuse(p, s)


# -- fusion ---------------------------------------------------------------------


@pytest.mark.criterion(FUSION)
def test_fusion_matches_oracle_on_1000_configs():
    rng = random.Random(20240611)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        l_yes, l_no, digits, yes_alts, digit_alts = _random_config(rng)
        got = _score(_gen(yes_alts, digit_alts))
        want = oracles.fusion_oracle(l_yes, l_no, digits)
        worst = max(worst, max(abs(g - w) for g, w in zip(got, want)))
    elapsed = time.perf_counter() - start
    assert worst <= 1e-9, worst
    assert elapsed < 5.0, elapsed


@pytest.mark.criterion(FUSION)
def test_fusion_shift_invariance():
    rng = random.Random(7)
    worst = 0.0
    for _ in range(1000):
        _, _, _, yes_alts, digit_alts = _random_config(rng)
        c1, c2 = rng.uniform(-50, 50), rng.uniform(-50, 50)
        base = _score(_gen(yes_alts, digit_alts))
        shifted = _score(_gen([(t, lp + c1) for t, lp in yes_alts], [(t, lp + c2) for t, lp in digit_alts]))
        worst = max(worst, max(abs(a - b) for a, b in zip(base, shifted)))
    assert worst <= 1e-12, worst


# -- fallback -------------------------------------------------------------------


@pytest.mark.criterion(FALLBACK)
def test_missing_no_gives_neutral_binary():
    digit_alts = [(str(d), math.log(p)) for d, p in enumerate((0.1, 0.1, 0.2, 0.3, 0.3))]
    fs = score_result(_gen([("yes", math.log(0.9)), ("maybe", -3.0)], digit_alts))
    assert fs.p_bi == 0.5 and fs.used_binary_fallback
    assert not fs.used_finegrained_fallback
    assert fs.s_fg == pytest.approx(0.65, abs=1e-12)


@pytest.mark.criterion(FALLBACK)
def test_missing_all_digits_gives_neutral_finegrained():
    fs = score_result(_gen([("yes", math.log(0.9)), ("no", math.log(0.1))], [("a", -0.1), ("b", -2.0)], digit="a"))
    assert fs.s_fg == 0.5 and fs.used_finegrained_fallback
    assert not fs.used_binary_fallback
    assert fs.p_bi == pytest.approx(0.9, abs=1e-12)


@pytest.mark.criterion(FALLBACK)
def test_missing_both_gives_neutral_fused():
    fs = score_result(_gen([("yes", -0.1)], [("x", -0.1)], digit="x"))
    assert (fs.p_bi, fs.s_fg, fs.fused) == (0.5, 0.5, 0.5)
    assert fs.used_binary_fallback and fs.used_finegrained_fallback


# -- end to end -----------------------------------------------------------------


@pytest.mark.criterion(E2E)
def test_oracle_reranking_reaches_perfect_ndcg():
    start = time.perf_counter()
    queries, corpus, qrels, candidates = make_benchmark(50, 20, seed=11)
    backend = MockBackend(fixture_from_qrels(qrels))
    result = rerank_run(candidates, queries, corpus, backend, RerankConfig(concurrency_limit=16))
    _, mean = evaluate_run(result.rankings(), qrels, k=10)
    elapsed = time.perf_counter() - start
    assert mean == 1.0
    for qid, cands in candidates.items():
        assert sorted(result.rankings()[qid]) == sorted(c.doc_id for c in cands)
    assert not result.failures
    assert elapsed < 30.0


# -- NDCG -----------------------------------------------------------------------


@pytest.mark.criterion(NDCG)
def test_ndcg_matches_exhaustive_oracle():
    rng = random.Random(99)
    for _ in range(200):
        n = rng.randint(1, 8)
        docs = [f"d{i}" for i in range(n)]
        judgments = {d: rng.randint(0, 3) for d in docs}
        ranking = docs[:]
        rng.shuffle(ranking)
        ranking = ranking[: rng.randint(1, n)] + [f"u{i}" for i in range(rng.randint(0, 2))]
        k = rng.randint(1, 10)
        assert abs(ndcg_at_k(ranking, judgments, k) - oracles.ndcg_oracle(ranking, judgments, k)) <= 1e-12


@pytest.mark.criterion(NDCG)
def test_ndcg_worked_example():
    value = ndcg_at_k(["a", "b"], {"a": 0, "b": 3}, k=10)
    assert round(value, 4) == 0.6309
    assert value == pytest.approx((3 / math.log2(3)) / 3, abs=1e-15)


# -- significance ---------------------------------------------------------------

# sizes cover the exact branch (with and without ties) and the normal branch
_VECTOR_SPECS = [
    (5, False), (6, False), (7, True), (8, False), (9, True), (10, False), (11, True), (12, False),
    (12, True), (13, False), (14, True), (15, False), (16, True), (18, False), (20, True),
    (30, False), (40, True), (60, False), (80, True), (120, False),
]


def _fixed_vectors():
    rng = np.random.default_rng(2024)
    out = []
    for n, ties in _VECTOR_SPECS:
        if ties:
            d = rng.choice([-0.2, -0.1, -0.05, 0.05, 0.1, 0.15, 0.3], size=n)
        else:
            d = np.round(rng.normal(0.05, 0.1, size=n), 6)
        out.append(d)
    out[0] = np.array([0.1, -0.2, 0.3, 0.05, -0.1])
    return out


def _as_runs(d):
    a = {f"q{i}": 0.5 + x for i, x in enumerate(d)}
    b = {f"q{i}": 0.5 for i in range(len(d))}
    return a, b


@pytest.mark.criterion(SIGNIF)
@pytest.mark.parametrize("index", range(20))
def test_significance_matches_oracles(index):
    d = _fixed_vectors()[index]
    a, b = _as_runs(d)
    diffs = np.array([a[q] - b[q] for q in sorted(a)])  # the differences as the library sees them
    t, p = paired_t_test(a, b)
    t_ref, p_ref = oracles.t_test_oracle(diffs)
    assert t == pytest.approx(t_ref, rel=1e-9)
    assert abs(p - p_ref) <= 1e-6
    nonzero = int(np.count_nonzero(diffs))
    if nonzero < 6:
        with pytest.raises(TooFewPairs):
            wilcoxon_signed_rank(a, b)
        return
    w, wp = wilcoxon_signed_rank(a, b)
    if nonzero <= 20:
        w_ref, wp_ref = oracles.wilcoxon_enumeration_oracle(diffs)
    else:
        w_ref, wp_ref = oracles.wilcoxon_scipy_oracle(diffs, "approx")
    assert w == pytest.approx(w_ref, abs=1e-9)
    assert abs(wp - wp_ref) <= 1e-6


@pytest.mark.criterion(SIGNIF)
def test_significance_swap_and_zero_variance():
    for d in _fixed_vectors()[1:]:
        a, b = _as_runs(d)
        t_ab, p_ab = paired_t_test(a, b)
        t_ba, p_ba = paired_t_test(b, a)
        assert t_ba == pytest.approx(-t_ab, rel=1e-12) and p_ba == pytest.approx(p_ab, rel=1e-12)
        w_ab, wp_ab = wilcoxon_signed_rank(a, b)
        w_ba, wp_ba = wilcoxon_signed_rank(b, a)
        assert w_ab == w_ba and wp_ab == pytest.approx(wp_ba, rel=1e-12)
    same = {f"q{i}": 0.3 + 0.01 * i for i in range(10)}
    with pytest.raises(ZeroVariance):
        paired_t_test(same, dict(same))
    with pytest.raises(TooFewPairs):
        wilcoxon_signed_rank(same, dict(same))


# -- rewards --------------------------------------------------------------------

_COT = "The query asks about one topic and the document addresses it directly, so relevance is clear."


def _gold_grid():
    q = Query("q1", "what is a stereo preamplifier?")
    d = [Document(f"d{i}", f"document {i}") for i in range(1, 4)]
    for mode in ThinkMode:
        for gran in LabelGranularity:
            fine = gran is LabelGranularity.FINE_GRAINED
            yield render_pointwise(q, d[0], gran, mode), RelevanceLabel.from_score(3) if fine else RelevanceLabel(True)
            yield render_pairwise(q, d[0], d[1], gran, mode), PairPreference(2, (1, 4) if fine else None)
            yield render_listwise(q, d, gran, mode), ListOrder((2, 3, 1), (0, 4, 2) if fine else None)


@pytest.mark.criterion(REWARDS)
def test_gold_self_reward_grid():
    seen = set()
    for prompt, label in _gold_grid():
        cot = _COT if prompt.spec.mode is ThinkMode.THINK else None
        sample = render_sft_sample(prompt, label, cot)
        r = total_reward(Rollout(prompt.spec, sample.response, label))
        assert (r.r_content, r.r_format) == (1.0, 1.0), (prompt.spec, sample.response, r)
        assert r.r_total == 1.5
        seen.add(prompt.spec)
    assert len(seen) == 12


@pytest.mark.criterion(REWARDS)
def test_reward_worked_examples():
    q, d = Query("q1", "query"), Document("d1", "doc")
    prompt = render_pointwise(q, d, LabelGranularity.FINE_GRAINED, ThinkMode.NO_THINK)
    gold = RelevanceLabel.from_score(4)
    r = total_reward(Rollout(prompt.spec, "<think>\n\n</think>yes(2)", gold), lam=0.5)
    assert r.r_content == 0.875
    untagged = total_reward(Rollout(prompt.spec, "yes(2)", gold), lam=0.5)
    assert untagged.r_content == 0.875 and untagged.r_format == pytest.approx(2 / 3, abs=1e-15)
    assert untagged.r_total == 0.875 + 0.5 * untagged.r_format
    assert untagged.r_total == pytest.approx(1.2083333333333333, abs=1e-12)


# -- data pipeline --------------------------------------------------------------


def _synthetic_records(n, seed):
    rng = random.Random(seed)
    records = []
    for i in range(n):
        rec = {"query_id": f"q{rng.randrange(500)}", "doc_id": f"d{i}", "is_positive_source": rng.random() < 0.5}
        roll = rng.random()
        if roll < 0.02:
            rec["annotated_score"] = 7  # out of range
        elif roll < 0.04:
            rec.pop("doc_id")
        else:
            rec["annotated_score"] = rng.randint(0, 4)
        records.append(rec)
    return records


@pytest.mark.criterion(DATA)
def test_filter_equals_brute_force_on_10k():
    records = _synthetic_records(10_000, 5)
    kept, stats = filter_finegrained(records)
    assert {(p.query_id, p.doc_id) for p in kept} == oracles.refilter(records)
    assert stats.kept + stats.malformed + sum(stats.rejected.values()) == len(records)


def _pipeline_sources(n_queries=6):
    queries = {f"q{i}": Query(f"q{i}", f"query number {i} " + "word " * i) for i in range(n_queries)}
    corpus, pairs, cot = {}, [], {}
    for i in range(n_queries):
        for j, (pos, score) in enumerate([(True, 4), (True, 3), (True, 2), (False, 1), (False, 0), (False, 0), (True, 4)]):
            did = f"q{i}d{j}"
            corpus[did] = Document(did, f"passage {did}")
            pairs.append(AnnotatedPair(f"q{i}", did, pos, score, f"Reasoning for {did} explains the grade in enough words."))
    return CorpusSources(queries, corpus, pairs, cot)


@pytest.mark.criterion(DATA)
def test_expansion_counts_follow_x2x2(tmp_path):
    queries = {"q": Query("q", "query")}
    corpus = {f"d{i}": Document(f"d{i}", "text") for i in range(10)}
    pairs = [AnnotatedPair("q", f"d{i}", i % 2 == 0, 3 if i % 2 == 0 else 0, "A chain of thought long enough to count.") for i in range(10)]
    manifest = build_corpus(CorpusSources(queries, corpus, pairs), tmp_path, paradigms=[TaskParadigm.POINTWISE])
    assert manifest["files"]["pointwise.jsonl"] == 40
    assert manifest["total"] == 40
    assert set(manifest["counts"].values()) == {10}
    assert len(manifest["counts"]) == 4


@pytest.mark.criterion(DATA)
def test_fixed_seed_is_byte_deterministic(tmp_path):
    config = SamplingConfig(rng_seed=42)
    a, b = tmp_path / "a", tmp_path / "b"
    build_corpus(_pipeline_sources(), a, config)
    build_corpus(_pipeline_sources(), b, config)
    names = sorted(p.name for p in a.iterdir())
    assert names == sorted(p.name for p in b.iterdir())
    assert "listwise.jsonl" in names and "pairwise.jsonl" in names
    for name in names:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


# -- concurrency ----------------------------------------------------------------


@pytest.mark.criterion(CONC)
def test_batch_wall_time_peak_and_throughput():
    queries, corpus, qrels, candidates = make_benchmark(10, 10, seed=4)
    backend = MockBackend(fixture_from_qrels(qrels), latency=0.010)
    config = RerankConfig(concurrency_limit=8)
    start = time.perf_counter()
    result = rerank_run(candidates, queries, corpus, backend, config)
    wall = time.perf_counter() - start
    ideal = math.ceil(100 / 8) * 0.010
    assert backend.calls == 100
    assert wall <= 3 * ideal, (wall, ideal)
    assert backend.peak_in_flight <= 8
    external_qph = 10 / (wall / 3600)
    assert abs(result.metrics.queries_per_hour - external_qph) / external_qph < 0.01
    assert result.metrics.queries_per_hour == pytest.approx(10 / (result.metrics.wall_time / 3600), rel=1e-12)


# -- golden ---------------------------------------------------------------------

_GOLDEN_PROMPT = (
    "<Instruct>: Please judge the relevance strength between the query and the document, and directly output "
    "the relevance judgment (yes or no), followed by the relevance score in parentheses, e.g., yes(score) or no(score).\n"
    "<Query>: what is a stereo preamplifier?\n"
    "<Doc>: Amplifiers are essential components in any sound system, boosting the audio signal to drive "
    "loudspeakers and produce audible sound.\n"
    "/no think"
)


@pytest.mark.criterion(GOLDEN)
def test_golden_pointwise_prompt_and_response():
    q = Query("q", "what is a stereo preamplifier?")
    d = Document("d", "Amplifiers are essential components in any sound system, boosting the audio signal to drive loudspeakers and produce audible sound.")
    prompt = render_pointwise(q, d, LabelGranularity.FINE_GRAINED, ThinkMode.NO_THINK)
    assert prompt.text.encode() == _GOLDEN_PROMPT.encode()
    sample = render_sft_sample(prompt, RelevanceLabel(False, 1))
    assert sample.response.encode() == b"<think>\n\n</think>no(1)"


# -- live -----------------------------------------------------------------------


@pytest.mark.live
@pytest.mark.criterion(LIVE)
def test_live_endpoint(tmp_path):
    endpoint = os.environ.get("NOTHINK_LIVE_ENDPOINT")
    if not endpoint:
        pytest.skip("set NOTHINK_LIVE_ENDPOINT (and optionally NOTHINK_LIVE_MODEL) to run")
    from nothink_rerank.trec import RunRow, read_run, write_jsonl, write_run

    topics = ["solar panels", "python decorators", "coffee brewing", "marathon training", "volcano eruptions",
              "tax deductions", "bread baking", "black holes", "guitar tuning", "vaccines"]
    queries, docs, rows = [], [], []
    for i, topic in enumerate(topics):
        queries.append({"id": f"q{i}", "text": f"how do {topic} work?"})
        for j in range(20):
            other = topics[(i + j) % len(topics)]
            did = f"q{i}d{j}"
            docs.append({"id": did, "text": f"This passage explains {other} in some detail."})
            rows.append(RunRow(f"q{i}", did, j + 1, float(20 - j), "first"))
    write_jsonl(queries, tmp_path / "queries.jsonl")
    write_jsonl(docs, tmp_path / "corpus.jsonl")
    write_run(rows, tmp_path / "run.txt")
    argv = ["rerank", "--run", str(tmp_path / "run.txt"), "--queries", str(tmp_path / "queries.jsonl"),
            "--corpus", str(tmp_path / "corpus.jsonl"), "--out", str(tmp_path / "out.txt"), "--endpoint", endpoint]
    if os.environ.get("NOTHINK_LIVE_MODEL"):
        argv += ["--model", os.environ["NOTHINK_LIVE_MODEL"]]
    assert cli.main(argv) == 0
    out = read_run(tmp_path / "out.txt")
    assert len(out) == 10 and all(len(v) == 20 for v in out.values())
    import json

    summary = json.loads((tmp_path / "out.txt.metrics.jsonl").read_text().strip().splitlines()[-1])["summary"]
    assert summary["fallback_rate"] < 0.2
