"""NDCG@k against graded qrels and paired significance tests between runs."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .errors import DataError, EmptyIntersection, TooFewPairs, ZeroVariance

# above this many non-zero differences the Wilcoxon p-value uses the normal approximation
WILCOXON_EXACT_MAX_N = 25


def _gain(grade: float, gain: str) -> float:
    if gain == "linear":
        return float(grade)
    if gain == "exponential":
        return 2.0 ** grade - 1.0
    raise ValueError(f"unknown gain {gain!r}")


def dcg(grades: Sequence[float], k: int, gain: str = "linear") -> float:
    return sum(_gain(g, gain) / math.log2(i + 2) for i, g in enumerate(grades[:k]))


def ndcg_at_k(ranking: Sequence[str], judgments: Mapping[str, int], k: int = 10, gain: str = "linear") -> float:
    """NDCG@k of ``ranking`` (doc ids, best first) for one query.

    Unjudged documents count as grade 0. An ideal DCG of zero gives 0.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    actual = dcg([judgments.get(d, 0) for d in ranking], k, gain)
    ideal = dcg(sorted(judgments.values(), reverse=True), k, gain)
    if ideal == 0:
        return 0.0
    return actual / ideal


def evaluate_run(
    run: Mapping[str, Sequence[str]],
    qrels: Mapping[str, Mapping[str, int]],
    k: int = 10,
    gain: str = "linear",
) -> Tuple[Dict[str, float], float]:
    """Per-query NDCG@k over every query in ``qrels`` and their unweighted mean.

    Queries missing from the run score 0; run queries without judgments are ignored.
    """
    if not set(run) & set(qrels):
        raise EmptyIntersection("no run query appears in the qrels")
    per_query = {qid: ndcg_at_k(run.get(qid, ()), qrels[qid], k, gain) for qid in qrels}
    return per_query, float(np.mean(list(per_query.values())))


def _paired(a: Mapping[str, float], b: Mapping[str, float]) -> Tuple[np.ndarray, np.ndarray]:
    common = sorted(set(a) & set(b))
    return np.array([a[q] for q in common], dtype=float), np.array([b[q] for q in common], dtype=float)


def paired_t_test(a: Mapping[str, float], b: Mapping[str, float]) -> Tuple[float, float]:
    """Two-sided paired t-test on per-query differences a - b (n - 1 dof)."""
    x, y = _paired(a, b)
    n = len(x)
    if n < 2:
        raise TooFewPairs(f"paired t-test needs >= 2 common queries, got {n}")
    d = x - y
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd <= 1e-14 * max(1.0, float(np.max(np.abs(d)))):
        raise ZeroVariance("differences have zero variance")
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * stats.t.sf(abs(t), n - 1)
    return float(t), float(min(1.0, p))


def average_ranks(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _signed_rank_sum_counts(doubled_ranks: Sequence[int]) -> np.ndarray:
    """counts[s] = number of sign assignments whose positive doubled-rank sum is s."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        shifted = counts[:total + 1 - r].copy()
        counts[r:] += shifted
    return counts


def wilcoxon_signed_rank(
    a: Mapping[str, float],
    b: Mapping[str, float],
    min_pairs: int = 6,
) -> Tuple[float, float]:
    """Wilcoxon signed-rank test on per-query differences a - b.

    Zero differences are dropped and tied magnitudes share average ranks.
    Returns W = min(W+, W-) and a two-sided p-value: exact (conditional on the
    observed ranks) for n <= 25, otherwise the normal approximation with tie
    and continuity corrections.
    """
    x, y = _paired(a, b)
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n < min_pairs:
        raise TooFewPairs(f"Wilcoxon test needs >= {min_pairs} non-zero differences, got {n}")
    ranks = average_ranks(np.abs(d))
    r_plus = float(ranks[d > 0].sum())
    r_minus = float(ranks[d < 0].sum())
    w = min(r_plus, r_minus)

    if n <= WILCOXON_EXACT_MAX_N:
        doubled = [int(round(2 * r)) for r in ranks]
        counts = _signed_rank_sum_counts(doubled)
        target = int(round(2 * r_plus))
        total = 2.0 ** n
        p_low = counts[:target + 1].sum() / total
        p_high = counts[target:].sum() / total
        p = min(1.0, 2.0 * min(p_low, p_high))
        return w, float(p)

    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes ** 3 - tie_sizes)) / 48.0
    diff = r_plus - mean
    correction = 0.5 * np.sign(diff)
    z = (diff - correction) / math.sqrt(var)
    p = 2.0 * stats.norm.sf(abs(z))
    return w, float(min(1.0, p))


@dataclass(frozen=True)
class SignificanceReport:
    n: int
    t_statistic: float
    t_p_value: float
    wilcoxon_statistic: float
    wilcoxon_p_value: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def significance(a: Mapping[str, float], b: Mapping[str, float], min_pairs: int = 6) -> SignificanceReport:
    n = len(set(a) & set(b))
    t, tp = paired_t_test(a, b)
    w, wp = wilcoxon_signed_rank(a, b, min_pairs)
    return SignificanceReport(n, t, tp, w, wp)


@dataclass
class EvaluationReport:
    k: int
    mean_ndcg: float
    per_query: Dict[str, float]
    significance: Optional[SignificanceReport] = None

    def to_dict(self) -> Dict:
        return {
            "k": self.k,
            "mean_ndcg": self.mean_ndcg,
            "per_query": dict(self.per_query),
            "significance": self.significance.to_dict() if self.significance else None,
        }

    def format_table(self) -> str:
        width = max([len("query")] + [len(q) for q in self.per_query])
        lines = [f"{'query':<{width}}  NDCG@{self.k}", "-" * (width + 10)]
        lines += [f"{q:<{width}}  {v:.4f}" for q, v in sorted(self.per_query.items())]
        lines.append(f"{'mean':<{width}}  {self.mean_ndcg:.4f}")
        if self.significance is not None:
            s = self.significance
            lines += [
                "",
                f"paired t-test   n={s.n}  t={s.t_statistic:.4f}  p={s.t_p_value:.3g}",
                f"wilcoxon        n={s.n}  W={s.wilcoxon_statistic:.1f}  p={s.wilcoxon_p_value:.3g}",
            ]
        return "\n".join(lines)
