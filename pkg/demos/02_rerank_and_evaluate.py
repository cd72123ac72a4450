"""
Reranking a first-stage run and testing the gain
================================================

A synthetic benchmark with graded qrels, a shuffled first-stage run and a
mock backend whose fixture encodes the true grades.
"""

# %%
import random

from nothink_rerank import Candidate, Document, Query
from nothink_rerank.backend import MockBackend, fixture_from_qrels
from nothink_rerank.evaluation import evaluate_run, significance
from nothink_rerank.ranking import RerankConfig, rerank_run

rng = random.Random(0)
queries, corpus, qrels, candidates = {}, {}, {}, {}
for q in range(20):
    qid = f"q{q}"
    queries[qid] = Query(qid, f"query {q}")
    dids = [f"{qid}d{i}" for i in range(15)]
    qrels[qid] = {d: rng.randint(0, 3) for d in dids}
    corpus.update({d: Document(d, f"text of {d}") for d in dids})
    rng.shuffle(dids)
    candidates[qid] = [Candidate(qid, d, r) for r, d in enumerate(dids, 1)]

# %%
backend = MockBackend(fixture_from_qrels(qrels), latency=0.002)
result = rerank_run(candidates, queries, corpus, backend, RerankConfig(concurrency_limit=8))
print(result.metrics.summary())

# %%
first_stage = {q: [c.doc_id for c in cs] for q, cs in candidates.items()}
before, mean_before = evaluate_run(first_stage, qrels)
after, mean_after = evaluate_run(result.rankings(), qrels)
print(f"NDCG@10 first stage {mean_before:.4f} -> reranked {mean_after:.4f}")

# %%
report = significance(after, before)
print(report.to_dict())
