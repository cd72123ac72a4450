"""
Building SFT data and scoring rollouts
======================================

Annotated (query, doc) pairs become pointwise, pairwise and listwise samples
in both think modes. The same labels then grade model rollouts.
"""

# %%
import json
import tempfile
from pathlib import Path

from nothink_rerank import Document, Query
from nothink_rerank.core import RelevanceLabel
from nothink_rerank.datagen import AnnotatedPair, CorpusSources, build_corpus
from nothink_rerank.prompting import render_pointwise
from nothink_rerank.rewards import Rollout, total_reward

cot = "The passage names the device and explains its role in the signal chain."
queries = {"q1": Query("q1", "what does a preamp do")}
docs = {f"d{i}": Document(f"d{i}", f"passage {i}") for i in range(5)}
pairs = [AnnotatedPair("q1", f"d{i}", i >= 2, i, cot) for i in range(5)]

out = Path(tempfile.mkdtemp())
manifest = build_corpus(CorpusSources(queries, docs, pairs), out)
print(json.dumps(manifest["counts"], indent=1))
# pair and list samples carry no CoT here, so their think variants land in cot_requests.jsonl
print(manifest["missing_cot"], "CoT requests")

# %%
first = json.loads((out / "pointwise.jsonl").read_text().splitlines()[0])
print(first["messages"][1]["content"])

# %%
# reward for a rollout that says yes(2) when the gold grade is 4
spec = render_pointwise(queries["q1"], docs["d4"]).spec
r = total_reward(Rollout(spec, "<think>\n\n</think>yes(2)", RelevanceLabel.from_score(4)))
print(r.to_dict())
