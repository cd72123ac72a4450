"""
Scoring one document from token logprobs
========================================

A no-think pointwise prompt asks for ``yes(3)``-style answers. The reranking
score fuses the yes/no probability with the expected 0-4 grade.
"""

# %%
import math

from nothink_rerank import Document, Query
from nothink_rerank.backend import FixtureEntry, MockBackend
from nothink_rerank.prompting import render_pointwise
from nothink_rerank.scoring import score_result

query = Query("q1", "how do stereo preamplifiers work")
doc = Document("d1", "A preamplifier boosts a weak signal to line level before the power amp.")
prompt = render_pointwise(query, doc)
print(prompt.text)

# %%
# The mock backend replays fixed distributions, so we can see the arithmetic.
backend = MockBackend({("q1", "d1"): FixtureEntry(0.9, (0.1, 0.1, 0.2, 0.3, 0.3))})
result = backend.complete(prompt)
print(repr(result.text))

# %%
scores = score_result(result)
print(f"p_bi={scores.p_bi:.4f}  s_fg={scores.s_fg:.4f}  fused={scores.fused:.4f}")

# expected grade by hand: sum(i * p_i) / 4
by_hand = sum(i * p for i, p in enumerate((0.1, 0.1, 0.2, 0.3, 0.3))) / 4
print(math.isclose(scores.s_fg, by_hand), math.isclose(scores.fused, 0.5 * 0.9 + 0.5 * by_hand))
