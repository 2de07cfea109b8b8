"""Logit averaging on hand-made members: ties, copies and shifts.

    python3 demos/ensemble_algebra.py
"""

import numpy as np

from cxrbench.ensemble import DecisionRule, combine_logits, decide

# two confident members that disagree average to a tie, which goes to positive
pair = [(2.0, 0.0), (0.0, 2.0)]
print("mean of", pair, "->", combine_logits(pair), "->", decide(combine_logits(pair)))
print("same tie under a negative tie rule ->", decide(combine_logits(pair), DecisionRule("negative")))

# copies of one member never change its decision
one = (0.3, -1.2)
for k in (1, 2, 5):
    print(f"{k} copies of {one} -> {decide(combine_logits([one] * k))}")

# adding the same constant to every logit leaves the decision alone
rng = np.random.default_rng(0)
members = rng.normal(size=(5, 2))
for c in (-10.0, 0.0, 3.5):
    print(f"shift {c:+5.1f}: mean {np.round(combine_logits(members + c), 4)} -> {decide(combine_logits(members + c))}")

# averaging logits is not the same as a majority vote
votes = [(0.0, 0.1), (0.0, 0.1), (3.0, 0.0)]
majority = sum(decide(v) == "positive" for v in votes) > len(votes) / 2
print("members:", votes)
print("majority vote:", "positive" if majority else "negative", "| logit mean:", decide(combine_logits(votes)))
