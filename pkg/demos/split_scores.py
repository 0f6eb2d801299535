"""
Choosing a split point from a probe profile
===========================================

Each candidate boundary gets a probe accuracy and a MAC count for the
extractor up to that point. The fused score trades off how much accuracy
the part keeps, how much it gains over the previous candidate, and how
much compute it saves against the full extractor.
"""
from microt import split

# a made-up profile: accuracy rises quickly then flattens, MACs keep growing
indices = [3, 5, 7, 9, 11]
accuracies = [0.41, 0.58, 0.66, 0.69, 0.70]
macs = [20_000, 60_000, 110_000, 180_000, 260_000]
report = split.score_candidates(indices, accuracies, macs, 0.74, 300_000)

print(f"{'index':>5} {'acc':>6} {'macs':>8} {'score':>7}")
for c in report.candidates:
    print(f"{c.index:>5} {c.accuracy:>6.2f} {c.macs:>8} {c.fused_score:>7.3f}")
print("optimal split after block", report.optimal_index)

# the score is zero whenever any of its three terms is zero
print("fused_score(0.5, 0.5, 0.5) =", split.fused_score(0.5, 0.5, 0.5))
