"""
False positive rates per group
==============================

Predictive equality asks that normal users in the protected group are not
flagged more often than everyone else.  We build prediction files by hand
and read the gap off the report.
"""

import numpy as np

from hatesage.evaluation import TABLE2_HEADER, fairness_report, table2_row

rng = np.random.default_rng(0)

# 128 normal and 8 hateful users in the protected group, 600 users elsewhere
labels = np.r_[np.zeros(128), np.ones(8), (rng.random(600) < 0.1)].astype(int)
groups = np.array(["AA"] * 136 + ["other"] * 600, dtype=object)

print(TABLE2_HEADER)
for fp in (26, 13, 5, 1, 0):
    scores = np.where(labels == 1, 0.8, 0.2)
    scores[:fp] = 0.9                       # flag fp protected normals
    scores[136 + np.flatnonzero(labels[136:] == 0)[:30]] = 0.7
    rep = fairness_report(scores, labels, groups, "AA")
    print(table2_row(f"{fp} false positives", rep))
