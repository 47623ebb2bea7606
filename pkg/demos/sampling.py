"""
Crawling and diffusion
======================

A directed-unbiased random walk only learns a node's in-edges after it has
been there, and jumps to a random node with probability w / (w + degree).
With w = 0 on an undirected path it visits nodes in proportion to degree.
"""

import numpy as np

from hatesage.samplers import RngStream, diffusion_scores, durw_sample, select_candidates
from hatesage.synthetic import path_graph

g = path_graph(5)
walk = durw_sample(g, start=0, jump_weight=0.0, budget=5, rng=RngStream(1), steps=200_000)
print("visit share", np.round(walk.visits / walk.visits.sum(), 3))
print("degree share", np.array([1, 2, 2, 2, 1]) / 8)

# %%
# Diffusion spreads seed scores along edges; alpha = 0 leaves them as is.
seed = np.array([1.0, 0, 0, 0, 0])
for alpha in (0.0, 0.5, 0.85):
    print(alpha, np.round(diffusion_scores(g, seed, alpha, iterations=20), 3))

# %%
# Stratified picks: one node from each score quartile.
scores = diffusion_scores(g, seed, 0.85)
print("candidates", select_candidates(scores, strata=4, per_stratum=1, rng=RngStream(2)))
