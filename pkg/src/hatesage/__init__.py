"""Hateful-user detection on directed social graphs.

GraphSAGE (mean, max-pool and attention aggregators) trained with a small
reverse-mode differentiation engine, feature-only baselines, and group
fairness evaluation under predictive equality.
"""

from .graph import (
    DirectedGraph,
    NodeSchema,
    NodeTable,
    compute_network_features,
    degree_stats,
    from_edges,
    load_edge_list,
    load_node_table,
    load_store,
    neighbors,
    save_store,
)
from .models import ModelConfig, ModelParams, init_params, lr_forward, mlp_forward, sage_forward
from .samplers import RngStream, SampledBlock, diffusion_scores, durw_sample, sample_neighbors, select_candidates
from .training import TrainHyper, class_weight, stratified_kfold, train, weighted_bce_loss
from .evaluation import auc, confusion, error_cohort_stats, fairness_report, prf

__version__ = "0.1.0"
