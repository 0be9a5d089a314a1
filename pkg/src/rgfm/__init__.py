"""Adaptive-hop graph-of-graphs pretraining with a mixture of constant-curvature experts."""

from .graph import AttributedGraph, SubgraphSample, k_hop_subgraph, load_graph, save_graph
from .gog import GraphOfGraphs, build_gog, select_max_k
from .manifolds import Manifold, exp0, log0
from .moe import RiemannMoE, RoutingState, candidate_set, heterogeneity_score
from .pipeline import RunConfig, eval_link, eval_node, robustness_sweep, run_pretrain, run_stage2

__version__ = "0.1.0"
