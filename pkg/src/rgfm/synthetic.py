"""Stochastic-block graphs with class-conditioned Gaussian features, for desk-scale corpora."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .graph import AttributedGraph, save_graph


def sbm_graph(n: int, num_classes: int, avg_degree: float, homophily: float, d: int,
              signal: float = 1.0, seed: int = 0, name: str = "sbm",
              degree_skew: float = 0.0) -> AttributedGraph:
    """Planted-partition graph.

    ``homophily`` is the expected fraction of edges joining same-class nodes.
    ``degree_skew > 0`` scales edge propensities by lognormal node weights, which
    raises the degree CV. Features are ``signal * mean[label] + N(0, I)``.
    """
    if not 0.0 <= homophily <= 1.0:
        raise ValueError("homophily must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = np.sort(rng.integers(0, num_classes, size=n))
    i, j = np.triu_indices(n, 1)
    same = labels[i] == labels[j]
    n_same, n_diff = same.sum(), (~same).sum()
    m = n * avg_degree / 2.0
    p = np.where(same, homophily * m / max(n_same, 1), (1 - homophily) * m / max(n_diff, 1))
    if degree_skew > 0:
        w = rng.lognormal(0.0, degree_skew, size=n)
        w /= w.mean()
        p = p * w[i] * w[j]
    keep = rng.random(p.shape[0]) < np.minimum(p, 1.0)
    edges = np.stack([i[keep], j[keep]], axis=1)
    means = rng.normal(size=(num_classes, d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    feats = signal * means[labels] + rng.normal(size=(n, d))
    return AttributedGraph.from_edges(n, edges, feats, labels, name)


def make_corpus(root: str | Path, seed: int = 0, n: int = 300, d: int = 16) -> dict[str, Path]:
    """Two source graphs (homophilous, heterophilous) and one held-out target."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    graphs = {
        "source_homo": sbm_graph(n, 4, 4.0, 0.85, d, 1.0, seed + 1, "source_homo"),
        "source_hetero": sbm_graph(n, 4, 6.0, 0.2, d, 1.0, seed + 2, "source_hetero", degree_skew=0.8),
        "target": sbm_graph(n, 3, 3.0, 0.9, d, 0.6, seed + 3, "target"),
    }
    paths = {}
    for key, g in graphs.items():
        paths[key] = root / f"{key}.graph"
        save_graph(g, paths[key])
    return paths
