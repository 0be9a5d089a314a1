"""Per-center graph-of-graphs: budgeted hop count, similarity matrix, weighted edge sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .encoder import EncoderParams, encode_many
from .graph import AttributedGraph, SubgraphSample, k_hop_subgraph


class InfeasibleBudgetError(ValueError):
    """Even the 1-hop subgraph does not fit in the byte budget."""


@dataclass(frozen=True)
class CostModel:
    """Analytic stand-in for device memory: bytes held by one subgraph."""

    bytes_per_feature: float = 8.0
    bytes_per_edge: float = 16.0
    overhead: float = 0.0

    def __post_init__(self) -> None:
        if self.bytes_per_feature <= 0 or self.bytes_per_edge < 0 or self.overhead < 0:
            raise ValueError("cost model constants must be positive")

    def cost(self, num_nodes: int, num_edges: int, d_in: int) -> float:
        return num_nodes * d_in * self.bytes_per_feature + num_edges * self.bytes_per_edge + self.overhead

    def subgraph_cost(self, s: SubgraphSample) -> float:
        return self.cost(s.num_nodes, s.num_edges, s.features.shape[1])


@dataclass
class GraphOfGraphs:
    center: int
    node_embeddings: np.ndarray  # [K, d], hop order
    similarity: np.ndarray  # [K, K]
    pairs: np.ndarray  # [b_edge, 2] undirected, i < j
    edge_budget: int

    @property
    def K(self) -> int:
        return int(self.node_embeddings.shape[0])

    @property
    def edges(self) -> np.ndarray:
        """Directed edge list, both directions of every sampled pair."""
        if self.pairs.size == 0:
            return np.zeros((0, 2), dtype=np.int64)
        return np.concatenate([self.pairs, self.pairs[:, ::-1]])

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.K, self.K))
        if self.pairs.size:
            a[self.pairs[:, 0], self.pairs[:, 1]] = 1.0
            a[self.pairs[:, 1], self.pairs[:, 0]] = 1.0
        return a


def select_max_k(g: AttributedGraph, center: int, cost_model: CostModel, budget: float,
                 k_cap: int, subgraph_fn: Callable[[int], SubgraphSample] | None = None) -> int:
    """Grow K one hop at a time; return the last K whose cumulative cost fits ``budget``."""
    if budget <= 0:
        raise ValueError("budget must be positive")
    if k_cap < 1:
        raise ValueError("k_cap must be >= 1")
    fetch = subgraph_fn or (lambda k: k_hop_subgraph(g, center, k))
    total = 0.0
    best = 0
    for k in range(1, k_cap + 1):
        total += cost_model.subgraph_cost(fetch(k))
        if total > budget:
            break  # roll back to the previous K
        best = k
    if best == 0:
        raise InfeasibleBudgetError(
            f"center {center}: 1-hop subgraph costs {total:g} bytes, budget is {budget:g}"
        )
    return best


def edge_budget(k: int, ratio: float = 0.6) -> int:
    """``ceil(ratio * K(K-1)/2)``, capped at the number of pairs."""
    pairs = k * (k - 1) // 2
    # round first so 0.6 * 10 does not ceil to 7 through float error
    return min(pairs, math.ceil(round(ratio * pairs, 9)))


def similarity_matrix(x_sub: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    x = np.asarray(x_sub, dtype=np.float64)
    norms = np.sqrt((x * x).sum(axis=1))
    # an all-zero row (every feature masked) has no direction; it is similar to nothing but itself
    if np.any((np.abs(norms - 1.0) > tol) & (norms > 1e-12)):
        raise ValueError(f"similarity_matrix needs unit rows; got norms {norms}")
    s = x @ x.T
    s = 0.5 * (s + s.T)
    np.fill_diagonal(s, 1.0)
    return np.clip(s, -1.0, 1.0)


def upper_pairs(k: int) -> np.ndarray:
    i, j = np.triu_indices(k, 1)
    return np.stack([i, j], axis=1)


def edge_probabilities(s: np.ndarray) -> np.ndarray:
    """Softmax of ``S[i, j]`` over the ``K(K-1)/2`` unordered pairs ``i < j`` (row-major order)."""
    k = s.shape[0]
    if k < 2:
        raise ValueError("edge probabilities need at least two GoG nodes")
    i, j = np.triu_indices(k, 1)
    logits = s[i, j]
    w = np.exp(logits - logits.max())
    return w / w.sum()


def sample_edges(prob: np.ndarray, b_edge: int, seed: int | np.random.Generator,
                 k: int | None = None) -> np.ndarray:
    """Draw ``b_edge`` distinct pairs without replacement, renormalizing after each draw.

    Returns the sampled undirected pairs (``i < j``), sorted; ``GraphOfGraphs.edges``
    gives the symmetrized directed list.
    """
    prob = np.asarray(prob, dtype=np.float64)
    n_pairs = prob.shape[0]
    if k is None:
        k = int(round((1 + math.sqrt(1 + 8 * n_pairs)) / 2))
    if k * (k - 1) // 2 != n_pairs:
        raise ValueError(f"{n_pairs} probabilities do not match K={k}")
    if not 1 <= b_edge <= n_pairs:
        raise ValueError(f"edge budget {b_edge} outside [1, {n_pairs}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w = prob.copy()
    chosen = []
    for _ in range(b_edge):
        p = w / w.sum()
        idx = int(rng.choice(n_pairs, p=p))
        chosen.append(idx)
        w[idx] = 0.0
    pairs = upper_pairs(k)[np.sort(chosen)]
    return pairs


def center_seed(global_seed: int, center: int, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([global_seed, center, *extra]))


def gog_from_embeddings(center: int, x_sub: np.ndarray, edge_ratio: float,
                        rng: np.random.Generator) -> GraphOfGraphs:
    k = x_sub.shape[0]
    s = similarity_matrix(x_sub)
    b = edge_budget(k, edge_ratio) if k >= 2 else 0
    if b == 0:
        pairs = np.zeros((0, 2), dtype=np.int64)
    else:
        pairs = sample_edges(edge_probabilities(s), b, rng, k)
    return GraphOfGraphs(center, x_sub, s, pairs, b)


@dataclass(frozen=True)
class GoGConfig:
    k_cap: int = 5
    budget: float = 8e6
    cost_model: CostModel = CostModel()
    edge_ratio: float = 0.6
    seed: int = 0


def hop_subgraphs(g: AttributedGraph, center: int, cfg: GoGConfig,
                  fetch: Callable[[int], SubgraphSample] | None = None) -> list[SubgraphSample]:
    fetch = fetch or (lambda k: k_hop_subgraph(g, center, k))
    cache: dict[int, SubgraphSample] = {}

    def memo(k):
        if k not in cache:
            cache[k] = fetch(k)
        return cache[k]

    k = select_max_k(g, center, cfg.cost_model, cfg.budget, cfg.k_cap, memo)
    return [memo(i) for i in range(1, k + 1)]


def build_gog(g: AttributedGraph, center: int, encoder_params: EncoderParams,
              cfg: GoGConfig) -> GraphOfGraphs:
    """select K -> hop subgraphs 1..K -> encode -> similarity -> sample edges."""
    subs = hop_subgraphs(g, center, cfg)
    x_sub = encode_many(subs, encoder_params)
    return gog_from_embeddings(center, x_sub, cfg.edge_ratio, center_seed(cfg.seed, center))


# ------------------------------------------------------------------ text dump

def dump_gog(gog: GraphOfGraphs) -> str:
    lines = [f"GOG {gog.center} {gog.K} {gog.edge_budget}"]
    lines.extend(" ".join(repr(float(x)) for x in row) for row in gog.node_embeddings)
    lines.extend(f"{i} {j}" for i, j in gog.pairs)
    return "\n".join(lines) + "\n"


def parse_gog(text: str) -> GraphOfGraphs:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0].split()
    if len(head) != 4 or head[0] != "GOG":
        raise ValueError(f"malformed GoG header {lines[0]!r}")
    center, k, b = (int(x) for x in head[1:])
    emb = np.array([[float(x) for x in ln.split()] for ln in lines[1 : 1 + k]])
    pairs = np.array([[int(x) for x in ln.split()] for ln in lines[1 + k :]], dtype=np.int64)
    pairs = pairs.reshape(-1, 2)
    if pairs.shape[0] != b:
        raise ValueError(f"GoG dump lists {pairs.shape[0]} edges, header says {b}")
    return GraphOfGraphs(center, emb, similarity_matrix(emb), pairs, b)


def write_gogs(path: str | Path, gogs: Sequence[GraphOfGraphs]) -> None:
    Path(path).write_text("".join(dump_gog(g) for g in gogs), encoding="utf-8")
