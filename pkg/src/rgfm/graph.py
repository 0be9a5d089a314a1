"""Attributed graphs in compressed sparse row form, plus file I/O, splits and perturbations."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np


class GraphFormatError(ValueError):
    """Raised when a graph file (or an in-memory edge list) is malformed."""


@dataclass(frozen=True, eq=False)
class AttributedGraph:
    """Undirected graph with dense node features.

    ``indptr``/``indices`` hold the symmetric adjacency (each undirected pair
    appears once per direction, neighbor lists sorted). ``labels`` uses -1 for
    unlabeled nodes.
    """

    num_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray | None = None
    name: str = "graph"

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] != self.num_nodes:
            raise GraphFormatError(
                f"feature matrix has {self.features.shape[0]} rows, expected {self.num_nodes}"
            )
        if self.indptr.shape != (self.num_nodes + 1,):
            raise GraphFormatError("indptr length must be num_nodes + 1")
        if self.labels is not None and self.labels.shape != (self.num_nodes,):
            raise GraphFormatError("labels must have one entry per node")

    @classmethod
    def from_edges(
        cls,
        num_nodes: int,
        edges: Iterable[tuple[int, int]] | np.ndarray,
        features: np.ndarray | None = None,
        labels: np.ndarray | None = None,
        name: str = "graph",
    ) -> "AttributedGraph":
        """Build a graph from an undirected edge list.

        Duplicates and reversed duplicates collapse to one pair; self-loops are
        dropped. Endpoints outside ``[0, num_nodes)`` raise ``GraphFormatError``.
        """
        e = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
        e = e.reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= num_nodes):
            bad = e[(e < 0).any(axis=1) | (e >= num_nodes).any(axis=1)][0]
            raise GraphFormatError(
                f"edge ({bad[0]}, {bad[1]}) has an endpoint outside [0, {num_nodes})"
            )
        e = e[e[:, 0] != e[:, 1]]
        pairs = np.unique(np.sort(e, axis=1), axis=0) if e.size else e
        src = np.concatenate([pairs[:, 0], pairs[:, 1]])
        dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
        order = np.lexsort((dst, src))
        src, dst = src[order], dst[order]
        indptr = np.zeros(num_nodes + 1, dtype=np.int64)
        np.add.at(indptr, src + 1, 1)
        indptr = np.cumsum(indptr)
        if features is None:
            features = np.zeros((num_nodes, 1))
        feats = np.ascontiguousarray(features, dtype=np.float64)
        lab = None if labels is None else np.asarray(labels, dtype=np.int64)
        return cls(num_nodes, indptr, dst.astype(np.int64), feats, lab, name)

    @property
    def num_edges(self) -> int:
        """Number of undirected edges."""
        return int(self.indices.shape[0] // 2)

    @property
    def d_in(self) -> int:
        return int(self.features.shape[1])

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u] : self.indptr[u + 1]]

    def edge_pairs(self) -> np.ndarray:
        """Undirected edges as an ``[m, 2]`` array with ``u < v``, sorted."""
        src = np.repeat(np.arange(self.num_nodes), self.degrees())
        mask = src < self.indices
        return np.stack([src[mask], self.indices[mask]], axis=1)

    def has_edge(self, u: int, v: int) -> bool:
        nb = self.neighbors(u)
        i = np.searchsorted(nb, v)
        return bool(i < nb.shape[0] and nb[i] == v)

    def replace(self, **changes) -> "AttributedGraph":
        fields = dict(
            num_nodes=self.num_nodes,
            indptr=self.indptr,
            indices=self.indices,
            features=self.features,
            labels=self.labels,
            name=self.name,
        )
        fields.update(changes)
        return AttributedGraph(**fields)

    def with_edges(self, pairs: np.ndarray) -> "AttributedGraph":
        return AttributedGraph.from_edges(
            self.num_nodes, pairs, self.features, self.labels, self.name
        )

    @property
    def num_classes(self) -> int:
        if self.labels is None or not (self.labels >= 0).any():
            return 0
        return int(self.labels.max()) + 1


@dataclass(frozen=True)
class SubgraphSample:
    """A k-hop ego subgraph; ``nodes[0]`` is the center and local ids index ``nodes``."""

    center: int
    hop: int
    nodes: np.ndarray
    edges: np.ndarray  # [m, 2] local pairs, u < v
    features: np.ndarray

    @property
    def num_nodes(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.edges.shape[0])


@dataclass(frozen=True)
class DegreeStats:
    mean: float
    std: float
    cv: float


class UndefinedCVError(ValueError):
    """Coefficient of variation requested for a graph with mean degree zero."""


@dataclass(frozen=True)
class FewShotSplit:
    support: dict[int, np.ndarray]
    query: np.ndarray
    seed: int
    val: dict[int, np.ndarray] = field(default_factory=dict)

    def support_nodes(self) -> np.ndarray:
        return np.concatenate([self.support[c] for c in sorted(self.support)])

    def val_nodes(self) -> np.ndarray:
        if not self.val:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([self.val[c] for c in sorted(self.val)])


@dataclass(frozen=True)
class LinkSplit:
    train_pos: np.ndarray
    val_pos: np.ndarray
    test_pos: np.ndarray
    val_neg: np.ndarray
    test_neg: np.ndarray
    seed: int
    train_graph: AttributedGraph


# --------------------------------------------------------------------------- I/O

def _format_float(x: float) -> str:
    return repr(float(x))


def save_graph(g: AttributedGraph, path: str | Path, labels: np.ndarray | None = None,
               num_classes: int | None = None) -> None:
    """Write ``g`` in the ``GRAPH v1`` text format.

    ``labels``/``num_classes`` override the label column; the subgraph cache
    uses this to carry global node ids.
    """
    lab = labels if labels is not None else g.labels
    if lab is None:
        lab = np.full(g.num_nodes, -1, dtype=np.int64)
    ncls = num_classes if num_classes is not None else (g.num_classes if labels is None else 0)
    pairs = g.edge_pairs()
    lines = [f"GRAPH v1 {g.num_nodes} {pairs.shape[0]} {g.d_in} {ncls}"]
    lines.extend(" ".join(_format_float(x) for x in row) for row in g.features)
    lines.extend(str(int(x)) for x in lab)
    lines.extend(f"{u} {v}" for u, v in pairs)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_graph(path: str | Path, name: str | None = None) -> AttributedGraph:
    """Parse a ``GRAPH v1`` file into a validated, symmetrized graph."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise GraphFormatError(f"{path}: empty file")
    header = lines[0].split()
    if len(header) != 6 or header[0] != "GRAPH" or header[1] != "v1":
        raise GraphFormatError(f"{path}: malformed header {lines[0]!r}")
    try:
        n, m, d, ncls = (int(x) for x in header[2:])
    except ValueError as exc:
        raise GraphFormatError(f"{path}: non-integer header field") from exc
    if min(n, m, d, ncls) < 0:
        raise GraphFormatError(f"{path}: negative header field")
    body = lines[1:]
    if len(body) < 2 * n + m:
        raise GraphFormatError(
            f"{path}: expected {n} feature rows, {n} labels and {m} edges, got {len(body)} lines"
        )
    if len(body) > 2 * n + m:
        raise GraphFormatError(f"{path}: {len(body) - 2 * n - m} trailing lines")
    try:
        feats = np.array([[float(x) for x in ln.split()] for ln in body[:n]], dtype=np.float64)
    except ValueError as exc:
        raise GraphFormatError(f"{path}: non-numeric feature value") from exc
    feats = feats.reshape(n, -1) if n else np.zeros((0, d))
    if n and feats.shape[1] != d:
        raise GraphFormatError(f"{path}: feature rows must have {d} columns")
    labels = np.array([int(x) for x in body[n : 2 * n]], dtype=np.int64)
    if ncls and ((labels >= ncls) | (labels < -1)).any():
        raise GraphFormatError(f"{path}: label outside [-1, {ncls})")
    edge_lines = body[2 * n :]
    try:
        edges = np.array([[int(x) for x in ln.split()] for ln in edge_lines], dtype=np.int64)
    except ValueError as exc:
        raise GraphFormatError(f"{path}: non-integer edge endpoint") from exc
    if edges.size and edges.shape[1] != 2:
        raise GraphFormatError(f"{path}: edge lines must have two endpoints")
    has_labels = ncls > 0 or (labels >= 0).any()
    return AttributedGraph.from_edges(
        n, edges.reshape(-1, 2), feats, labels if has_labels else None, name or path.stem
    )


def unify_features(g: AttributedGraph, d_in: int) -> AttributedGraph:
    """Truncate or zero-pad feature rows to ``d_in`` columns."""
    if g.d_in == d_in:
        return g
    out = np.zeros((g.num_nodes, d_in))
    k = min(d_in, g.d_in)
    out[:, :k] = g.features[:, :k]
    return g.replace(features=out)


# ------------------------------------------------------------------- statistics

def degree_stats(g: AttributedGraph) -> DegreeStats:
    """Mean, population std and coefficient of variation of the degree sequence."""
    if g.num_nodes < 1:
        raise ValueError("degree_stats needs at least one node")
    deg = g.degrees().astype(np.float64)
    mean = float(deg.mean())
    std = float(deg.std())
    if mean == 0.0:
        raise UndefinedCVError(f"{g.name}: every node is isolated, CV is undefined")
    return DegreeStats(mean, std, std / mean)


def bfs_distances(g: AttributedGraph, center: int, max_hop: int) -> dict[int, int]:
    dist = {center: 0}
    frontier = deque([center])
    while frontier:
        u = frontier.popleft()
        du = dist[u]
        if du == max_hop:
            continue
        for v in g.neighbors(u):
            v = int(v)
            if v not in dist:
                dist[v] = du + 1
                frontier.append(v)
    return dist


def k_hop_subgraph(g: AttributedGraph, center: int, k: int) -> SubgraphSample:
    """Induced subgraph on ``{v : dist(center, v) <= k}``, center first."""
    if not 0 <= center < g.num_nodes:
        raise IndexError(f"center {center} outside [0, {g.num_nodes})")
    if k < 0:
        raise ValueError("hop must be non-negative")
    dist = bfs_distances(g, center, k)
    nodes = np.fromiter(dist.keys(), dtype=np.int64, count=len(dist))
    # BFS order keeps the center at index 0
    local = np.full(g.num_nodes, -1, dtype=np.int64)
    local[nodes] = np.arange(nodes.shape[0])
    deg = g.degrees()[nodes]
    src = np.repeat(nodes, deg)
    dst = np.concatenate([g.neighbors(int(u)) for u in nodes]) if nodes.size else src
    ls, ld = local[src], local[dst]
    keep = (ld >= 0) & (ls < ld)
    if keep.any():
        a, b = ls[keep], ld[keep]
        order = np.lexsort((b, a))
        edges = np.stack([a[order], b[order]], axis=1)
    else:
        edges = np.zeros((0, 2), dtype=np.int64)
    return SubgraphSample(int(center), int(k), nodes, edges, g.features[nodes])


def subgraph_as_graph(s: SubgraphSample, name: str = "subgraph") -> AttributedGraph:
    return AttributedGraph.from_edges(s.num_nodes, s.edges, s.features, None, name)


# ------------------------------------------------------------------------ splits

def few_shot_split(g: AttributedGraph, shots: int, seed: int, val_shots: int = 0) -> FewShotSplit:
    """Pick ``shots`` support nodes per class; every other labeled node is a query.

    With ``val_shots > 0`` that many extra nodes per class are held out for
    model selection and excluded from the query set.
    """
    if g.labels is None:
        raise ValueError(f"{g.name}: few-shot split needs node labels")
    if shots < 1:
        raise ValueError("shots must be >= 1")
    rng = np.random.default_rng(seed)
    support: dict[int, np.ndarray] = {}
    val: dict[int, np.ndarray] = {}
    taken = []
    for c in range(g.num_classes):
        members = np.flatnonzero(g.labels == c)
        if members.shape[0] < shots + val_shots:
            raise ValueError(
                f"{g.name}: class {c} has {members.shape[0]} labeled nodes, "
                f"needs {shots + val_shots}"
            )
        perm = rng.permutation(members)
        support[c] = np.sort(perm[:shots])
        taken.append(perm[:shots])
        if val_shots:
            val[c] = np.sort(perm[shots : shots + val_shots])
            taken.append(perm[shots : shots + val_shots])
    used = np.concatenate(taken)
    labeled = np.flatnonzero(g.labels >= 0)
    query = np.setdiff1d(labeled, used)
    return FewShotSplit(support, query, seed, val)


def link_split(g: AttributedGraph, val_frac: float, test_frac: float, seed: int) -> LinkSplit:
    """Hold out positive edges for validation/test and sample as many non-edges."""
    pairs = g.edge_pairs()
    m = pairs.shape[0]
    if m == 0:
        raise ValueError(f"{g.name}: link split needs at least one edge")
    if not (0 <= val_frac and 0 <= test_frac and val_frac + test_frac < 1):
        raise ValueError("val_frac and test_frac must be >= 0 and sum below 1")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(m)
    n_test = int(np.floor(test_frac * m))
    n_val = int(np.floor(val_frac * m))
    test_pos = pairs[np.sort(perm[:n_test])]
    val_pos = pairs[np.sort(perm[n_test : n_test + n_val])]
    train_pos = pairs[np.sort(perm[n_test + n_val :])]
    neg = _sample_non_edges(g, n_val + n_test, rng)
    return LinkSplit(
        train_pos=train_pos,
        val_pos=val_pos,
        test_pos=test_pos,
        val_neg=neg[:n_val],
        test_neg=neg[n_val:],
        seed=seed,
        train_graph=g.with_edges(train_pos),
    )


def _sample_non_edges(g: AttributedGraph, count: int, rng: np.random.Generator) -> np.ndarray:
    n = g.num_nodes
    available = n * (n - 1) // 2 - g.num_edges
    if count > available:
        raise ValueError(f"{g.name}: cannot sample {count} negatives from {available} non-edges")
    seen: set[tuple[int, int]] = set()
    out = []
    while len(out) < count:
        u, v = (int(x) for x in rng.integers(0, n, size=2))
        if u == v:
            continue
        a, b = min(u, v), max(u, v)
        if (a, b) in seen or g.has_edge(a, b):
            continue
        seen.add((a, b))
        out.append((a, b))
    return np.array(out, dtype=np.int64).reshape(-1, 2)


# ----------------------------------------------------------------- perturbations

def perturb_edges(g: AttributedGraph, p: float, seed: int) -> AttributedGraph:
    """Drop ``floor(p * |E|)`` undirected edges uniformly at random."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("drop rate must lie in [0, 1]")
    n_drop = int(np.floor(p * g.num_edges))
    if n_drop == 0:
        return g
    pairs = g.edge_pairs()
    rng = np.random.default_rng(seed)
    keep = np.sort(rng.permutation(pairs.shape[0])[n_drop:])
    return g.with_edges(pairs[keep])


def perturb_features(g: AttributedGraph, r: float, seed: int) -> AttributedGraph:
    """Zero ``floor(r * num_nodes)`` whole feature rows."""
    if not 0.0 <= r <= 1.0:
        raise ValueError("mask ratio must lie in [0, 1]")
    n_mask = int(np.floor(r * g.num_nodes))
    if n_mask == 0:
        return g
    rng = np.random.default_rng(seed)
    rows = rng.permutation(g.num_nodes)[:n_mask]
    feats = g.features.copy()
    feats[rows] = 0.0
    return g.replace(features=feats)
