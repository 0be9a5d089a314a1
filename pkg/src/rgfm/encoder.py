"""Stage-1 subgraph encoder: GraphCL-style views, frequency-adaptive propagation, NT-Xent pretraining."""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .graph import AttributedGraph, SubgraphSample, k_hop_subgraph, load_graph, save_graph
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AugmentConfig:
    node_drop_ratio: float = 0.2
    edge_perturb_ratio: float = 0.2
    attr_mask_ratio: float = 0.2
    seed: int = 0
    sample_ratios: bool = False  # draw each ratio from U[0, 0.3] instead

    def __post_init__(self) -> None:
        for name in ("node_drop_ratio", "edge_perturb_ratio", "attr_mask_ratio"):
            r = getattr(self, name)
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"{name}={r} outside [0, 1]")


def augment(s: SubgraphSample, cfg: AugmentConfig) -> SubgraphSample:
    """Node dropping, then edge perturbation, then attribute masking.

    The center (local index 0) is never dropped. Edge perturbation removes
    ``floor(r * |E|)`` edges and adds as many random non-edges.
    """
    if s.num_nodes == 0:
        raise ValueError("cannot augment an empty subgraph")
    rng = np.random.default_rng(cfg.seed)
    r_node, r_edge, r_attr = cfg.node_drop_ratio, cfg.edge_perturb_ratio, cfg.attr_mask_ratio
    if cfg.sample_ratios:
        r_node, r_edge, r_attr = rng.uniform(0.0, 0.3, size=3)

    n = s.num_nodes
    n_drop = int(np.floor(r_node * (n - 1)))
    keep = np.ones(n, dtype=bool)
    if n_drop:
        keep[1 + rng.permutation(n - 1)[:n_drop]] = False
    remap = np.full(n, -1, dtype=np.int64)
    remap[keep] = np.arange(keep.sum())
    edges = s.edges
    if edges.size:
        ok = keep[edges[:, 0]] & keep[edges[:, 1]]
        edges = remap[edges[ok]]
    nodes = s.nodes[keep]
    feats = s.features[keep].copy()
    n = nodes.shape[0]

    n_pert = int(np.floor(r_edge * edges.shape[0]))
    if n_pert:
        edges = edges[np.sort(rng.permutation(edges.shape[0])[n_pert:])]
        existing = {(int(a), int(b)) for a, b in edges}
        free = n * (n - 1) // 2 - len(existing)
        added = []
        for _ in range(min(n_pert, free)):
            while True:
                a, b = (int(x) for x in rng.integers(0, n, size=2))
                a, b = min(a, b), max(a, b)
                if a != b and (a, b) not in existing:
                    existing.add((a, b))
                    added.append((a, b))
                    break
        if added:
            edges = np.concatenate([edges, np.array(added, dtype=np.int64)])
        order = np.lexsort((edges[:, 1], edges[:, 0]))
        edges = edges[order]

    n_mask = int(np.floor(r_attr * n))
    if n_mask:
        feats[rng.permutation(n)[:n_mask]] = 0.0
    return SubgraphSample(s.center, s.hop, nodes, edges.reshape(-1, 2), feats)


@dataclass
class EncoderParams:
    """Input projection plus one ``[d, 2]`` gate per layer (columns: self, neighbor)."""

    w_in: Tensor
    gates: list[Tensor]
    eps: float = 0.3
    dropout: float = 0.2

    @property
    def d_in(self) -> int:
        return self.w_in.shape[0]

    @property
    def d(self) -> int:
        return self.w_in.shape[1]

    @property
    def layers(self) -> int:
        return len(self.gates)

    @classmethod
    def init(cls, d_in: int, d: int = 64, layers: int = 2, eps: float = 0.3,
             dropout: float = 0.2, seed: int = 0) -> "EncoderParams":
        if layers < 1:
            raise ValueError("encoder needs at least one layer")
        rng = np.random.default_rng(seed)
        bound = np.sqrt(6.0 / (d_in + d))
        w_in = Tensor(rng.uniform(-bound, bound, size=(d_in, d)), requires_grad=True)
        gates = [Tensor(rng.normal(0.0, 0.1, size=(d, 2)), requires_grad=True) for _ in range(layers)]
        return cls(w_in, gates, eps, dropout)

    def named(self) -> dict[str, Tensor]:
        out = {"encoder/w_in": self.w_in}
        out.update({f"encoder/gate{i}": g for i, g in enumerate(self.gates)})
        return out

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {k: t.data.copy() for k, t in self.named().items()}
        out["encoder/eps"] = np.array([[self.eps]])
        out["encoder/dropout"] = np.array([[self.dropout]])
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "EncoderParams":
        layers = sum(1 for k in arrays if k.startswith("encoder/gate"))
        return cls(
            Tensor(arrays["encoder/w_in"], requires_grad=True),
            [Tensor(arrays[f"encoder/gate{i}"], requires_grad=True) for i in range(layers)],
            float(arrays["encoder/eps"][0, 0]),
            float(arrays["encoder/dropout"][0, 0]),
        )


@dataclass(frozen=True)
class SubgraphBatch:
    """Block-diagonal union of subgraphs."""

    features: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    norm: np.ndarray  # [E, 1] 1/sqrt(deg_u deg_v)
    pool: sp.csr_matrix  # [B, N] row-mean operator
    sizes: np.ndarray


def collate(subgraphs: Sequence[SubgraphSample]) -> SubgraphBatch:
    sizes = np.array([s.num_nodes for s in subgraphs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    feats = np.concatenate([s.features for s in subgraphs], axis=0)
    und = [s.edges + off for s, off in zip(subgraphs, offsets) if s.num_edges]
    pairs = np.concatenate(und) if und else np.zeros((0, 2), dtype=np.int64)
    src = np.concatenate([pairs[:, 0], pairs[:, 1]])
    dst = np.concatenate([pairs[:, 1], pairs[:, 0]])
    n = int(sizes.sum())
    deg = np.bincount(src, minlength=n).astype(np.float64)
    norm = (1.0 / np.sqrt(deg[src] * deg[dst]))[:, None] if src.size else np.zeros((0, 1))
    rows = np.repeat(np.arange(len(subgraphs)), sizes)
    pool = sp.csr_matrix((1.0 / sizes[rows], (rows, np.arange(n))), shape=(len(subgraphs), n))
    return SubgraphBatch(feats, src, dst, norm, pool, sizes)


def encode_batch(batch: SubgraphBatch, params: EncoderParams, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
    """Embeddings ``[B, d]`` with unit rows.

    Layer rule: ``h_u <- eps * h0_u + sum_v tanh(g_self.h_u + g_nbr.h_v) / sqrt(d_u d_v) * h_v``,
    followed by mean pooling and L2 normalization.
    """
    if batch.features.shape[1] != params.d_in:
        raise T.ShapeError(
            f"subgraph features have {batch.features.shape[1]} columns, encoder expects {params.d_in}"
        )
    h0 = T.matmul(Tensor(batch.features), params.w_in)
    if training and params.dropout > 0:
        h0 = T.dropout(h0, params.dropout, rng or np.random.default_rng(0))
    res = T.scale(h0, params.eps)
    h = h0
    norm = Tensor(batch.norm)
    for gate in params.gates:
        if batch.src.size == 0:
            h = res
            continue
        scores = T.matmul(h, gate)
        a_self = T.gather_rows(T.take_cols(scores, [0]), batch.src)
        a_nbr = T.gather_rows(T.take_cols(scores, [1]), batch.dst)
        alpha = T.tanh(T.add(a_self, a_nbr))
        coef = T.mul(alpha, norm)
        h = T.add(res, T.edge_propagate(h, coef, batch.src, batch.dst))
    return T.row_normalize(T.spmm(batch.pool, h))


def encode_subgraph(s: SubgraphSample, params: EncoderParams) -> np.ndarray:
    with T.no_grad():
        return encode_batch(collate([s]), params).data.copy()


def edge_gates(s: SubgraphSample, params: EncoderParams) -> list[np.ndarray]:
    """Per-layer ``alpha`` values on the directed edges of ``s`` (diagnostics and tests)."""
    batch = collate([s])
    out = []
    with T.no_grad():
        h0 = T.matmul(Tensor(batch.features), params.w_in)
        res = T.scale(h0, params.eps)
        h = h0
        for gate in params.gates:
            scores = h.data @ gate.data
            alpha = np.tanh(scores[batch.src, 0] + scores[batch.dst, 1])
            out.append(alpha)
            coef = Tensor((alpha * batch.norm[:, 0])[:, None])
            h = T.add(res, T.edge_propagate(h, coef, batch.src, batch.dst))
    return out


def encode_many(subgraphs: Sequence[SubgraphSample], params: EncoderParams,
                batch_size: int = 128, threads: int = 1) -> np.ndarray:
    """Frozen-parameter embeddings for many subgraphs, in input order."""
    chunks = [subgraphs[i : i + batch_size] for i in range(0, len(subgraphs), batch_size)]

    def run(chunk):
        with T.no_grad():
            return encode_batch(collate(chunk), params).data

    if not chunks:
        return np.zeros((0, params.d))
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts, axis=0)


# --------------------------------------------------------------------- training

@dataclass(frozen=True)
class Stage1Config:
    d: int = 64
    layers: int = 2
    eps: float = 0.3
    dropout: float = 0.2
    epochs: int = 100
    lr: float = 5e-3
    weight_decay: float = 2e-6
    batch_size: int = 128
    tau: float = 0.2
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0


@dataclass
class Stage1Result:
    params: EncoderParams
    batch_losses: list[float]
    probe_losses: list[float]  # index 0 is before any update


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    out = [perm[i : i + size] for i in range(0, n, size)]
    if len(out) > 1 and out[-1].shape[0] < 2:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def _views(corpus, idx, aug: AugmentConfig, seeds: np.ndarray):
    v1 = [augment(corpus[i], replace(aug, seed=int(s))) for i, s in zip(idx, seeds[:, 0])]
    v2 = [augment(corpus[i], replace(aug, seed=int(s))) for i, s in zip(idx, seeds[:, 1])]
    return v1, v2


def contrastive_loss(corpus, idx, params: EncoderParams, aug: AugmentConfig, seeds: np.ndarray,
                     tau: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    v1, v2 = _views(corpus, idx, aug, seeds)
    z1 = encode_batch(collate(v1), params, training, rng)
    z2 = encode_batch(collate(v2), params, training, rng)
    return T.nt_xent_loss(z1, z2, tau)


def probe_loss(corpus: Sequence[SubgraphSample], params: EncoderParams, cfg: Stage1Config) -> float:
    """Deterministic monitoring loss: fixed view seeds, no dropout, first batch of the corpus."""
    idx = np.arange(min(len(corpus), cfg.batch_size))
    seeds = np.stack([2 * idx + 1, 2 * idx + 2], axis=1) + 7919 * cfg.augment.seed
    with T.no_grad():
        return contrastive_loss(corpus, idx, params, cfg.augment, seeds, cfg.tau, False).item()


def pretrain_stage1(corpus: Sequence[SubgraphSample], d_in: int, cfg: Stage1Config,
                    params: EncoderParams | None = None) -> Stage1Result:
    """Train the encoder with NT-Xent over two augmented views per subgraph."""
    if len(corpus) == 0:
        raise ValueError("empty pretraining corpus")
    if len(corpus) < 2:
        raise ValueError("NT-Xent pretraining needs at least two subgraphs")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = EncoderParams.init(d_in, cfg.d, cfg.layers, cfg.eps, cfg.dropout,
                                    seed=int(rng.integers(2**31)))
    opt = T.Adam(params.named(), cfg.lr, cfg.weight_decay)
    batch_losses: list[float] = []
    probes = [probe_loss(corpus, params, cfg)]
    for epoch in range(cfg.epochs):
        for idx in _batches(len(corpus), cfg.batch_size, rng):
            seeds = rng.integers(0, 2**31, size=(idx.shape[0], 2))
            loss = contrastive_loss(corpus, idx, params, cfg.augment, seeds, cfg.tau, True, rng)
            grads = T.backward(loss, opt.params.values())
            opt.step(grads)
            batch_losses.append(loss.item())
        probes.append(probe_loss(corpus, params, cfg))
        log.debug("stage1 epoch %d probe loss %.5f", epoch, probes[-1])
    return Stage1Result(params, batch_losses, probes)


# ------------------------------------------------------------------ subgraph cache

class SubgraphCache:
    """One ``GRAPH v1`` file per (center, hop) under a directory keyed by (graph, K, seed).

    Global node ids travel in the label column; the header's class count is
    the parent graph's node count so the ids validate on load.
    """

    def __init__(self, root: str | Path, graph_name: str, k: int, seed: int):
        key = hashlib.sha1(f"{graph_name}|{k}|{seed}".encode()).hexdigest()[:16]
        self.dir = Path(root) / f"{graph_name}-{key}"
        self.dir.mkdir(parents=True, exist_ok=True)

    def path(self, center: int, hop: int) -> Path:
        return self.dir / f"c{center}_h{hop}.graph"

    def get(self, g: AttributedGraph, center: int, hop: int) -> SubgraphSample:
        p = self.path(center, hop)
        if p.exists():
            cached = load_graph(p)
            return SubgraphSample(center, hop, cached.labels.copy(), cached.edge_pairs(), cached.features)
        s = k_hop_subgraph(g, center, hop)
        local = AttributedGraph.from_edges(s.num_nodes, s.edges, s.features)
        save_graph(local, p, labels=s.nodes, num_classes=g.num_nodes)
        return s
