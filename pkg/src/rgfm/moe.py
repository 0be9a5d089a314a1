"""Mixture of constant-curvature experts over graph-of-graphs, with confidence-driven Top-m routing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import tensor as T
from .gog import GraphOfGraphs
from .manifolds import Manifold, clip_tangent_t, exp0_t, log0_t, project_t
from .tensor import Tensor

MAX_EXPERTS = 9  # 0, -1, +1, ..., -4, +4


def curvature_list(size: int) -> list[float]:
    """``[0, -1, +1, -2, +2, ...]`` truncated to ``size`` entries."""
    out = []
    for i in range(size):
        mag = (i + 1) // 2
        out.append(float(-mag if i % 2 == 1 else mag))
    return out


def heterogeneity_score(cv_history: Sequence[float], c_norm: float = 2.0, eps_s: float = 1e-3) -> float:
    """``clamp((mean + population std) / c_norm, eps_s, 1)`` of the CV history."""
    h = np.asarray(cv_history, dtype=np.float64)
    if h.size == 0:
        raise ValueError("heterogeneity score needs at least one CV value")
    raw = (h.mean() + h.std()) / c_norm
    return float(min(1.0, max(eps_s, raw)))


def candidate_size(score: float, zeta: float, max_size: int = MAX_EXPERTS) -> int:
    return int(min(max_size, max(1, math.ceil(round(score * zeta, 9)))))


def candidate_set(score: float, zeta: float, max_size: int = MAX_EXPERTS) -> list[float]:
    if zeta < 1:
        raise ValueError("zeta must be >= 1")
    return curvature_list(candidate_size(score, zeta, max_size))


# ---------------------------------------------------------------- parameters

def _glorot(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    bound = np.sqrt(6.0 / (rows + cols))
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


@dataclass
class RouterParams:
    w1: Tensor  # [d, d_r]
    w2: Tensor  # [d_r, psi]

    @classmethod
    def init(cls, d: int, psi: int, hidden: int = 32, seed: int = 0) -> "RouterParams":
        rng = np.random.default_rng(seed)
        return cls(_glorot(rng, d, hidden), _glorot(rng, hidden, psi))

    @classmethod
    def zeros(cls, d: int, psi: int, hidden: int = 32) -> "RouterParams":
        return cls(Tensor(np.zeros((d, hidden)), True), Tensor(np.zeros((hidden, psi)), True))


@dataclass
class ExpertParams:
    curvature: float
    weight: Tensor  # [d, d'], tangent space

    @property
    def manifold(self) -> Manifold:
        return Manifold(self.curvature)


@dataclass
class RoutingState:
    cv_history: list[float]
    score: float
    zeta: float
    curvatures: list[float]
    router: RouterParams
    tau: float = 1.0
    m_float: float = 1.0
    m_start: int = 1
    usage: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self) -> None:
        if self.router.w2.shape[1] != len(self.curvatures):
            raise ValueError("router width must equal the number of experts")

    @property
    def psi(self) -> int:
        return len(self.curvatures)

    @property
    def m_effective(self) -> int:
        return int(min(self.m_start, max(1, math.ceil(round(self.m_float, 12)))))

    @classmethod
    def from_history(cls, cv_history: Sequence[float], d: int, zeta: float = 5.0, tau: float = 1.0,
                     hidden: int = 32, seed: int = 0) -> "RoutingState":
        score = heterogeneity_score(cv_history)
        curv = candidate_set(score, zeta)
        psi = len(curv)
        return cls(list(cv_history), score, zeta, curv, RouterParams.init(d, psi, hidden, seed),
                   tau, float(psi), psi, np.full(psi, 1.0 / psi))


def update_m(state: RoutingState, conf: float) -> RoutingState:
    """``m <- max(1, m - conf)`` on the real-valued count."""
    if not 0.0 <= conf <= 1.0:
        raise ValueError(f"confidence {conf} outside [0, 1]")
    return replace(state, m_float=max(1.0, state.m_float - conf))


# --------------------------------------------------------------- batched graphs

@dataclass(frozen=True)
class GoGBatch:
    features: np.ndarray  # [N, d]
    gcn: sp.csr_matrix  # D^-1/2 (A + I) D^-1/2, block diagonal
    agg: sp.csr_matrix  # gcn with rows rescaled to sum 1
    pool: sp.csr_matrix  # [C, N] per-GoG mean
    owner: np.ndarray  # [N] GoG index of each row
    offsets: np.ndarray
    sizes: np.ndarray


def gcn_norm(adj: np.ndarray) -> np.ndarray:
    a = adj + np.eye(adj.shape[0])
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return a * dinv[:, None] * dinv[None, :]


def collate_gogs(gogs: Sequence[GraphOfGraphs]) -> GoGBatch:
    sizes = np.array([g.K for g in gogs], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    blocks = [gcn_norm(g.adjacency()) for g in gogs]
    gcn = sp.block_diag(blocks, format="csr")
    rowsum = np.asarray(gcn.sum(axis=1)).ravel()
    agg = sp.diags(1.0 / rowsum) @ gcn
    n = int(sizes.sum())
    owner = np.repeat(np.arange(len(gogs)), sizes)
    pool = sp.csr_matrix((1.0 / sizes[owner], (owner, np.arange(n))), shape=(len(gogs), n))
    feats = np.concatenate([g.node_embeddings for g in gogs], axis=0)
    return GoGBatch(feats, gcn.tocsr(), sp.csr_matrix(agg), pool, owner, offsets, sizes)


# --------------------------------------------------------------------- router

def router_logits_t(x: Tensor, gcn, router: RouterParams) -> Tensor:
    h = T.relu(T.spmm(gcn, T.matmul(x, router.w1)))
    return T.spmm(gcn, T.matmul(h, router.w2))


def route_t(x: Tensor, gcn, router: RouterParams, tau: float) -> Tensor:
    return T.softmax_rows(T.scale(router_logits_t(x, gcn, router), 1.0 / tau))


def route(gog: GraphOfGraphs, state: RoutingState) -> np.ndarray:
    """Routing matrix ``[K, psi]`` with softmax rows."""
    with T.no_grad():
        a = route_t(Tensor(gog.node_embeddings), gcn_norm(gog.adjacency()), state.router, state.tau)
    return a.data


def confidence(alpha: np.ndarray) -> float:
    """Mean over GoG nodes of the largest routing weight."""
    return float(np.asarray(alpha).max(axis=1).mean())


def load_balance_loss(alpha: np.ndarray) -> float:
    a = np.asarray(alpha)
    u = a.mean(axis=0)
    return float(((u - 1.0 / a.shape[1]) ** 2).sum())


def load_balance_loss_t(alpha: Tensor) -> Tensor:
    psi = alpha.shape[1]
    diff = T.sub(T.mean_pool(alpha), np.full((1, psi), 1.0 / psi))
    return T.sum_all(T.mul(diff, diff))


# -------------------------------------------------------------------- experts

def expert_forward_t(x: Tensor, agg, manifold: Manifold, weight: Tensor) -> Tensor:
    """Lift, aggregate through the origin tangent space, rectify chart coordinates, unlift.

    With ``k = 0`` every map is the identity and this is ``relu(agg @ x @ W)``.
    """
    u = clip_tangent_t(manifold, T.matmul(x, weight))
    p = project_t(manifold, exp0_t(manifold, u))
    a = project_t(manifold, exp0_t(manifold, T.spmm(agg, log0_t(manifold, p))))
    return log0_t(manifold, project_t(manifold, T.relu(a)))


def flat_layer(x: np.ndarray, agg: np.ndarray, weight: np.ndarray) -> np.ndarray:
    return np.maximum(agg @ x @ weight, 0.0)


def aggregation_matrix(gog: GraphOfGraphs) -> np.ndarray:
    a = gcn_norm(gog.adjacency())
    return a / a.sum(axis=1, keepdims=True)


def expert_forward(gog: GraphOfGraphs, expert: ExpertParams) -> np.ndarray:
    with T.no_grad():
        out = expert_forward_t(Tensor(gog.node_embeddings), aggregation_matrix(gog),
                               expert.manifold, expert.weight)
    return out.data


# --------------------------------------------------------------------- fusion

def shortlist(alpha_bar: np.ndarray, m: int) -> np.ndarray:
    """Indices of the ``m`` largest entries; ties go to the lower index."""
    order = np.argsort(-np.asarray(alpha_bar), kind="stable")
    return np.sort(order[:m])


def topm_weights(alpha_bar: np.ndarray, m: int) -> np.ndarray:
    if m < 1:
        raise ValueError("m must be >= 1")
    a = np.asarray(alpha_bar, dtype=np.float64)
    w = np.zeros_like(a)
    keep = shortlist(a, min(m, a.shape[0]))
    w[keep] = a[keep]
    return w / w.sum()


def topm_fuse(alpha: np.ndarray, expert_outputs: Sequence[np.ndarray | None], m: int) -> np.ndarray:
    """Fuse expert outputs with node-mean routing weights masked to the Top-m and renormalized."""
    alpha = np.asarray(alpha)
    if m < 1:
        raise ValueError("m must be >= 1")
    if m > alpha.shape[1]:
        raise ValueError(f"m={m} exceeds the {alpha.shape[1]} available experts")
    w = topm_weights(alpha.mean(axis=0), m)
    out = None
    for j in np.flatnonzero(w):
        h = expert_outputs[j]
        if h is None:
            raise ValueError(f"expert {j} is shortlisted but has no output")
        out = w[j] * h if out is None else out + w[j] * h
    return out


def fuse_center_embedding(fused: np.ndarray) -> np.ndarray:
    v = np.asarray(fused).mean(axis=0, keepdims=True)
    return v / np.linalg.norm(v)


# ------------------------------------------------------------------ the model

@dataclass
class MoEOutput:
    center: Tensor  # [C, d'] unit rows
    alpha: Tensor  # [N, psi]
    load_balance: Tensor
    conf: float
    expert_calls: np.ndarray  # experts evaluated per GoG


class RiemannMoE:
    def __init__(self, state: RoutingState, experts: list[ExpertParams]):
        if len(experts) != state.psi:
            raise ValueError("one expert per candidate curvature")
        self.state = state
        self.experts = experts

    @classmethod
    def init(cls, state: RoutingState, d: int, d_out: int | None = None, seed: int = 0) -> "RiemannMoE":
        rng = np.random.default_rng(seed)
        d_out = d_out or d
        experts = [ExpertParams(k, _glorot(rng, d, d_out)) for k in state.curvatures]
        return cls(state, experts)

    def named(self) -> dict[str, Tensor]:
        out = {"moe/router_w1": self.state.router.w1, "moe/router_w2": self.state.router.w2}
        out.update({f"moe/expert{j}": e.weight for j, e in enumerate(self.experts)})
        return out

    def forward(self, gogs: Sequence[GraphOfGraphs], m: int | None = None) -> MoEOutput:
        st = self.state
        m = st.m_effective if m is None else m
        if not 1 <= m <= st.m_start:
            raise ValueError(f"active expert count {m} outside [1, {st.m_start}]")
        b = collate_gogs(gogs)
        x = Tensor(b.features)
        alpha = route_t(x, b.gcn, st.router, st.tau)
        alpha_bar = T.spmm(b.pool, alpha)
        mask = np.zeros(alpha_bar.shape)
        for c in range(len(gogs)):
            mask[c, shortlist(alpha_bar.data[c], m)] = 1.0
        masked = T.mul(alpha_bar, mask)
        w = T.div(masked, T.sum_rows(masked))
        fused = None
        calls = mask.sum(axis=1)
        for j in np.flatnonzero(mask.any(axis=0)):
            rows = np.flatnonzero(mask[b.owner, j] > 0)
            sub_agg = b.agg[rows][:, rows]
            h = expert_forward_t(Tensor(b.features[rows]), sub_agg, self.experts[j].manifold,
                                 self.experts[j].weight)
            wj = T.gather_rows(T.take_cols(w, [j]), b.owner[rows])
            place = sp.csr_matrix((np.ones(rows.shape[0]), (rows, np.arange(rows.shape[0]))),
                                  shape=(b.features.shape[0], rows.shape[0]))
            part = T.spmm(place, T.mul(h, wj))
            fused = part if fused is None else T.add(fused, part)
        center = T.row_normalize(T.spmm(b.pool, fused))
        return MoEOutput(center, alpha, load_balance_loss_t(alpha), confidence(alpha.data), calls)

    def to_arrays(self) -> dict[str, np.ndarray]:
        st = self.state
        out = {k: t.data.copy() for k, t in self.named().items()}
        out["moe/curvatures"] = np.array([st.curvatures], dtype=np.float64)
        out["moe/cv_history"] = np.array([st.cv_history], dtype=np.float64)
        out["moe/scalars"] = np.array([[st.score, st.zeta, st.tau, st.m_float, st.m_start]])
        out["moe/usage"] = np.asarray(st.usage, dtype=np.float64).reshape(1, -1)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "RiemannMoE":
        curv = [float(x) for x in arrays["moe/curvatures"].ravel()]
        score, zeta, tau, m_float, m_start = (float(x) for x in arrays["moe/scalars"].ravel())
        router = RouterParams(Tensor(arrays["moe/router_w1"], True), Tensor(arrays["moe/router_w2"], True))
        state = RoutingState(
            [float(x) for x in arrays["moe/cv_history"].ravel()], score, zeta, curv, router,
            tau, m_float, int(m_start), arrays["moe/usage"].ravel().copy(),
        )
        experts = [ExpertParams(k, Tensor(arrays[f"moe/expert{j}"], True)) for j, k in enumerate(curv)]
        return cls(state, experts)


def write_routing_trace(path: str | Path, rows: Sequence[dict]) -> None:
    """CSV ``epoch,conf,m_effective,usage_0..usage_{psi-1}``."""
    if not rows:
        Path(path).write_text("epoch,conf,m_effective\n", encoding="utf-8")
        return
    psi = len(rows[0]["usage"])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "conf", "m_effective"] + [f"usage_{j}" for j in range(psi)])
        for r in rows:
            w.writerow([r["epoch"], repr(r["conf"]), r["m_effective"]] + [repr(float(u)) for u in r["usage"]])
