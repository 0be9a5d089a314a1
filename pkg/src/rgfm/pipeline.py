"""Two-stage pretraining over source graphs, few-shot transfer evaluation and robustness sweeps."""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .encoder import AugmentConfig, EncoderParams, Stage1Config, SubgraphCache, augment, encode_many, pretrain_stage1
from .gog import CostModel, GoGConfig, GraphOfGraphs, center_seed, gog_from_embeddings, hop_subgraphs
from .graph import (AttributedGraph, SubgraphSample, degree_stats, few_shot_split, link_split, load_graph,
                    perturb_edges, perturb_features, unify_features)
from .metrics import accuracy, auc_roc, mean_std
from .moe import RiemannMoE, RoutingState, candidate_size, heterogeneity_score, update_m
from .tensor import Tensor, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    sources: list[str] = field(default_factory=list)
    target: str = ""
    d_in: int = 16
    d: int = 64
    k_cap: int = 5
    budget: float = 8e6
    edge_ratio: float = 0.6
    zeta: float = 5.0
    tau: float = 0.2
    router_tau: float = 1.0
    router_hidden: int = 32
    stage1_epochs: int = 100
    stage1_lr: float = 5e-3
    stage1_wd: float = 2e-6
    stage2_epochs: int = 50
    stage2_lr: float = 1e-2
    stage2_wd: float = 2e-6
    lb_weight: float = 0.01
    batch_size: int = 128
    layers: int = 2
    dropout: float = 0.2
    shots: int = 5
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    task: str = "node"
    seed: int = 0
    centers_per_graph: int = 64
    views: int = 4
    head_steps: int = 200
    head_lr: float = 1e-2
    link_val_frac: float = 0.05
    link_test_frac: float = 0.1
    threads: int = 1
    cache_dir: str | None = None

    def validate(self, need_target: bool = False) -> None:
        if not self.sources:
            raise ConfigError("at least one source graph is required")
        for p in self.sources:
            if not os.path.isfile(p):
                raise ConfigError(f"source graph {p!r} does not exist")
        if need_target and not os.path.isfile(self.target):
            raise ConfigError(f"target graph {self.target!r} does not exist")
        if self.target and any(os.path.abspath(p) == os.path.abspath(self.target) for p in self.sources):
            raise ConfigError("the target graph must not be one of the sources")
        if self.task not in ("node", "link"):
            raise ConfigError(f"task must be 'node' or 'link', got {self.task!r}")
        checks = [
            (self.d_in >= 1, "d_in >= 1"), (self.d >= 1, "d >= 1"), (self.k_cap >= 1, "k_cap >= 1"),
            (self.budget > 0, "budget > 0"), (0 <= self.edge_ratio <= 1, "edge_ratio in [0, 1]"),
            (self.zeta >= 1, "zeta >= 1"), (self.tau > 0, "tau > 0"), (self.router_tau > 0, "router_tau > 0"),
            (self.batch_size >= 2, "batch_size >= 2"), (self.shots >= 1, "shots >= 1"),
            (len(self.seeds) >= 1, "at least one seed"), (self.centers_per_graph >= 1, "centers_per_graph >= 1"),
            (self.views >= 2, "views >= 2"), (self.stage1_epochs >= 0 and self.stage2_epochs >= 0, "epochs >= 0"),
            (self.threads >= 1, "threads >= 1"),
        ]
        for ok, what in checks:
            if not ok:
                raise ConfigError(f"invalid config: need {what}")

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**raw)

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2), encoding="utf-8")

    def gog_config(self) -> GoGConfig:
        return GoGConfig(self.k_cap, self.budget, CostModel(), self.edge_ratio, self.seed)

    def stage1_config(self) -> Stage1Config:
        return Stage1Config(
            d=self.d, layers=self.layers, dropout=self.dropout, epochs=self.stage1_epochs, lr=self.stage1_lr,
            weight_decay=self.stage1_wd, batch_size=self.batch_size, tau=self.tau,
            augment=AugmentConfig(seed=self.seed), seed=self.seed,
        )


@dataclass
class RunReport:
    task: str
    metric: str
    per_seed: list[float]
    mean: float
    std: float
    wall_clock: float
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, task: str, metric: str, values: Sequence[float], wall: float, **extra) -> "RunReport":
        m, s = mean_std(values)
        return cls(task, metric, [float(v) for v in values], m, s, wall, extra)

    def to_json(self) -> dict:
        return asdict(self)

    def to_table(self) -> str:
        rows = [("seed", self.metric)] + [(str(i), f"{v:.4f}") for i, v in enumerate(self.per_seed)]
        rows.append(("mean", f"{self.mean:.4f}"))
        rows.append(("std", f"{self.std:.4f}"))
        w = max(len(r[0]) for r in rows)
        return "\n".join(f"{a:<{w}}  {b:>8}" for a, b in rows)


# ------------------------------------------------------------------ data access

def _load_source(path: str, d_in: int) -> AttributedGraph:
    return unify_features(load_graph(path), d_in)


def pick_centers(g: AttributedGraph, count: int, seed: int, index: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7, index]))
    n = min(count, g.num_nodes)
    return np.sort(rng.choice(g.num_nodes, size=n, replace=False))


def _fetcher(g: AttributedGraph, center: int, cache: SubgraphCache | None):
    if cache is None:
        return None
    return lambda k: cache.get(g, center, k)


def collect_hops(g: AttributedGraph, centers: Sequence[int], cfg: RunConfig,
                 cache: SubgraphCache | None = None) -> list[list[SubgraphSample]]:
    gcfg = cfg.gog_config()
    return [hop_subgraphs(g, int(c), gcfg, _fetcher(g, int(c), cache)) for c in centers]


def _cache_for(cfg: RunConfig, g: AttributedGraph) -> SubgraphCache | None:
    if not cfg.cache_dir:
        return None
    return SubgraphCache(cfg.cache_dir, g.name, cfg.k_cap, cfg.seed)


def source_hops(cfg: RunConfig) -> tuple[list[AttributedGraph], list[list[list[SubgraphSample]]]]:
    graphs, hops = [], []
    for i, path in enumerate(cfg.sources):
        g = _load_source(path, cfg.d_in)
        centers = pick_centers(g, cfg.centers_per_graph, cfg.seed, i)
        graphs.append(g)
        hops.append(collect_hops(g, centers, cfg, _cache_for(cfg, g)))
    return graphs, hops


def cv_trace(graphs: Sequence[AttributedGraph], zeta: float) -> list[dict]:
    """Heterogeneity score and candidate count after each source is appended."""
    history, out = [], []
    for g in graphs:
        history.append(degree_stats(g).cv)
        s = heterogeneity_score(history)
        out.append({"dataset": g.name, "cv": history[-1], "score": s, "psi": candidate_size(s, zeta)})
    return out


def _meta(cfg: RunConfig, cv_history: Sequence[float], stage: int) -> dict[str, np.ndarray]:
    return {
        "meta/stage": np.array([[float(stage)]]),
        "meta/dims": np.array([[cfg.d_in, cfg.d, cfg.layers]], dtype=np.float64),
        "meta/cv_history": np.array([list(cv_history)], dtype=np.float64),
        "meta/seed": np.array([[float(cfg.seed)]]),
    }


# -------------------------------------------------------------------- stage 1

@dataclass
class PretrainResult:
    checkpoint: Path
    cv_trace: list[dict]
    batch_losses: list[float]
    probe_losses: list[float]


def run_pretrain(cfg: RunConfig, out: str | Path) -> PretrainResult:
    """Candidate-set statistics, subgraph corpus, contrastive encoder training, checkpoint."""
    cfg.validate()
    graphs, hops = source_hops(cfg)
    trace = cv_trace(graphs, cfg.zeta)
    corpus = [s for per_graph in hops for per_center in per_graph for s in per_center]
    if not corpus:
        raise ValueError("empty pretraining corpus")
    res = pretrain_stage1(corpus, cfg.d_in, cfg.stage1_config())
    arrays = res.params.to_arrays()
    arrays.update(_meta(cfg, [t["cv"] for t in trace], 1))
    save_checkpoint(out, arrays)
    return PretrainResult(Path(out), trace, res.batch_losses, res.probe_losses)


# -------------------------------------------------------------------- stage 2

@dataclass
class Stage2Result:
    checkpoint: Path
    epoch_losses: list[float]
    probe_losses: list[float]  # index 0 is before any update
    routing_trace: list[dict]


def _view_embeddings(hops: Sequence[SubgraphSample], encoder: EncoderParams, views: int,
                     seed: int, threads: int) -> np.ndarray:
    """``[views, K, d]``: frozen-encoder embeddings of independently augmented hop subgraphs."""
    rng = np.random.default_rng(seed)
    subs = []
    for _ in range(views):
        subs.extend(augment(s, AugmentConfig(seed=int(rng.integers(2**31)))) for s in hops)
    x = encode_many(subs, encoder, threads=threads)
    return x.reshape(views, len(hops), -1)


def _pair_gogs(centers, xviews, pick, edge_ratio: float, rng: np.random.Generator):
    g1, g2 = [], []
    for c, x, (a, b) in zip(centers, xviews, pick):
        g1.append(gog_from_embeddings(c, x[a], edge_ratio, rng))
        g2.append(gog_from_embeddings(c, x[b], edge_ratio, rng))
    return g1, g2


def _stage2_loss(moe: RiemannMoE, g1, g2, cfg: RunConfig):
    o1, o2 = moe.forward(g1), moe.forward(g2)
    lb = T.scale(T.add(o1.load_balance, o2.load_balance), 0.5)
    loss = T.add(T.nt_xent_loss(o1.center, o2.center, cfg.tau), T.scale(lb, cfg.lb_weight))
    return loss, (o1, o2)


def _probe(moe, centers, xviews, cfg: RunConfig) -> float:
    idx = np.arange(min(len(centers), cfg.batch_size))
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 99]))
    g1, g2 = _pair_gogs([centers[i] for i in idx], [xviews[i] for i in idx],
                        [(0, 1)] * len(idx), cfg.edge_ratio, rng)
    with T.no_grad():
        loss, _ = _stage2_loss(moe, g1, g2, cfg)
    return loss.item()


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    out = [perm[i : i + size] for i in range(0, n, size)]
    if len(out) > 1 and out[-1].shape[0] < 2:
        out[-2] = np.concatenate([out[-2], out.pop()])
    return out


def run_stage2(cfg: RunConfig, checkpoint: str | Path, out: str | Path) -> Stage2Result:
    """Train router and experts on GoGs of the source centers; one ``m`` update per epoch."""
    cfg.validate()
    arrays = load_checkpoint(checkpoint)
    if "encoder/w_in" not in arrays:
        raise ConfigError(f"{checkpoint}: not a pretraining checkpoint")
    encoder = EncoderParams.from_arrays(arrays)
    cv_history = [float(x) for x in arrays["meta/cv_history"].ravel()]
    _, hops = source_hops(cfg)
    centers, xviews = [], []
    for gi, per_graph in enumerate(hops):
        for ci, h in enumerate(per_graph):
            centers.append(h[0].center)
            xviews.append(_view_embeddings(h, encoder, cfg.views,
                                           int(np.random.SeedSequence([cfg.seed, gi, ci]).generate_state(1)[0]),
                                           cfg.threads))
    if len(centers) < 2:
        raise ValueError("stage 2 needs at least two centers")
    state = RoutingState.from_history(cv_history, encoder.d, cfg.zeta, cfg.router_tau, cfg.router_hidden, cfg.seed)
    moe = RiemannMoE.init(state, encoder.d, seed=cfg.seed + 1)
    opt = T.Adam(moe.named(), cfg.stage2_lr, cfg.stage2_wd)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    probes = [_probe(moe, centers, xviews, cfg)]
    epoch_losses, trace = [], []
    for epoch in range(cfg.stage2_epochs):
        losses, confs, usage = [], [], []
        m_eff = moe.state.m_effective
        for idx in _batches(len(centers), cfg.batch_size, rng):
            pick = [tuple(rng.choice(cfg.views, size=2, replace=False)) for _ in idx]
            g1, g2 = _pair_gogs([centers[i] for i in idx], [xviews[i] for i in idx], pick, cfg.edge_ratio, rng)
            loss, (o1, o2) = _stage2_loss(moe, g1, g2, cfg)
            opt.step(T.backward(loss, opt.params.values()))
            losses.append(loss.item())
            confs.extend([o1.conf, o2.conf])
            usage.append(0.5 * (o1.alpha.data.mean(axis=0) + o2.alpha.data.mean(axis=0)))
        conf = float(np.mean(confs))
        u = np.mean(usage, axis=0)
        moe.state = replace(update_m(moe.state, conf), usage=u)
        epoch_losses.append(float(np.mean(losses)))
        probes.append(_probe(moe, centers, xviews, cfg))
        trace.append({"epoch": epoch, "conf": conf, "m_effective": m_eff, "usage": u.tolist()})
        log.debug("stage2 epoch %d loss %.5f conf %.3f m %d", epoch, epoch_losses[-1], conf, m_eff)
    arrays = encoder.to_arrays()
    arrays.update(moe.to_arrays())
    arrays.update(_meta(cfg, cv_history, 2))
    save_checkpoint(out, arrays)
    return Stage2Result(Path(out), epoch_losses, probes, trace)


# ------------------------------------------------------------------- transfer

def load_models(checkpoint: str | Path) -> tuple[EncoderParams, RiemannMoE]:
    arrays = load_checkpoint(checkpoint)
    if "moe/router_w1" not in arrays:
        raise ConfigError(f"{checkpoint}: no MoE weights; run stage2 first")
    return EncoderParams.from_arrays(arrays), RiemannMoE.from_arrays(arrays)


def build_gogs(g: AttributedGraph, centers: Sequence[int], encoder: EncoderParams, cfg: RunConfig) -> list[GraphOfGraphs]:
    hops = collect_hops(g, centers, cfg)
    flat = [s for h in hops for s in h]
    x = encode_many(flat, encoder, batch_size=cfg.batch_size, threads=cfg.threads)
    out, pos = [], 0
    for c, h in zip(centers, hops):
        x_sub = x[pos : pos + len(h)]
        pos += len(h)
        out.append(gog_from_embeddings(int(c), x_sub, cfg.edge_ratio, center_seed(cfg.seed, int(c))))
    return out


def center_embeddings(g: AttributedGraph, centers: Sequence[int], encoder: EncoderParams, moe: RiemannMoE,
                      cfg: RunConfig) -> np.ndarray:
    """Fused, unit-norm embedding of each center's GoG under the trained MoE."""
    gogs = build_gogs(g, centers, encoder, cfg)
    parts = []
    with T.no_grad():
        for i in range(0, len(gogs), cfg.batch_size):
            parts.append(moe.forward(gogs[i : i + cfg.batch_size]).center.data)
    return np.concatenate(parts, axis=0)


def train_linear_head(x: np.ndarray, y: np.ndarray, num_classes: int, steps: int, lr: float, seed: int,
                      x_val: np.ndarray | None = None, y_val: np.ndarray | None = None):
    """Softmax regression with bias; with validation data, keep the best-validation step.

    Ties go to the later step: a handful of validation nodes saturates early and the
    earliest tie would freeze a barely trained head.
    """
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (x.shape[1] + num_classes))
    w = Tensor(rng.uniform(-bound, bound, size=(x.shape[1], num_classes)), True)
    b = Tensor(np.zeros((1, num_classes)), True)
    opt = T.Adam({"w": w, "b": b}, lr)
    xt = Tensor(x)
    best = (w.data.copy(), b.data.copy())
    best_acc = -1.0
    for _ in range(steps):
        loss = T.cross_entropy(T.add(T.matmul(xt, w), b), y)
        opt.step(T.backward(loss, [w, b]))
        if x_val is not None:
            acc = accuracy((x_val @ w.data + b.data).argmax(axis=1), y_val)
            if acc >= best_acc:
                best_acc, best = acc, (w.data.copy(), b.data.copy())
    return best if x_val is not None else (w.data, b.data)


def _load_target(cfg: RunConfig, graph: AttributedGraph | None) -> AttributedGraph:
    if graph is not None:
        return unify_features(graph, cfg.d_in)
    cfg.validate(need_target=True)
    return unify_features(load_graph(cfg.target), cfg.d_in)


def node_accuracies(g: AttributedGraph, emb: np.ndarray, cfg: RunConfig, shots: int) -> list[float]:
    out = []
    val_shots = 1 if shots >= 3 else 0
    for seed in cfg.seeds:
        split = few_shot_split(g, shots, seed, val_shots)
        sup = split.support_nodes()
        y_sup = g.labels[sup]
        if val_shots:
            val = split.val_nodes()
            w, b = train_linear_head(emb[sup], y_sup, g.num_classes, cfg.head_steps, cfg.head_lr, seed,
                                     emb[val], g.labels[val])
        else:
            w, b = train_linear_head(emb[sup], y_sup, g.num_classes, cfg.head_steps, cfg.head_lr, seed)
        pred = (emb[split.query] @ w + b).argmax(axis=1)
        out.append(accuracy(pred, g.labels[split.query]))
    return out


def eval_node(cfg: RunConfig, checkpoint: str | Path, shots: int | None = None,
              graph: AttributedGraph | None = None) -> RunReport:
    t0 = time.perf_counter()
    shots = shots or cfg.shots
    g = _load_target(cfg, graph)
    if g.labels is None:
        raise ConfigError(f"{g.name}: node evaluation needs labels")
    counts = np.bincount(g.labels[g.labels >= 0], minlength=g.num_classes)
    need = shots + (1 if shots >= 3 else 0)
    if counts.min() < need + 1:
        raise ConfigError(f"{g.name}: a class has {counts.min()} nodes, {shots}-shot needs more than {need}")
    encoder, moe = load_models(checkpoint)
    emb = center_embeddings(g, np.arange(g.num_nodes), encoder, moe, cfg)
    accs = node_accuracies(g, emb, cfg, shots)
    return RunReport.from_values("node", "accuracy", accs, time.perf_counter() - t0, shots=shots,
                                 m_effective=moe.state.m_effective, psi=moe.state.psi)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def eval_link(cfg: RunConfig, checkpoint: str | Path, graph: AttributedGraph | None = None) -> RunReport:
    """Held-out edges are removed before any GoG is built; score is ``sigmoid(z_u . z_v)``."""
    t0 = time.perf_counter()
    g = _load_target(cfg, graph)
    encoder, moe = load_models(checkpoint)
    aucs = []
    for seed in cfg.seeds:
        split = link_split(g, cfg.link_val_frac, cfg.link_test_frac, seed)
        pos, neg = split.test_pos, split.test_neg
        nodes = np.unique(np.concatenate([pos.ravel(), neg.ravel()]))
        emb = center_embeddings(split.train_graph, nodes, encoder, moe, cfg)
        where = {int(n): i for i, n in enumerate(nodes)}
        pairs = np.concatenate([pos, neg])
        zu = emb[[where[int(u)] for u in pairs[:, 0]]]
        zv = emb[[where[int(v)] for v in pairs[:, 1]]]
        scores = sigmoid((zu * zv).sum(axis=1))
        labels = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
        aucs.append(auc_roc(scores, labels))
    return RunReport.from_values("link", "auc", aucs, time.perf_counter() - t0)


ROBUSTNESS_LEVELS = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


def robustness_sweep(cfg: RunConfig, checkpoint: str | Path, kind: str,
                     levels: Sequence[float] = ROBUSTNESS_LEVELS, shots: int | None = None,
                     graph: AttributedGraph | None = None) -> list[tuple[float, RunReport]]:
    """Node accuracy on perturbed copies of the target; training is untouched."""
    if kind not in ("edge_drop", "node_mask"):
        raise ConfigError(f"unknown perturbation kind {kind!r}")
    if any(not 0.0 <= lv <= 1.0 for lv in levels):
        raise ConfigError("perturbation levels must lie in [0, 1]")
    base = _load_target(cfg, graph)
    out = []
    for i, level in enumerate(levels):
        pseed = int(np.random.SeedSequence([cfg.seed, 31, i]).generate_state(1)[0])
        g = perturb_edges(base, level, pseed) if kind == "edge_drop" else perturb_features(base, level, pseed)
        rep = eval_node(cfg, checkpoint, shots, graph=g)
        rep.extra.update(kind=kind, level=float(level))
        out.append((float(level), rep))
    return out
