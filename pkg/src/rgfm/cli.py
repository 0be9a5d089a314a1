"""Command-line entry point: ``rgfm <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 infeasible byte budget.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import oracles
from .gog import InfeasibleBudgetError, dump_gog
from .graph import GraphFormatError, load_graph, unify_features
from .moe import write_routing_trace
from .pipeline import (ROBUSTNESS_LEVELS, ConfigError, RunConfig, build_gogs, eval_link, eval_node, load_models,
                       robustness_sweep, run_pretrain, run_stage2)
from .synthetic import make_corpus

EXIT_CONFIG = 2
EXIT_BUDGET = 3


def _emit(payload: dict, table: str, json_path: str | None) -> None:
    if json_path:
        Path(json_path).write_text(json.dumps(payload, indent=2), encoding="utf-8")
    print(table)


def _table(rows: list[tuple[str, str]]) -> str:
    w = max(len(a) for a, _ in rows)
    return "\n".join(f"{a:<{w}}  {b}" for a, b in rows)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for f in fields(RunConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            overrides[f.name] = val
    if overrides:
        cfg = RunConfig.from_dict({**cfg.__dict__, **overrides})
    return cfg


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with RunConfig fields")
    p.add_argument("--sources", nargs="+")
    p.add_argument("--target")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--k-cap", dest="k_cap", type=int)
    p.add_argument("--budget", type=float)
    p.add_argument("--edge-ratio", dest="edge_ratio", type=float)
    p.add_argument("--stage1-epochs", dest="stage1_epochs", type=int)
    p.add_argument("--stage2-epochs", dest="stage2_epochs", type=int)
    p.add_argument("--json", dest="json_out", help="write the machine-readable report here")


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    res = run_pretrain(cfg, args.out)
    rows = [("checkpoint", str(res.checkpoint))]
    rows += [(t["dataset"], f"cv={t['cv']:.4f} score={t['score']:.4f} psi={t['psi']}") for t in res.cv_trace]
    if res.probe_losses:
        rows.append(("probe loss", f"{res.probe_losses[0]:.4f} -> {res.probe_losses[-1]:.4f}"))
    _emit({"checkpoint": str(res.checkpoint), "cv_trace": res.cv_trace, "probe_losses": res.probe_losses},
          _table(rows), args.json_out)
    return 0


def cmd_stage2(args) -> int:
    cfg = _load_config(args)
    res = run_stage2(cfg, args.ckpt, args.out)
    if args.trace:
        write_routing_trace(args.trace, res.routing_trace)
    rows = [("checkpoint", str(res.checkpoint))]
    rows += [(f"epoch {t['epoch']}", f"conf={t['conf']:.3f} m={t['m_effective']} loss={l:.4f}")
             for t, l in zip(res.routing_trace, res.epoch_losses)]
    _emit({"checkpoint": str(res.checkpoint), "epoch_losses": res.epoch_losses,
           "probe_losses": res.probe_losses, "routing_trace": res.routing_trace}, _table(rows), args.json_out)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    if args.seeds is not None:
        cfg.seeds = list(range(args.seeds))
    if args.command == "eval-node":
        rep = eval_node(cfg, args.ckpt, args.shots)
    else:
        rep = eval_link(cfg, args.ckpt)
    _emit(rep.to_json(), rep.to_table(), args.json_out)
    return 0


def cmd_robustness(args) -> int:
    cfg = _load_config(args)
    levels = [float(x) for x in args.levels.split(",")] if args.levels else list(ROBUSTNESS_LEVELS)
    series = robustness_sweep(cfg, args.ckpt, args.kind, levels, args.shots)
    rows = [("level", "accuracy")] + [(f"{lv:g}", f"{r.mean:.4f} +- {r.std:.4f}") for lv, r in series]
    _emit({"kind": args.kind, "series": [r.to_json() for _, r in series]}, _table(rows), args.json_out)
    return 0


def cmd_oracle(args) -> int:
    if args.which == "noise":
        rep = oracles.noise_report(args.configs or 200, args.seed or 0)
    elif args.which == "gog-error":
        rep = oracles.gog_error_report(args.configs or 50, args.samples, args.seed or 0)
    else:
        rep = oracles.excess_risk_report(args.configs or 100, args.seed or 0)
    payload = rep.to_json()
    rows = [("oracle", rep.name), ("passed", str(rep.passed))]
    if rep.name == "excess_risk":
        fx = rep.details["fixture"]
        rows += [("psi_D", str(fx["argmin"])), ("R(psi_D)", f"{fx['R_min']:.7f}")]
    elif rep.name == "noise_fusion":
        rows.append(("worst excess", f"{rep.details['worst_excess']:.3e}"))
    else:
        rows.append(("configs", str(len(rep.details["configs"]))))
    _emit(payload, _table(rows), args.json_out)
    return 0 if rep.passed else 1


def cmd_inspect_gog(args) -> int:
    cfg = _load_config(args)
    graph_path = args.graph or cfg.target
    if not graph_path or not Path(graph_path).is_file():
        raise ConfigError(f"graph {graph_path!r} does not exist")
    g = unify_features(load_graph(graph_path), cfg.d_in)
    if not 0 <= args.center < g.num_nodes:
        raise ConfigError(f"center {args.center} outside [0, {g.num_nodes})")
    encoder, _ = load_models(args.ckpt)
    gog = build_gogs(g, [args.center], encoder, cfg)[0]
    text = dump_gog(gog)
    if args.json_out:
        Path(args.json_out).write_text(json.dumps({"center": gog.center, "K": gog.K, "edges": gog.pairs.tolist(),
                                                   "similarity": np.round(gog.similarity, 6).tolist()}), "utf-8")
    sys.stdout.write(text)
    return 0


def cmd_make_synthetic(args) -> int:
    paths = make_corpus(args.out, args.seed or 0)
    print(_table([(k, str(v)) for k, v in paths.items()]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rgfm", description="Adaptive-hop graph-of-graphs pretraining with curvature experts")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="stage-1 encoder pretraining")
    _add_config_flags(p)
    p.add_argument("--out", default="stage1.ckpt")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("stage2", help="GoG mixture-of-experts training")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", default="stage2.ckpt")
    p.add_argument("--trace", help="write the per-epoch routing trace CSV here")
    p.set_defaults(func=cmd_stage2)

    for name in ("eval-node", "eval-link"):
        p = sub.add_parser(name, help=f"{name.split('-')[1]}-level transfer evaluation")
        _add_config_flags(p)
        p.add_argument("--ckpt", required=True)
        p.add_argument("--shots", type=int)
        p.add_argument("--seeds", type=int, help="evaluate seeds 0..N-1")
        p.set_defaults(func=cmd_eval)

    p = sub.add_parser("robustness", help="accuracy under evaluation-time perturbation")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--kind", choices=["edge_drop", "node_mask"], required=True)
    p.add_argument("--levels", help="comma-separated, default 0,0.1,...,0.5")
    p.add_argument("--shots", type=int)
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("oracle", help="numerical checks of the theory")
    p.add_argument("which", choices=["noise", "gog-error", "excess-risk"])
    p.add_argument("--configs", type=int)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--seed", type=int)
    p.add_argument("--json", dest="json_out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("inspect-gog", help="print one center's graph-of-graphs")
    _add_config_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--center", type=int, required=True)
    p.add_argument("--graph", help="graph file, defaults to the config target")
    p.set_defaults(func=cmd_inspect_gog)

    p = sub.add_parser("make-synthetic", help="write the synthetic three-graph corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_make_synthetic)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InfeasibleBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (ConfigError, GraphFormatError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
