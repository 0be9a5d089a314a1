from __future__ import annotations

import json

import pytest

from rgfm.cli import main
from rgfm.synthetic import make_corpus


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    paths = make_corpus(root, seed=1, n=50, d=8)
    cfg = {
        "sources": [str(paths["source_homo"]), str(paths["source_hetero"])], "target": str(paths["target"]),
        "d_in": 8, "d": 8, "k_cap": 2, "stage1_epochs": 1, "stage2_epochs": 2, "centers_per_graph": 6,
        "views": 2, "head_steps": 10, "seeds": [0],
    }
    (root / "c.json").write_text(json.dumps(cfg))
    return root


def test_full_cli_flow(corpus, capsys):
    c = str(corpus / "c.json")
    assert main(["pretrain", "--config", c, "--out", str(corpus / "s1.ckpt")]) == 0
    assert main(["stage2", "--config", c, "--ckpt", str(corpus / "s1.ckpt"), "--out", str(corpus / "s2.ckpt"),
                 "--trace", str(corpus / "trace.csv")]) == 0
    assert (corpus / "trace.csv").read_text().startswith("epoch,conf,m_effective,usage_0")
    rep = corpus / "node.json"
    assert main(["eval-node", "--config", c, "--ckpt", str(corpus / "s2.ckpt"), "--shots", "1", "--seeds", "2",
                 "--json", str(rep)]) == 0
    assert len(json.loads(rep.read_text())["per_seed"]) == 2
    assert main(["eval-link", "--config", c, "--ckpt", str(corpus / "s2.ckpt")]) == 0
    assert main(["robustness", "--config", c, "--ckpt", str(corpus / "s2.ckpt"), "--kind", "edge_drop",
                 "--levels", "0,0.5", "--shots", "1"]) == 0
    capsys.readouterr()
    assert main(["inspect-gog", "--config", c, "--ckpt", str(corpus / "s2.ckpt"), "--center", "3"]) == 0
    assert capsys.readouterr().out.startswith("GOG 3 2 1")


def test_config_error_exit_code(corpus, tmp_path):
    assert main(["pretrain", "--sources", str(tmp_path / "missing.graph"), "--out", str(tmp_path / "x")]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"unknown_field": 1}))
    assert main(["pretrain", "--config", str(bad)]) == 2


def test_infeasible_budget_exit_code(corpus, tmp_path):
    c = str(corpus / "c.json")
    assert main(["pretrain", "--config", c, "--budget", "1", "--out", str(tmp_path / "x")]) == 3


@pytest.mark.parametrize("which,extra", [("noise", ["--configs", "10"]), ("excess-risk", []),
                                         ("gog-error", ["--configs", "2", "--samples", "10000"])])
def test_oracle_commands(which, extra, tmp_path):
    out = tmp_path / "o.json"
    code = main(["oracle", which, "--json", str(out)] + extra)
    payload = json.loads(out.read_text())
    assert code == (0 if payload["passed"] else 1)
    assert payload["passed"]


def test_make_synthetic(tmp_path):
    assert main(["make-synthetic", "--out", str(tmp_path / "syn")]) == 0
    assert sorted(p.name for p in (tmp_path / "syn").iterdir()) == ["source_hetero.graph", "source_homo.graph",
                                                                     "target.graph"]
