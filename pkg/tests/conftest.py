from __future__ import annotations

import numpy as np
import pytest

from rgfm import tensor as T
from rgfm.graph import AttributedGraph


def path3(d: int = 2) -> AttributedGraph:
    return AttributedGraph.from_edges(3, [(0, 1), (1, 2)], np.arange(3 * d, dtype=float).reshape(3, d))


def grad_rel_error(loss_fn, leaves, h: float = 1e-5) -> float:
    """Largest relative error between reverse-mode and central-difference gradients.

    ``loss_fn()`` rebuilds the scalar loss from the current ``leaves`` data.
    Relative error per leaf is ``|g - g_fd| / max(|g|, |g_fd|, 1e-6)`` in max norm.
    """
    loss = loss_fn()
    grads = T.backward(loss, leaves)
    worst = 0.0
    for leaf in leaves:
        fd = np.zeros_like(leaf.data)
        it = np.nditer(leaf.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = leaf.data[idx]
            leaf.data[idx] = old + h
            with T.no_grad():
                up = loss_fn().item()
            leaf.data[idx] = old - h
            with T.no_grad():
                down = loss_fn().item()
            leaf.data[idx] = old
            fd[idx] = (up - down) / (2 * h)
        g = grads[leaf]
        scale = max(np.abs(g).max(), np.abs(fd).max(), 1e-6)
        worst = max(worst, float(np.abs(g - fd).max() / scale))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
