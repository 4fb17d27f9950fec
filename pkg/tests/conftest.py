"""Shared fixtures and a test-local finite-difference oracle."""

from __future__ import annotations

import numpy as np
import pytest

from gcvit import model as M
from gcvit import tensor as T
from gcvit.cli import overfit


def fd_check(fn, inputs, eps=1e-5, seed=0):
    """Max per-coordinate relative error between tape and central-difference gradients.

    Independent of :func:`gcvit.analysis.gradient_audit`: plain loops, the
    probe loss ``sum(fn(*inputs) * R)``, and the relative error
    ``|a - fd| / max(|a|, |fd|, 1e-12)``.
    """
    rng = np.random.default_rng(seed)
    for t in inputs:
        t.requires_grad = True
    with T.Tape():
        out = fn(*inputs)
        R = rng.standard_normal(out.shape)
        loss = (out * T.Tensor(R)).sum()
    grads = T.backward(loss, inputs)
    worst = 0.0
    for t in inputs:
        flat = t.data.reshape(-1)
        g = grads[t].data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = fn(*inputs).data
            flat[i] = old - eps
            dn = fn(*inputs).data
            flat[i] = old
            fd = float(np.sum((up - dn) * R)) / (2 * eps)
            worst = max(worst, abs(g[i] - fd) / max(abs(g[i]), abs(fd), 1e-12))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_config():
    return M.preset("toy")


@pytest.fixture(scope="session")
def trained_toy():
    """Toy model after the default overfit run (500 steps, lr 0.05, seed 42)."""
    lines: list[str] = []
    m, acc, losses = overfit(log=lines.append)
    return {"model": m, "accuracy": acc, "losses": losses, "log": lines}


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
