import os

import numpy as np
import pytest

from tokdrop import tensor as tn


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the multi-hour desk-scale training criteria")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: multi-hour desk-scale training runs")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow") or os.environ.get("TOKDROP_RUN_SLOW"):
        return
    skip = pytest.mark.skip(reason="slow desk-scale run; use --runslow or TOKDROP_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


VERDICTS = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)


def numeric_grad(loss_fn, tensor, eps=1e-6):
    """Central differences of the scalar ``loss_fn()`` with respect to ``tensor.data``."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = loss_fn()
        flat[i] = old - eps
        down = loss_fn()
        flat[i] = old
        g[i] = (up - down) / (2 * eps)
    return grad


def analytic_grad(build, params):
    """Run ``build()`` on a tape and return the gradients of its scalar output."""
    for p in params:
        p.grad = None
    with tn.Tape() as tape:
        out = build()
    tape.backward(out)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def rel_err(a, b, floor=1e-5):
    """Max-abs error relative to the larger gradient; ``floor`` absorbs finite-difference
    noise on gradients that are zero analytically (e.g. key biases under softmax)."""
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
