import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_graph(rng, k, density=0.6, diag=True):
    """Random GraphParams-compatible (S, logL) with a free diagonal."""
    S = rng.normal(size=(k, k)) * (rng.random((k, k)) < density)
    if diag:
        np.fill_diagonal(S, rng.uniform(0.5, 1.5, size=k))
    logL = rng.uniform(-0.5, 1.0, size=(k, k))
    return S, logL


ACCEPTANCE = []


def record(number, name, passed, detail):
    """Register one acceptance outcome; printed in the terminal summary."""
    ACCEPTANCE.append((number, name, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, name, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:>2} {name}: {'PASS' if passed else 'FAIL'} ({detail})")
