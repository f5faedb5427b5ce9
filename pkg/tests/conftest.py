import numpy as np
import pytest

from asyncdfl.model import Arch, Batch


def random_instance(rng, kind="softmax", dims=4, classes=3, n=20, scale=0.5):
    arch = Arch(kind, dims, classes, hidden=3)
    x = rng.standard_normal((n, dims))
    y = rng.integers(classes, size=n)
    params = scale * rng.standard_normal(arch.size)
    return arch, params, Batch(x, y)


def random_spd(rng, k, floor=0.1):
    a = rng.standard_normal((k, k))
    return a @ a.T + floor * np.eye(k)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def report(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def _report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        request.config.acceptance_lines[number] = line
        assert ok, line

    return _report


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_lines", {})
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
