import numpy as np
import pytest

from rbsde_lab.forward import TimeGrid
from rbsde_lab.model import ModelSpec, build_mark_set
from rbsde_lab.pde import build_grid


def make_spec(drift=0.0, vol=0.0, gain=None, terminal=None, obstacle=None, points=(0.0,),
              weights=(1.0,), horizon=1.0, dim=1, budget=None):
    """Constant-coefficient spec; callables override the defaults."""
    marks = build_mark_set(list(points), list(weights))

    def b(x, a):
        return drift(x, a) if callable(drift) else np.full_like(x, drift)

    def s(x, a):
        if callable(vol):
            return vol(x, a)
        return np.broadcast_to(vol * np.eye(dim), (x.shape[0], dim, dim)).copy()

    def f(x, a, y, z):
        return gain(x, a, y, z) if gain is not None else np.zeros(x.shape[0])

    def g(x):
        return terminal(x) if terminal is not None else np.zeros(x.shape[0])

    def u(t, x):
        return obstacle(t, x) if obstacle is not None else np.full(x.shape[0], 1e9)

    return ModelSpec(dim_x=dim, marks=marks, horizon=horizon, drift=b, diffusion=s,
                     running_gain=f, terminal=g, obstacle=u, lipschitz_budget=budget or {})


def line_grid(spec, lo=-1.0, hi=1.0, nodes=21, steps=10):
    return build_grid((lo, hi), nodes, spec.marks, TimeGrid(spec.horizon, steps))


@pytest.fixture
def spec_factory():
    return make_spec


@pytest.fixture
def grid_factory():
    return line_grid


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
