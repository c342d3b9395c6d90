import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rbsde_lab.model import ModelError, build_mark_set, supersolution_bound, validate_model
from conftest import make_spec


def test_singleton_mark_set():
    ms = build_mark_set([0.2], [1.0])
    assert ms.size == 1
    assert ms.total_mass == 1.0


def test_total_mass_is_sum_of_weights():
    assert build_mark_set([0.1, 0.3], [0.5, 1.5]).total_mass == 2.0


@pytest.mark.parametrize("points,weights,msg", [
    ([0.1, 0.1], [1, 1], "duplicate"),
    ([0.1, 0.2], [1.0], "weights"),
    ([0.1, 0.2], [0.0, 0.0], "strictly positive"),
    ([0.1], [-1.0], "nonnegative"),
    ([], [], "empty"),
])
def test_mark_set_errors(points, weights, msg):
    with pytest.raises(ModelError, match=msg):
        build_mark_set(points, weights)


def test_mark_set_is_read_only():
    ms = build_mark_set([[0.0, 1.0], [1.0, 0.0]], [1.0, 2.0])
    assert ms.points.shape == (2, 2)
    with pytest.raises(ValueError):
        ms.weights[0] = 5.0
    assert ms.other_mass(0) == 2.0


def test_terminal_dominance_flags_every_node():
    spec = make_spec(terminal=lambda x: x[:, 0], obstacle=lambda t, x: x[:, 0] - 1.0)
    probe = np.linspace(-2, 2, 9)
    rep = validate_model(spec, probe)
    assert rep.nodes("terminal_dominance") == list(range(9))
    assert not rep.ok


def test_constant_spec_is_valid():
    spec = make_spec(obstacle=lambda t, x: np.ones(x.shape[0]))
    rep = validate_model(spec, np.linspace(0, 1, 5))
    assert rep.ok
    assert rep.violations == []


def test_nan_diffusion_names_the_node():
    def vol(x, a):
        out = np.ones((x.shape[0], 1, 1))
        out[np.isclose(x[:, 0], 0.5)] = np.nan
        return out

    spec = make_spec(vol=vol)
    rep = validate_model(spec, np.linspace(0, 1, 5))
    assert rep.nodes("diffusion_nonfinite") == [2]


def test_partial_dominance_exact_set():
    # u(T, x) < g(x) exactly where x > 0
    spec = make_spec(terminal=lambda x: np.maximum(x[:, 0], 0.0),
                     obstacle=lambda t, x: np.zeros(x.shape[0]))
    probe = np.linspace(-1, 1, 11)
    rep = validate_model(spec, probe)
    assert rep.nodes("terminal_dominance") == [i for i, x in enumerate(probe) if x > 0]


def test_empty_probe_grid_rejected():
    with pytest.raises(ModelError):
        validate_model(make_spec(), np.empty((0, 1)))


def test_lipschitz_advisory_against_budget():
    spec = make_spec(drift=lambda x, a: 10 * x, budget={"forward": 1.0})
    rep = validate_model(spec, np.linspace(0, 1, 5))
    assert rep.ok
    assert any("exceeds budget" in a for a in rep.advisories)


def test_supersolution_examples():
    spec = make_spec(horizon=1.0)
    assert supersolution_bound(spec, 1.0, 0.0, 2, 1.0, 0.0) == 1.0
    assert supersolution_bound(spec, 2.0, 0.0, 2, 1.0, 3.0) == pytest.approx(20.0)
    assert supersolution_bound(spec, 1.0, 0.5, 2, 0.0, [1.0, 0.0]) == pytest.approx(2 * math.exp(0.5))


@pytest.mark.parametrize("args", [(1.0, 0.0, 1.5, 0.0), (0.0, 0.0, 2, 0.0), (1.0, -1.0, 2, 0.0),
                                  (1.0, 0.0, 2, 2.0)])
def test_supersolution_rejects(args):
    C, rho, r, t = args
    with pytest.raises(ModelError):
        supersolution_bound(make_spec(), C, rho, r, t, 0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(0.1, 5), st.floats(0, 2), st.floats(0, 2), st.floats(0, 1), st.floats(0, 1),
       st.floats(0, 3), st.floats(0, 3))
def test_supersolution_monotone(C, rho1, drho, t1, t2, x1, dx):
    spec = make_spec()
    base = supersolution_bound(spec, C, rho1, 2, max(t1, t2), x1)
    assert supersolution_bound(spec, C, rho1 + drho, 2, max(t1, t2), x1) >= base
    assert supersolution_bound(spec, C, rho1, 2, min(t1, t2), x1) >= base
    assert supersolution_bound(spec, C, rho1, 2, max(t1, t2), x1 + dx) >= base
    assert supersolution_bound(spec, C * 1.5, rho1, 2, max(t1, t2), x1) >= base


def test_gain_dependence_probe():
    assert not make_spec(gain=lambda x, a, y, z: np.ones(x.shape[0])).gain_depends_on([[0.0]])
    assert make_spec(gain=lambda x, a, y, z: -0.05 * y).gain_depends_on([[0.0]])
    spec = make_spec(gain=lambda x, a, y, z: z[:, 0])
    assert spec.gain_depends_on([[0.0]], "z")
    assert not spec.gain_depends_on([[0.0]], "y")
