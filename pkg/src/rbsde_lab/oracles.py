"""Independent reference solvers and the built-in test problems.

The built-in problems store the put with a flipped sign: the solvers take a
minimum with an upper obstacle, so ``u = g = -(K - S)_+`` turns the
controller-and-stopper value into minus the American put price.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
import scipy.sparse as sp

from .dual import MarkovChain
from .forward import TimeGrid
from .model import ModelSpec, build_mark_set
from .pde import Grid, build_grid, stable_steps


class OracleError(ValueError):
    pass


def binomial_american(S0: float, K: float, r: float, sigma: float, T: float, steps: int,
                      up: float | None = None, down: float | None = None) -> float:
    """Cox-Ross-Rubinstein American put with early exercise.

    ``up``/``down`` override the CRR factors (both or neither).  With
    sigma = 0 the tree is deterministic and grows at the risk-free rate.
    """
    vals = (S0, K, r, sigma, T)
    if not all(math.isfinite(v) for v in vals):
        raise OracleError("parameters must be finite")
    if steps < 1 or sigma < 0 or T <= 0:
        raise OracleError("need steps >= 1, sigma >= 0, T > 0")
    if (up is None) != (down is None):
        raise OracleError("give both up and down factors or neither")
    dt = T / steps
    growth = math.exp(r * dt)
    if up is not None:
        u, d = float(up), float(down)
        if not d < growth < u:
            raise OracleError("factors admit arbitrage")
        p = (growth - d) / (u - d)
    elif sigma == 0:
        u = d = growth
        p = 1.0
    else:
        u = math.exp(sigma * math.sqrt(dt))
        d = 1.0 / u
        p = (growth - d) / (u - d)
    disc = 1.0 / growth
    j = np.arange(steps + 1)
    S = S0 * u ** j * d ** (steps - j)
    V = np.maximum(K - S, 0.0)
    for i in range(steps - 1, -1, -1):
        j = np.arange(i + 1)
        S = S0 * u ** j * d ** (i - j)
        V = np.maximum(disc * (p * V[1:i + 2] + (1 - p) * V[:i + 1]), K - S)
    return float(V[0])


def controller_stopper_dp(chain: MarkovChain, spec: ModelSpec, use_obstacle: bool = True
                          ) -> np.ndarray:
    """Discrete-time controller-and-stopper value on a chain, shape (steps + 1, nodes).

    V(t, s) = min(u(t, s), max_a [dt f(s, a, V(t + dt, s)) + sum P^a(s, s') V(t + dt, s')]).
    The stopping branch pays u; with ``use_obstacle=False`` it pays g instead,
    which is the game form proper.  A y-dependent f is evaluated at the
    lagged value V(t + dt, s); z-dependence is rejected.
    """
    for j, P in enumerate(chain.kernels):
        rows = np.asarray(P.sum(axis=1)).ravel()
        if np.max(np.abs(rows - 1.0)) > 1e-12:
            raise OracleError(f"kernel {j}: row sums deviate from 1")
        if P.nnz and P.data.min() < -1e-12:
            raise OracleError(f"kernel {j}: negative transition probability")
    X = chain.nodes
    if spec.gain_depends_on(X, "z"):
        raise OracleError("controller_stopper_dp needs f independent of z")
    K, dt = chain.time_grid.steps, chain.dt
    times = chain.time_grid.times
    V = np.empty((K + 1, chain.n_nodes))
    V[-1] = spec.g(X)
    zz = np.zeros_like(X)
    for k in range(K - 1, -1, -1):
        nxt = V[k + 1]
        best = np.full(chain.n_nodes, -np.inf)
        for j, P in enumerate(chain.kernels):
            best = np.maximum(best, dt * spec.f(X, j, nxt, zz) + P @ nxt)
        stop = spec.u(times[k], X) if use_obstacle else spec.g(X)
        V[k] = np.minimum(stop, best)
    return V


def upwind_chain(spec: ModelSpec, grid: Grid) -> MarkovChain:
    """Locally consistent chain with fully upwinded drift (1-D only).

    Built independently of the solvers' stencil; each step moves one node
    left or right with probability dt (a / (2 h^2) + b_-/+ / h).  The edges
    keep their inward drift only.
    """
    if grid.dim != 1:
        raise OracleError("upwind_chain is 1-D")
    x = grid.axes[0]
    h, dt = grid.h[0], grid.time_grid.dt
    X = x[:, None]
    kernels = []
    for j in range(spec.marks.size):
        b = spec.b(X, j)[:, 0]
        a = spec.sigma(X, j)[:, 0, 0] ** 2
        up = dt * (a / (2 * h * h) + np.maximum(b, 0) / h)
        dn = dt * (a / (2 * h * h) + np.maximum(-b, 0) / h)
        up[0], dn[0] = dt * max(b[0], 0) / h, 0.0
        up[-1], dn[-1] = 0.0, dt * max(-b[-1], 0) / h
        stay = 1.0 - up - dn
        if stay.min() < 0:
            raise OracleError("time step too large for the upwind chain")
        P = sp.diags([dn[1:], stay, up[:-1]], [-1, 0, 1], format="csr")
        kernels.append(P)
    return MarkovChain(X, tuple(kernels), np.asarray(spec.marks.weights), grid.time_grid)


@dataclass
class Comparison:
    labels: list
    values: list
    rows: list  # (label_i, label_j, abs_diff, rel_diff)

    def max_rel(self) -> float:
        return max((r[3] for r in self.rows), default=0.0)

    def lookup(self, a: str, b: str) -> tuple:
        for r in self.rows:
            if {r[0], r[1]} == {a, b}:
                return r[2], r[3]
        raise KeyError((a, b))

    def to_csv(self) -> str:
        lines = ["label_a,label_b,value_a,value_b,abs_diff,rel_diff"]
        vals = dict(zip(self.labels, self.values))
        for a, b, ad, rd in self.rows:
            lines.append(f"{a},{b},{vals[a]!r},{vals[b]!r},{ad!r},{rd!r}")
        return "\n".join(lines) + "\n"


def compare_values(entries) -> Comparison:
    """Pairwise differences; the relative one is |a - b| / mean(|a|, |b|)."""
    entries = [(str(lab), float(v)) for lab, v in entries]
    if len(entries) < 2:
        raise OracleError("need at least two entries")
    rows = []
    for (la, a), (lb, b) in combinations(entries, 2):
        ad = abs(a - b)
        scale = 0.5 * (abs(a) + abs(b))
        rows.append((la, lb, ad, ad / scale if scale > 0 else 0.0))
    return Comparison([e[0] for e in entries], [e[1] for e in entries], rows)


# ---------------------------------------------------------------------------
# test problems


@dataclass(frozen=True)
class TestProblem:
    name: str
    spec: ModelSpec
    box: tuple
    nodes: int
    steps: int | None  # None: smallest CFL-stable count for the unpenalized solve
    x0: tuple
    mark0: int = 0
    seeds: tuple = (20240611,)
    notes: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    def grid(self, nodes: int | None = None, steps: int | None = None) -> Grid:
        nodes = self.nodes if nodes is None else nodes
        steps = steps if steps is not None else self.steps
        tg = TimeGrid(self.spec.horizon, steps or 1)
        g = build_grid(self.box, nodes, self.spec.marks, tg, self.x0)
        if steps is None:
            g = g.with_steps(stable_steps(self.spec, g))
        return g


def uncertain_vol_put(horizon: float, strike: float, rate: float, vols, weights,
                      log_price: bool = True, discounted: bool = True,
                      tag: str = "") -> ModelSpec:
    """Sign-flipped American put with a volatility mark per regime.

    In log coordinates x = ln S the drift is r - a^2 / 2 and the diffusion a;
    otherwise b = r S and sigma = a S.  Discounting is the gain f = -r y;
    ``discounted=False`` drops it (f = 0), which keeps early exercise
    relevant while the gain stays free of y.
    """
    disc = rate if discounted else 0.0
    marks = build_mark_set(list(vols), list(weights))
    if log_price:
        def drift(x, a):
            return np.full_like(x, rate - 0.5 * a[0] ** 2)

        def diffusion(x, a):
            return np.full((x.shape[0], 1, 1), a[0])

        def payoff(x):
            return -np.maximum(strike - np.exp(x[:, 0]), 0.0)
    else:
        def drift(x, a):
            return rate * x

        def diffusion(x, a):
            return (a[0] * x)[:, :, None]

        def payoff(x):
            return -np.maximum(strike - x[:, 0], 0.0)

    def gain(x, a, y, z):
        if disc == 0.0:
            return np.zeros(x.shape[0])
        return -disc * np.asarray(y, dtype=float)

    return ModelSpec(dim_x=1, marks=marks, horizon=horizon, drift=drift, diffusion=diffusion,
                     running_gain=gain, terminal=payoff, obstacle=lambda t, x: payoff(x),
                     lipschitz_budget={"f_y": abs(disc), "f_z": 0.0}, tag=tag)


def _p0() -> TestProblem:
    spec = uncertain_vol_put(1.0, 100.0, 0.05, [0.2], [1.0], log_price=False,
                             tag="american put, price coordinates")
    return TestProblem("P0", spec, (0.0, 300.0), 301, None, (100.0,),
                       notes={"S0": 100.0, "K": 100.0, "r": 0.05, "sigma": 0.2})


def _p1() -> TestProblem:
    spec = uncertain_vol_put(1.0, 100.0, 0.05, [0.15, 0.2, 0.25], [0.25, 0.25, 0.25],
                             tag="uncertain-volatility american put, log coordinates")
    c = math.log(100.0)
    return TestProblem("P1", spec, (c - 2.5, c + 2.5), 51, 50, (c,), mark0=1,
                       notes={"S0": 100.0, "K": 100.0, "r": 0.05})


def _p2() -> TestProblem:
    T = 1.0
    marks = build_mark_set([0.0, 1.0], [1.0, 1.0])
    spec = ModelSpec(
        dim_x=1, marks=marks, horizon=T,
        drift=lambda x, a: np.zeros_like(x),
        diffusion=lambda x, a: np.zeros((x.shape[0], 1, 1)),
        running_gain=lambda x, a, y, z: np.ones(x.shape[0]),
        terminal=lambda x: x[:, 0].copy(),
        obstacle=lambda t, x: x[:, 0] + (T - t) + 1.0,
        tag="frozen dynamics, exact value x + T - t")
    return TestProblem("P2", spec, (-1.0, 1.0), 21, 10, (0.0,))


_BUILTINS = {"P0": _p0, "P1": _p1, "P2": _p2}


def builtin_names() -> list[str]:
    return sorted(_BUILTINS)


def get_problem(name: str) -> TestProblem:
    try:
        return _BUILTINS[name]()
    except KeyError:
        raise OracleError(f"unknown problem {name!r}; known: {', '.join(builtin_names())}")
