"""Dual controller/discount game for the doubly penalized equation.

The maximizer picks jump intensities nu in (0, m] (a change of the jump
compensator from lam to nu * lam), the minimizer a discount rate theta in
[0, n] that kills the state and pays the obstacle.  On the Markov chain built
from the finite-difference stencil, one backward step of the game reads

    A(nu)       = P^a G(., a) + dt f + dt sum_j nu_j lam_j (G(x, a_j) - G(x, a))
    Phi(nu, th) = (1 - th dt) A(nu) + th dt u

and replacing the two optimizations by their closed forms gives exactly the
penalized finite-difference step.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .forward import TimeGrid
from .model import ModelSpec
from .pde import Grid, PenaltyParams, check_cfl, dynkin_matrix, jump_penalty


class DualError(ValueError):
    pass


# ---------------------------------------------------------------------------
# pointwise optimizations


@dataclass(frozen=True)
class NuArgmax:
    value: float
    nu: np.ndarray  # m where ell >= 0, 0.0 where the optimum is the limit nu -> 0+
    attained: np.ndarray  # False where the supremum is only approached

    @property
    def attained_all(self) -> bool:
        return bool(np.all(self.attained))


def sup_nu_linear(ell, weights, m: float) -> NuArgmax:
    """sup over nu in (0, m]^J of sum_j nu_j lam_j ell_j, i.e. m sum_j lam_j (ell_j)_+."""
    ell = np.asarray(ell, dtype=float)
    lam = np.asarray(weights, dtype=float)
    if np.any(lam < 0):
        raise DualError("weights must be nonnegative")
    value = float(m * np.dot(lam, np.maximum(ell, 0.0)))
    attained = ell >= 0
    return NuArgmax(value, np.where(attained, float(m), 0.0), attained)


def nu_epsilon(ell, m: float, eps: float) -> np.ndarray:
    """The eps-optimal intensity: m on nonnegative jump gains, eps elsewhere."""
    if not 0 < eps <= m:
        raise DualError("eps must lie in (0, m]")
    ell = np.asarray(ell, dtype=float)
    return np.where(ell >= 0, float(m), float(eps))


def gap_at_policy(ell, weights, m: float, nu) -> float:
    """sum_j lam_j [m (ell_j)_+ - nu_j ell_j]; nonnegative for nu in (0, m]."""
    ell = np.asarray(ell, dtype=float)
    lam = np.asarray(weights, dtype=float)
    nu = np.broadcast_to(np.asarray(nu, dtype=float), ell.shape)
    if np.any(nu <= 0) or np.any(nu > m):
        raise DualError(f"policy outside (0, {m}]")
    return float(np.dot(lam, m * np.maximum(ell, 0.0) - nu * ell))


def inf_theta_term(d: float, n: float) -> tuple[float, float]:
    """min over theta in [0, n] of n (d)_- + theta d, with d = u - y.

    The minimum is 0, reached at theta* = n when d <= 0 and theta* = 0 otherwise.
    """
    if n < 0:
        raise DualError("n must be nonnegative")
    theta = float(n) if d <= 0 else 0.0
    return n * max(-d, 0.0) + theta * d, theta


# ---------------------------------------------------------------------------
# Markov chain


@dataclass(frozen=True)
class MarkovChain:
    nodes: np.ndarray  # (N, d)
    kernels: tuple  # one sparse (N, N) transition matrix per mark
    weights: np.ndarray
    time_grid: TimeGrid

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_marks(self) -> int:
        return len(self.kernels)

    @property
    def n_states(self) -> int:
        return self.n_nodes * self.n_marks

    @property
    def dt(self) -> float:
        return self.time_grid.dt

    def validate(self, tol: float = 1e-12) -> None:
        for j, P in enumerate(self.kernels):
            if P.nnz and P.data.min() < -tol:
                raise DualError(f"kernel {j} has negative entries")
            rows = np.asarray(P.sum(axis=1)).ravel()
            if np.max(np.abs(rows - 1.0)) > tol:
                raise DualError(f"kernel {j} rows do not sum to one")


def build_chain(spec: ModelSpec, grid: Grid) -> MarkovChain:
    """Transition kernels P^a = I + dt L^a from the finite-difference stencil."""
    dt = grid.time_grid.dt
    eye = sp.identity(grid.n_nodes, format="csr")
    kernels = []
    for j in range(spec.marks.size):
        P = (eye + dt * dynkin_matrix(spec, grid, j)).tocsr()
        P.eliminate_zeros()
        kernels.append(P)
    chain = MarkovChain(grid.nodes, tuple(kernels), np.asarray(spec.marks.weights),
                        grid.time_grid)
    chain.validate()
    return chain


def _require_exogenous_gain(spec: ModelSpec, x) -> None:
    if spec.gain_depends_on(x):
        raise DualError("the dual game needs a running gain independent of (y, z)")


def _gain_table(spec: ModelSpec, chain: MarkovChain) -> np.ndarray:
    X = chain.nodes
    zy, zz = np.zeros(len(X)), np.zeros_like(X)
    return np.stack([spec.f(X, j, zy, zz) for j in range(chain.n_marks)], axis=1)


def _diffuse(chain: MarkovChain, G: np.ndarray) -> np.ndarray:
    return np.stack([chain.kernels[j] @ G[:, j] for j in range(chain.n_marks)], axis=1)


def _jump_gains(G: np.ndarray) -> np.ndarray:
    """ell[x, a, j] = G(x, a_j) - G(x, a)."""
    return G[:, None, :] - G[:, :, None]


def penalized_chain_values(chain: MarkovChain, spec: ModelSpec, params: PenaltyParams):
    """Backward induction with the closed-form penalties.

    Returns (Y, W): the values and the pre-obstacle continuation at each step.
    """
    X, dt, times = chain.nodes, chain.dt, chain.time_grid.times
    f = _gain_table(spec, chain)
    K = chain.time_grid.steps
    Y = np.empty((K + 1, chain.n_nodes, chain.n_marks))
    W = np.empty((K, chain.n_nodes, chain.n_marks))
    Y[-1] = np.asarray(spec.g(X))[:, None]
    for k in range(K - 1, -1, -1):
        w = _diffuse(chain, Y[k + 1]) + dt * f
        if params.m > 0:
            w = w + dt * params.m * jump_penalty(Y[k + 1], chain.weights)
        W[k] = w
        u = np.asarray(spec.u(times[k], X))[:, None]
        if math.isinf(params.n):
            Y[k] = np.minimum(w, u)
        else:
            Y[k] = w - params.n * dt * np.maximum(w - u, 0.0)
    return Y, W


def evaluate_chain_policy(chain: MarkovChain, spec: ModelSpec, nu: Callable, theta: Callable,
                          running=None, terminal=None, obstacle=None) -> np.ndarray:
    """G(nu, theta) on the chain by backward induction.

    ``nu(k)`` returns intensities of shape (N, J_from, J_to) and ``theta(k)``
    discounts of shape (N, J).  ``running`` (shape (K, N, J)), ``terminal``
    and ``obstacle`` override f, g and u, e.g. to evaluate the remainder term.
    """
    X, dt, times = chain.nodes, chain.dt, chain.time_grid.times
    K = chain.time_grid.steps
    G = np.empty((K + 1, chain.n_nodes, chain.n_marks))
    G[-1] = (np.asarray(spec.g(X))[:, None] if terminal is None
             else np.broadcast_to(terminal, G[-1].shape))
    f = _gain_table(spec, chain) if running is None else None
    lam = chain.weights
    for k in range(K - 1, -1, -1):
        rk = f if running is None else running[k]
        nu_k = np.asarray(nu(k), dtype=float)
        th_k = np.asarray(theta(k), dtype=float)
        jump = np.einsum("xaj,xaj,j->xa", nu_k, _jump_gains(G[k + 1]), lam)
        A = _diffuse(chain, G[k + 1]) + dt * rk + dt * jump
        u = (np.asarray(spec.u(times[k], X))[:, None] if obstacle is None
             else np.broadcast_to(obstacle, A.shape))
        G[k] = (1.0 - th_k * dt) * A + th_k * dt * u
    return G


@dataclass
class SaddleResult:
    sup_inf: np.ndarray  # (N, J) at t = 0
    inf_sup: np.ndarray
    penalized: np.ndarray
    bound: float  # accumulated nu/theta grid-resolution bound
    params: PenaltyParams

    @property
    def gap(self) -> float:
        return float(np.max(self.inf_sup - self.sup_inf))

    def row(self, node: int, mark: int) -> dict:
        return {"n": self.params.n, "m": self.params.m,
                "sup_inf": float(self.sup_inf[node, mark]),
                "inf_sup": float(self.inf_sup[node, mark]),
                "gap": float(self.inf_sup[node, mark] - self.sup_inf[node, mark]),
                "bound": self.bound,
                "penalized_value": float(self.penalized[node, mark])}


def _nu_candidates(nu_grid, J: int, m: float) -> np.ndarray:
    arr = np.asarray(nu_grid, dtype=float)
    if arr.ndim == 1:
        mesh = np.meshgrid(*([arr] * J), indexing="ij")
        arr = np.stack([c.ravel() for c in mesh], axis=1)
    if arr.ndim != 2 or arr.shape[1] != J:
        raise DualError(f"nu grid must be 1-D or of shape (K, {J})")
    if np.any(arr <= 0) or np.any(arr > m):
        raise DualError(f"nu grid outside (0, {m}]")
    return arr


def saddle_dp(chain: MarkovChain, params: PenaltyParams, nu_grid, theta_grid,
              spec: ModelSpec) -> SaddleResult:
    """sup-inf and inf-sup of the one-step game by backward induction.

    ``nu_grid=None`` uses the closed-form supremum over nu (the game is linear
    in nu); otherwise ``nu_grid`` is a 1-D set of values used per mark or an
    explicit list of intensity vectors.  ``theta_grid`` must lie in [0, n].
    """
    n, m = params.n, params.m
    if not math.isfinite(n):
        raise DualError("saddle_dp needs a finite n")
    _require_exogenous_gain(spec, chain.nodes)
    thetas = np.asarray(theta_grid, dtype=float).ravel()
    if thetas.size == 0 or np.any(thetas < 0) or np.any(thetas > n):
        raise DualError(f"theta grid outside [0, {n}]")
    J, dt = chain.n_marks, chain.dt
    nus = None if nu_grid is None else _nu_candidates(nu_grid, J, m)
    if n * dt > 1 + 1e-12:
        raise DualError("n * dt > 1: the discounted step is not monotone")
    for j, P in enumerate(chain.kernels):
        stay = P.diagonal() - dt * m * (chain.weights.sum() - chain.weights[j])
        if stay.min() < -1e-12:
            raise DualError("chain step too coarse for these penalties (CFL)")

    X, times = chain.nodes, chain.time_grid.times
    f = _gain_table(spec, chain)
    lam = chain.weights
    K = chain.time_grid.steps
    Y_pen, _ = penalized_chain_values(chain, spec, params)
    si = Y_pen[-1].copy()
    is_ = Y_pen[-1].copy()
    bound = 0.0
    th_lo, th_hi = 0.0, float(n)

    def one_step(G, u):
        ell = _jump_gains(G)  # (N, a, j)
        base = _diffuse(chain, G) + dt * f
        a_star = base + dt * m * np.einsum("xaj,j->xa", np.maximum(ell, 0.0), lam)
        if nus is None:
            A = a_star[..., None]  # closed form, one "candidate"
        else:
            A = base[..., None] + dt * np.einsum("xaj,kj,j->xak", ell, nus, lam)
        phi = ((1.0 - thetas * dt)[None, None, None, :] * A[..., None]
               + (thetas * dt)[None, None, None, :] * u[..., None, None])
        sup_inf = phi.min(axis=3).max(axis=2)
        inf_sup = phi.max(axis=2).min(axis=2)
        return sup_inf, inf_sup, a_star, A

    for k in range(K - 1, -1, -1):
        u = np.broadcast_to(np.asarray(spec.u(times[k], X))[:, None], si.shape)
        si, _, _, _ = one_step(si, u)
        _, is_, _, _ = one_step(is_, u)
        # local resolution error, measured on the penalized continuation
        _, _, a_star, A = one_step(Y_pen[k + 1], u)
        e_nu = float((a_star - A.max(axis=2)).max())
        exact = np.minimum((1 - th_lo * dt) * a_star + th_lo * dt * u,
                           (1 - th_hi * dt) * a_star + th_hi * dt * u)
        grid_min = np.min((1.0 - thetas * dt) * a_star[..., None] + (thetas * dt) * u[..., None],
                          axis=2)
        e_th = float((grid_min - exact).max())
        bound += max(e_nu, 0.0) + max(e_th, 0.0)
    return SaddleResult(si, is_, Y_pen[0], bound, params)


def enumerate_one_step(G_next, u, f, lam, dt, nu_list, theta_list, a: int):
    """Exhaustive max-min and min-max of the one-step game at a single node."""
    G_next = np.asarray(G_next, dtype=float)
    table = []
    for nu in nu_list:
        row = []
        for th in theta_list:
            A = G_next[a] + dt * f + dt * sum(
                nu[j] * lam[j] * (G_next[j] - G_next[a]) for j in range(len(G_next)))
            row.append((1 - th * dt) * A + th * dt * u)
        table.append(row)
    table = np.array(table)
    return float(table.min(axis=1).max()), float(table.max(axis=0).min())


# ---------------------------------------------------------------------------
# eps-saddle sandwich


@dataclass
class SandwichResult:
    eps: float
    penalized: np.ndarray  # Y at t = 0, (N, J)
    lower: dict  # label -> G(nu, theta*) at t = 0
    upper: dict  # label -> G(nu^eps, theta) + eps R(theta) at t = 0
    remainder: dict  # label -> R(theta)

    def holds(self, tol: float = 1e-10) -> bool:
        scale = 1.0 + float(np.abs(self.penalized).max())
        ok_lo = all(np.all(g <= self.penalized + tol * scale) for g in self.lower.values())
        ok_hi = all(np.all(self.penalized <= g + tol * scale) for g in self.upper.values())
        return ok_lo and ok_hi


def eps_saddle_sandwich(chain: MarkovChain, spec: ModelSpec, params: PenaltyParams, eps: float,
                        nu_policies=None, theta_policies=None) -> SandwichResult:
    """Check G(nu, theta*) <= Y <= G(nu^eps, theta) + eps R(theta) on the chain.

    ``nu_policies`` / ``theta_policies`` map labels to callables as accepted
    by :func:`evaluate_chain_policy`; defaults cover constant, extreme and
    eps-optimal choices.
    """
    n, m = params.n, params.m
    if not 0 < eps <= m:
        raise DualError("eps must lie in (0, m]")
    _require_exogenous_gain(spec, chain.nodes)
    Y, W = penalized_chain_values(chain, spec, params)
    X, times = chain.nodes, chain.time_grid.times
    J = chain.n_marks
    lam = chain.weights

    def nu_eps(k):
        return nu_epsilon(_jump_gains(Y[k + 1]), m, eps)

    def theta_star(k):
        u = np.asarray(spec.u(times[k], X))[:, None]
        return np.where(W[k] >= u, float(n), 0.0)

    full = (chain.n_nodes, J, J)
    if nu_policies is None:
        nu_policies = {
            "nu=m": lambda k: np.full(full, float(m)),
            "nu=eps": lambda k: np.full(full, float(eps)),
            "nu=m/2": lambda k: np.full(full, 0.5 * m),
            "nu_eps": nu_eps,
        }
    if theta_policies is None:
        theta_policies = {
            "theta=0": lambda k: np.zeros((chain.n_nodes, J)),
            "theta=n": lambda k: np.full((chain.n_nodes, J), float(n)),
            "theta=n/2": lambda k: np.full((chain.n_nodes, J), 0.5 * n),
            "theta*": theta_star,
        }
    lower = {lab: evaluate_chain_policy(chain, spec, nu, theta_star)[0]
             for lab, nu in nu_policies.items()}
    abs_ell = np.stack([np.einsum("xaj,j->xa", np.abs(_jump_gains(Y[k + 1])), lam)
                        for k in range(chain.time_grid.steps)])
    upper, rem = {}, {}
    for lab, th in theta_policies.items():
        G = evaluate_chain_policy(chain, spec, nu_eps, th)[0]
        R = evaluate_chain_policy(chain, spec, nu_eps, th, running=abs_ell,
                                  terminal=0.0, obstacle=0.0)[0]
        upper[lab] = G + eps * R
        rem[lab] = R
    return SandwichResult(eps, Y[0], lower, upper, rem)


# ---------------------------------------------------------------------------
# Monte Carlo under the changed measure


@dataclass
class DualPolicies:
    """nu(k, x, i) -> (P, J) intensities in (0, m]; theta(k, x, i) -> (P,) in [0, n]."""

    nu: Callable
    theta: Callable


def evaluate_dual_mc(spec: ModelSpec, params: PenaltyParams, policies: DualPolicies,
                     time_grid: TimeGrid, n_paths: int, seed: int, x0=None,
                     mark0: int = 0) -> tuple[float, float]:
    """Monte Carlo estimate of G_0(nu, theta) with its standard error.

    Paths are simulated directly under the nu-intensity: per step the mark
    moves to j != I with probability dt nu_j lam_j; X takes an Euler step with
    the old mark.  The running discount is the product of (1 - theta dt).
    """
    d = spec.dim_x
    x0 = np.zeros(d) if x0 is None else np.broadcast_to(np.asarray(x0, float), (d,))
    _require_exogenous_gain(spec, x0[None, :])
    n, m = params.n, params.m
    dt, times, K = time_grid.dt, time_grid.times, time_grid.steps
    lam = np.asarray(spec.marks.weights)
    J = len(lam)
    rng = np.random.default_rng(seed)
    X = np.repeat(x0[None, :], n_paths, axis=0)
    I = np.full(n_paths, mark0, dtype=np.int64)
    disc = np.ones(n_paths)
    acc = np.zeros(n_paths)
    for k in range(K):
        nu = np.broadcast_to(np.asarray(policies.nu(k, X, I), float), (n_paths, J))
        th = np.broadcast_to(np.asarray(policies.theta(k, X, I), float), (n_paths,))
        if np.any(nu <= 0) or np.any(nu > m) or np.any(th < 0) or np.any(th > n):
            raise DualError(f"policy outside its bounds at step {k}")
        rates = nu * lam * dt
        rates[np.arange(n_paths), I] = 0.0
        if np.any(rates.sum(axis=1) > 1):
            raise DualError("jump probability per step exceeds one; refine the time grid")
        f = np.empty(n_paths)
        Xn = np.empty_like(X)
        dW = rng.standard_normal((n_paths, d)) * math.sqrt(dt)
        for j in range(J):
            sel = I == j
            if not np.any(sel):
                continue
            f[sel] = spec.f(X[sel], j, np.zeros(sel.sum()), np.zeros((sel.sum(), d)))
            Xn[sel] = (X[sel] + spec.b(X[sel], j) * dt
                       + np.einsum("pij,pj->pi", spec.sigma(X[sel], j), dW[sel]))
        u = spec.u(times[k], X)
        nxt_disc = disc * (1.0 - th * dt)
        acc += nxt_disc * dt * f + disc * th * dt * u
        disc = nxt_disc
        cum = np.cumsum(rates, axis=1)
        draw = rng.random(n_paths)
        jumped = draw < cum[:, -1]
        new = np.argmax(draw[:, None] < cum, axis=1)
        I = np.where(jumped, new, I)
        X = Xn
    acc += disc * spec.g(X)
    se = float(acc.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else float("nan")
    return float(acc.mean()), se


# ---------------------------------------------------------------------------
# limit-order diagnostics


@dataclass
class LimitDiagnostic:
    m_values: list
    sup_inf_values: list  # v^m at the reference state: sup over V_m, inf over Theta
    vi_value: float
    n_values: list
    opposite_values: list  # v^{n, m_max}: inf over Theta_n, sup over V (truncated at m_max)
    opposite_gap: float  # v^{n_max, m_max} - v^{m_max}; never asserted to vanish

    def sup_inf_monotone(self, tol: float = 1e-9) -> bool:
        return all(b >= a - tol for a, b in zip(self.sup_inf_values, self.sup_inf_values[1:]))


def limit_order_diagnostic(spec: ModelSpec, grid: Grid, x0, mark0: int, m_values, n_values
                           ) -> LimitDiagnostic:
    from .pde import solve_hjb_isaacs, solve_penalized, solve_reflected_penalized

    m_values = sorted(m_values)
    n_values = sorted(n_values)
    m_max = m_values[-1]
    check_cfl(spec, grid, n_values[-1], m_max)
    vm = [solve_reflected_penalized(spec, grid, m).at(x0, mark0) for m in m_values]
    vi = solve_hjb_isaacs(spec, grid).at(x0, 0)
    opp = [solve_penalized(spec, grid, PenaltyParams(n, m_max)).at(x0, mark0)
           for n in n_values]
    return LimitDiagnostic(m_values, vm, vi, n_values, opp, opp[-1] - vm[-1])


def gap_report_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["n", "m", "sup_inf", "inf_sup", "gap", "bound", "penalized_value"]
    w.writerow(cols)
    for r in rows:
        w.writerow([repr(float(r[c])) for c in cols])
    return buf.getvalue()
