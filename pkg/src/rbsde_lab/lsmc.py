"""Least-squares Monte Carlo for the doubly penalized BSDE on simulated paths.

Backward step k, for every mark j:

    c_j(x)  ~ E[ Y_{k+1} | X_k = x, mark j held over the step ]
    w_j     = c_j + dt [ f(x, a_j, c_j, z_j) + m sum_i lam_i (c_i - c_j)_+ ]
    V_k(x, j) = w_j - n dt (w_j - u)_+      (or min(w_j, u) when n = inf)

The regression for mark j uses every path.  Paths currently in regime j
contribute their realized cashflow (Longstaff-Schwartz style, with a jump at
k + 1 swapped back to the old mark through the fitted values); the others
contribute the fitted value function at the one-step successor they would
have reached under mark j with the same Brownian increment.  Every mark thus
gets a full sample at every step.  The generator and the penalties see the
lagged value c_j in place of Y_k.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement

import numpy as np

from .forward import PathBundle
from .model import ModelSpec
from .pde import PenaltyParams

RIDGE = 1e-10


class RegressionError(RuntimeError):
    pass


def regression_fit(features, targets) -> np.ndarray:
    """Least squares through the normal equations.

    A ridge term RIDGE * mean(diag) is added when the Gram matrix is rank
    deficient.  ``targets`` may carry several columns.
    """
    F = np.asarray(features, dtype=float)
    T = np.asarray(targets, dtype=float)
    if F.ndim != 2:
        raise RegressionError("features must be a 2-D design matrix")
    if F.shape[0] < F.shape[1]:
        raise RegressionError(f"{F.shape[0]} rows for {F.shape[1]} columns")
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(T))):
        raise RegressionError("non-finite regression input")
    if not np.any(F):
        raise RegressionError("all-zero design matrix")
    A = F.T @ F
    rhs = F.T @ T
    if np.linalg.matrix_rank(A) < A.shape[0]:
        A = A + RIDGE * max(float(np.mean(np.diag(A))), 1.0) * np.eye(A.shape[0])
    try:
        return np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise RegressionError(str(exc)) from exc


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomials of total degree <= ``degree`` in standardized coordinates.

    With ``obstacle_feature`` the obstacle value u(t, x) joins the state as
    one more coordinate, which lets a low degree follow the kink of the
    stopping region.
    """

    degree: int = 2
    obstacle_feature: bool = False

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be >= 0")

    def coordinates(self, spec: ModelSpec, t: float, X: np.ndarray) -> np.ndarray:
        if not self.obstacle_feature:
            return X
        return np.column_stack([X, spec.u(t, X)])

    def scaler(self, X: np.ndarray) -> tuple:
        mu = X.mean(axis=0)
        sd = X.std(axis=0)
        live = sd > 1e-12 * np.maximum(1.0, np.abs(mu))
        return mu, np.where(live, sd, 1.0), live

    def features(self, X: np.ndarray, scale: tuple) -> np.ndarray:
        mu, sd, live = scale
        Z = ((X - mu) / sd)[:, live]
        cols = [np.ones(len(X))]
        for deg in range(1, self.degree + 1):
            for combo in combinations_with_replacement(range(Z.shape[1]), deg):
                cols.append(np.prod(Z[:, combo], axis=1))
        return np.stack(cols, axis=1)


@dataclass
class BsdeSolution:
    Y: np.ndarray  # (P, N+1)
    Z: np.ndarray  # (P, N, d)
    L: np.ndarray  # (P, N+1, J): V(t, X, a_j) - V(t, X, a_I)
    K_plus: np.ndarray  # (P, N+1), cumulative, K(0) = 0
    K_minus: np.ndarray
    cashflow0: np.ndarray  # (P,) realized time-0 cashflows, used for the error bar
    Y0: float
    stderr: float
    params: PenaltyParams
    basis: RegressionBasis
    dK_plus: np.ndarray = field(repr=False, default=None)  # (P, N)
    dK_minus: np.ndarray = field(repr=False, default=None)
    f_path: np.ndarray = field(repr=False, default=None)  # (P, N) generator along the path
    Y_next_frozen: np.ndarray = field(repr=False, default=None)  # (P, N) V_{k+1}(X_{k+1}, I_k)

    @property
    def n_paths(self) -> int:
        return self.Y.shape[0]


class _StepModel:
    """Fitted coefficients of one time step, evaluable at arbitrary points."""

    def __init__(self, scale, beta_c, beta_z):
        self.scale, self.beta_c, self.beta_z = scale, beta_c, beta_z


def _values(spec, basis, step, t, X, params, dt):
    """(c, w, V, zhat) for every mark at points X, from a fitted step."""
    Phi = basis.features(basis.coordinates(spec, t, X), step.scale)
    c = Phi @ step.beta_c  # (P, J)
    J = c.shape[1]
    zhat = np.einsum("pk,jkd->pjd", Phi, step.beta_z)  # (P, J, d)
    lam = np.asarray(spec.marks.weights)
    w = np.empty_like(c)
    for j in range(J):
        w[:, j] = c[:, j] + dt * spec.f(X, j, c[:, j], zhat[:, j])
    if params.m > 0 and J > 1:
        w += dt * params.m * (np.maximum(c[:, None, :] - c[:, :, None], 0.0) @ lam)
    u = spec.u(t, X)[:, None]
    if math.isinf(params.n):
        V = np.minimum(w, u)
    else:
        V = w - params.n * dt * np.maximum(w - u, 0.0)
    return c, w, V, zhat


def solve_bsde(spec: ModelSpec, bundle: PathBundle, params: PenaltyParams,
               basis: RegressionBasis | None = None) -> BsdeSolution:
    basis = basis or RegressionBasis()
    P, N = bundle.n_paths, bundle.steps
    d, J = spec.dim_x, spec.marks.size
    if bundle.X.shape[2] != d or bundle.mark_points.shape[0] != J:
        raise ValueError("bundle was not simulated from this spec")
    dt, times = bundle.dt, bundle.times
    lam = np.asarray(spec.marks.weights)
    rows = np.arange(P)
    X, I, dW = bundle.X, bundle.I, bundle.dW

    V = np.empty((P, N + 1, J))
    V[:, N] = np.asarray(spec.g(X[:, N]))[:, None]
    C = np.asarray(spec.g(X[:, N]), dtype=float).copy()  # realized cashflow
    Z = np.zeros((P, N, d))
    dKp = np.zeros((P, N))
    dKm = np.zeros((P, N))
    f_path = np.zeros((P, N))
    y_next = np.empty((P, N))
    nxt = None  # fitted model of step k + 1

    for k in range(N - 1, -1, -1):
        Xk, Ik = X[:, k], I[:, k]
        y_next[:, k] = V[rows, k + 1, Ik]
        # jump at k + 1: swap the realized cashflow back to the old mark
        own = C - V[rows, k + 1, I[:, k + 1]] + y_next[:, k]
        targets = np.empty((P, J))
        for j in range(J):
            sel = Ik == j
            targets[sel, j] = own[sel]
            if np.all(sel):
                continue
            other = ~sel
            xo = Xk[other]
            succ = (xo + spec.b(xo, j) * dt
                    + np.einsum("pij,pj->pi", spec.sigma(xo, j), dW[other, k]))
            if nxt is None:
                targets[other, j] = spec.g(succ)
            else:
                targets[other, j] = _values(spec, basis, nxt, times[k + 1], succ, params,
                                            dt)[2][:, j]
        coords = basis.coordinates(spec, times[k], Xk)
        scale = basis.scaler(coords)
        Phi = basis.features(coords, scale)
        beta_c = regression_fit(Phi, targets)
        zt = targets[:, :, None] * dW[:, k][:, None, :] / dt  # (P, J, d)
        beta_z = np.stack([regression_fit(Phi, zt[:, j]) for j in range(J)])
        step = _StepModel(scale, beta_c, beta_z)
        c, w, Vk, zhat = _values(spec, basis, step, times[k], Xk, params, dt)
        V[:, k] = Vk

        ci, wi = c[rows, Ik], w[rows, Ik]
        Z[:, k] = zhat[rows, Ik]
        f_path[:, k] = _own_gain(spec, Xk, Ik, ci, Z[:, k])
        if J > 1 and params.m > 0:
            dKp[:, k] = dt * params.m * (np.maximum(c - ci[:, None], 0.0) @ lam)
        u = spec.u(times[k], Xk)
        if math.isinf(params.n):
            dKm[:, k] = np.maximum(wi - u, 0.0)
            C = np.where(wi >= u, u, own + dt * f_path[:, k] + dKp[:, k])
        else:
            dKm[:, k] = params.n * dt * np.maximum(wi - u, 0.0)
            C = own + dt * f_path[:, k] + dKp[:, k] - dKm[:, k]
        if not np.all(np.isfinite(C)):
            raise RegressionError(f"non-finite cashflow at step {k}")
        nxt = step

    Y = V[rows[:, None], np.arange(N + 1)[None, :], I]
    L = V - Y[:, :, None]
    Kp = np.concatenate([np.zeros((P, 1)), np.cumsum(dKp, axis=1)], axis=1)
    Km = np.concatenate([np.zeros((P, 1)), np.cumsum(dKm, axis=1)], axis=1)
    se = float(C.std(ddof=1) / math.sqrt(P)) if P > 1 else float("nan")
    return BsdeSolution(Y=Y, Z=Z, L=L, K_plus=Kp, K_minus=Km, cashflow0=C,
                        Y0=float(Y[:, 0].mean()), stderr=se, params=params, basis=basis,
                        dK_plus=dKp, dK_minus=dKm, f_path=f_path, Y_next_frozen=y_next)


def _own_gain(spec, X, I, y, z):
    out = np.empty(len(X))
    for j in range(spec.marks.size):
        sel = I == j
        if np.any(sel):
            out[sel] = spec.f(X[sel], j, y[sel], z[sel])
    return out


@dataclass
class ResidualReport:
    R_jump: float
    R_obst: float
    R_skor: float
    stderr: dict  # per residual

    def as_dict(self) -> dict:
        return {"R_jump": self.R_jump, "R_obst": self.R_obst, "R_skor": self.R_skor}


def constraint_residuals(sol: BsdeSolution, spec: ModelSpec, bundle: PathBundle
                         ) -> ResidualReport:
    """Path averages of the jump-constraint, obstacle and Skorohod defects.

    R_skor sums |u - Y| dK^- so that the obstacle overshoot of a finite n
    counts as a defect instead of cancelling.
    """
    dt, N = bundle.dt, bundle.steps
    lam = np.asarray(spec.marks.weights)
    jump = (np.maximum(sol.L[:, :N], 0.0) @ lam).sum(axis=1) * dt
    U = np.stack([spec.u(t, bundle.X[:, k]) for k, t in enumerate(bundle.times[:N])], axis=1)
    gap = U - sol.Y[:, :N]
    obst = np.maximum(-gap, 0.0).sum(axis=1) * dt
    skor = (np.abs(gap) * sol.dK_minus).sum(axis=1)
    P = sol.n_paths

    def se(a):
        return float(a.std(ddof=1) / math.sqrt(P)) if P > 1 else float("nan")

    return ResidualReport(float(jump.mean()), float(obst.mean()), float(skor.mean()),
                          {"R_jump": se(jump), "R_obst": se(obst), "R_skor": se(skor)})


def one_step_residuals(sol: BsdeSolution, bundle: PathBundle) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error per step of the discrete backward identity

        Y_{k+1} - Y_k + dt f + dK+ - dK- - Z dW,

    with Y_{k+1} read at the mark held over the step, which removes the
    uncompensated jump term.  The error bar adds the standard errors of the
    drift part and of Z dW: the two sample means are strongly correlated, so
    the standard error of their difference alone understates the noise.
    """
    dt = bundle.dt
    zdw = np.einsum("pkd,pkd->pk", sol.Z, bundle.dW)
    a = sol.Y_next_frozen - sol.Y[:, :-1] + dt * sol.f_path + sol.dK_plus - sol.dK_minus
    P = a.shape[0]
    se = (a.std(axis=0, ddof=1) + zdw.std(axis=0, ddof=1)) / math.sqrt(P)
    return (a - zdw).mean(axis=0), se


def quartile_increments(sol: BsdeSolution, quarters: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Mean and standard error of K^- increments over equal slices of [0, T]."""
    N = sol.K_minus.shape[1] - 1
    edges = np.linspace(0, N, quarters + 1).round().astype(int)
    inc = np.stack([sol.K_minus[:, b] - sol.K_minus[:, a] for a, b in zip(edges, edges[1:])],
                   axis=1)
    P = inc.shape[0]
    return inc.mean(axis=0), inc.std(axis=0, ddof=1) / math.sqrt(P)


def pathwise_violation_rate(lower: BsdeSolution, upper: BsdeSolution,
                            quarters: int = 4) -> float:
    """Share of (path, slice) pairs where the K^- increment under ``lower``
    exceeds the one under ``upper``.  Diagnostic only: regression noise breaks
    the ordering path by path even when the averages are ordered.
    """
    if lower.K_minus.shape != upper.K_minus.shape:
        raise ValueError("solutions come from different bundles")
    N = lower.K_minus.shape[1] - 1
    edges = np.linspace(0, N, quarters + 1).round().astype(int)
    bad = 0
    for a, b in zip(edges, edges[1:]):
        d_lo = lower.K_minus[:, b] - lower.K_minus[:, a]
        d_up = upper.K_minus[:, b] - upper.K_minus[:, a]
        bad += int(np.count_nonzero(d_lo > d_up + 1e-12))
    return bad / (lower.n_paths * quarters)


def summary_text(sol: BsdeSolution, report: ResidualReport | None = None) -> str:
    buf = io.StringIO()
    items = {"Y0": sol.Y0, "stderr": sol.stderr, "n": sol.params.n, "m": sol.params.m,
             "paths": sol.n_paths, "degree": sol.basis.degree}
    if report is not None:
        items.update(report.as_dict())
    for k, v in items.items():
        buf.write(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n")
    return buf.getvalue()


def dump_solution_csv(sol: BsdeSolution, bundle: PathBundle, path) -> None:
    """Pathwise dump: path, t, Y, K_plus, K_minus."""
    with open(path, "w") as fh:
        fh.write("path,t,Y,K_plus,K_minus\n")
        for p in range(sol.n_paths):
            for k, t in enumerate(bundle.times):
                fh.write(f"{p},{float(t)!r},{float(sol.Y[p, k])!r},"
                         f"{float(sol.K_plus[p, k])!r},{float(sol.K_minus[p, k])!r}\n")
