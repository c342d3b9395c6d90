"""Monotone explicit finite-difference solvers on a truncated box.

Three backward problems share one stencil:

* ``solve_penalized``: v^{n,m}, jump constraint and obstacle both penalized;
* ``solve_reflected_penalized``: v^m, obstacle enforced by projection;
* ``solve_hjb_isaacs``: the limiting variational inequality (sup over marks,
  min with the obstacle).

One backward step is split in two.  The transport step

    w = v + dt * (L^a v + f(x, a, v, sigma^T D v) + m sum_j lam_j (v(., a_j) - v(., a))_+)

is followed by the obstacle step ``v <- w - n dt (w - u)_+`` (penalty) or
``v <- min(w, u)`` (projection).  With ``n dt = 1`` the penalty step is the
projection.  Both steps are monotone under the CFL bound, so comparison
properties hold to rounding.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import RegularGridInterpolator

from .forward import TimeGrid
from .model import MarkSet, ModelSpec


class CFLError(ValueError):
    def __init__(self, msg: str, required_dt: float):
        super().__init__(msg)
        self.required_dt = required_dt


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class Grid:
    axes: tuple  # one 1-D node array per dimension
    marks: MarkSet
    time_grid: TimeGrid

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    @property
    def h(self) -> tuple:
        return tuple(float(a[1] - a[0]) for a in self.axes)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    @property
    def nodes(self) -> np.ndarray:
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @property
    def multi_index(self) -> np.ndarray:
        return np.array(np.unravel_index(np.arange(self.n_nodes), self.shape))

    @property
    def strides(self) -> tuple:
        st, acc = [], 1
        for n in reversed(self.shape):
            st.append(acc)
            acc *= n
        return tuple(reversed(st))

    def interior_mask(self) -> np.ndarray:
        mi = self.multi_index
        mask = np.ones(self.n_nodes, dtype=bool)
        for i, n in enumerate(self.shape):
            mask &= (mi[i] > 0) & (mi[i] < n - 1)
        return mask

    def with_steps(self, steps: int) -> "Grid":
        return replace(self, time_grid=TimeGrid(self.time_grid.horizon, steps))


def build_grid(box, nodes_per_dim, marks: MarkSet, time_grid: TimeGrid, x0=None) -> Grid:
    box = np.asarray(box, dtype=float)
    if box.ndim == 1:
        box = box[None, :]
    nodes = np.broadcast_to(np.asarray(nodes_per_dim, dtype=int), (box.shape[0],))
    axes = []
    for (lo, hi), n in zip(box, nodes):
        if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
            raise ValueError(f"degenerate box [{lo}, {hi}]")
        if n < 3:
            raise ValueError("need at least 3 nodes per dimension")
        axes.append(np.linspace(lo, hi, int(n)))
    if x0 is not None:
        x0 = np.broadcast_to(np.asarray(x0, dtype=float), (len(axes),))
        for (lo, hi), xi in zip(box, x0):
            if not lo <= xi <= hi:
                raise ValueError(f"initial point {xi} outside box [{lo}, {hi}]")
    return Grid(axes=tuple(axes), marks=marks, time_grid=time_grid)


# ---------------------------------------------------------------------------
# stencil assembly


def dynkin_matrix(spec: ModelSpec, grid: Grid, mark_index: int) -> sp.csr_matrix:
    """Sparse matrix of b . D + 1/2 tr(sigma sigma^T D^2) for one mark.

    Interior first derivatives are central where the diffusion dominates the
    drift (a_ii >= |b_i| h) and upwind elsewhere.  At an edge the second
    derivative is zero and only inward-pointing drift contributes, through an
    upwind difference.  Cross derivatives (d = 2) use the sign-adapted
    seven-point stencil at interior nodes.
    """
    X = grid.nodes
    N, d = X.shape
    b = spec.b(X, mark_index)
    s = spec.sigma(X, mark_index)
    if not (np.all(np.isfinite(b)) and np.all(np.isfinite(s))):
        raise SolverError(f"non-finite coefficients for mark {mark_index}")
    a = np.einsum("nik,njk->nij", s, s)
    mi = grid.multi_index
    idx = np.arange(N)
    rows, cols, vals = [], [], []
    diag = np.zeros(N)

    def add(sel, offset, coef):
        rows.append(idx[sel])
        cols.append(idx[sel] + offset)
        vals.append(coef[sel])

    for i in range(d):
        h, st, n_i = grid.h[i], grid.strides[i], grid.shape[i]
        lo, hi = mi[i] == 0, mi[i] == n_i - 1
        inner = ~(lo | hi)
        aii, bi = a[:, i, i], b[:, i]
        central = aii >= np.abs(bi) * h
        cp = np.where(central, aii / (2 * h * h) + bi / (2 * h),
                      aii / (2 * h * h) + np.maximum(bi, 0) / h)
        cm = np.where(central, aii / (2 * h * h) - bi / (2 * h),
                      aii / (2 * h * h) + np.maximum(-bi, 0) / h)
        add(inner, st, cp)
        add(inner, -st, cm)
        diag[inner] -= cp[inner] + cm[inner]
        c_lo = np.maximum(bi, 0) / h
        c_hi = np.maximum(-bi, 0) / h
        add(lo, st, c_lo)
        add(hi, -st, c_hi)
        diag[lo] -= c_lo[lo]
        diag[hi] -= c_hi[hi]

    if d == 2:
        inner2 = grid.interior_mask()
        h0, h1 = grid.h
        s0, s1 = grid.strides
        a12 = a[:, 0, 1]
        c = np.abs(a12) / (2 * h0 * h1)
        pos = inner2 & (a12 > 0)
        neg = inner2 & (a12 < 0)
        for sel, diag_offsets in ((pos, (s0 + s1, -s0 - s1)), (neg, (s0 - s1, -s0 + s1))):
            for off in diag_offsets:
                add(sel, off, c)
            for off in (s0, -s0, s1, -s1):
                add(sel, off, -c)
            diag[sel] += 2 * c[sel]
    elif d > 2:
        raise SolverError("grid solvers support d <= 2")

    rows.append(idx)
    cols.append(idx)
    vals.append(diag)
    L = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(N, N))
    L.sum_duplicates()
    return L


def gradient_matrices(grid: Grid) -> list:
    """Central differences inside, one-sided at the edges."""
    N = grid.n_nodes
    mi = grid.multi_index
    idx = np.arange(N)
    mats = []
    for i in range(grid.dim):
        h, st, n_i = grid.h[i], grid.strides[i], grid.shape[i]
        lo, hi = mi[i] == 0, mi[i] == n_i - 1
        inner = ~(lo | hi)
        r = np.concatenate([idx[inner], idx[inner], idx[lo], idx[lo], idx[hi], idx[hi]])
        c = np.concatenate([idx[inner] + st, idx[inner] - st, idx[lo] + st, idx[lo],
                            idx[hi], idx[hi] - st])
        v = np.concatenate([np.full(inner.sum(), 0.5 / h), np.full(inner.sum(), -0.5 / h),
                            np.full(lo.sum(), 1 / h), np.full(lo.sum(), -1 / h),
                            np.full(hi.sum(), 1 / h), np.full(hi.sum(), -1 / h)])
        mats.append(sp.csr_matrix((v, (r, c)), shape=(N, N)))
    return mats


def apply_dynkin(v_slice, spec: ModelSpec, grid: Grid, mark_index: int) -> np.ndarray:
    return dynkin_matrix(spec, grid, mark_index) @ np.asarray(v_slice, dtype=float).ravel()


def is_monotone(L: sp.csr_matrix, tol: float = 1e-14) -> bool:
    off = L - sp.diags(L.diagonal())
    return bool(off.nnz == 0 or off.data.min() >= -tol)


# ---------------------------------------------------------------------------
# CFL


@dataclass(frozen=True)
class PenaltyParams:
    n: float = 0.0
    m: float = 0.0

    def __post_init__(self):
        if self.n < 0 or self.m < 0:
            raise ValueError("penalty intensities must be nonnegative")


def transport_rate(spec: ModelSpec, grid: Grid, m: float, operators=None) -> float:
    """Largest per-unit-time weight removed from a node by the transport step."""
    ops = operators or [dynkin_matrix(spec, grid, j) for j in range(spec.marks.size)]
    rate = 0.0
    f_z = float(spec.lipschitz_budget.get("f_z", 0.0))
    smax = 0.0
    if f_z:
        X = grid.nodes
        smax = max(float(np.abs(spec.sigma(X, j)).max()) for j in range(spec.marks.size))
    for j, L in enumerate(ops):
        r = float(-L.diagonal().min()) + spec.f_y_budget() + m * spec.marks.other_mass(j)
        r += f_z * smax * sum(1 / h for h in grid.h)
        rate = max(rate, r)
    return rate


def check_cfl(spec: ModelSpec, grid: Grid, n: float, m: float, operators=None) -> None:
    dt = grid.time_grid.dt
    rate = transport_rate(spec, grid, m, operators)
    if rate * dt > 1 + 1e-12:
        raise CFLError(f"CFL violated: dt={dt:.6g} but transport rate {rate:.6g} "
                       f"requires dt <= {1 / rate:.6g}", 1 / rate)
    if math.isfinite(n) and n * dt > 1 + 1e-12:
        raise CFLError(f"CFL violated: n*dt = {n * dt:.6g} > 1; requires dt <= {1 / n:.6g}",
                       1 / n)


def stable_steps(spec: ModelSpec, grid: Grid, n: float = 0.0, m: float = 0.0,
                 safety: float = 0.9) -> int:
    """Smallest step count meeting the CFL bound with the given safety factor."""
    rate = transport_rate(spec, grid, m)
    if math.isfinite(n):
        rate = max(rate, n)
    return max(1, math.ceil(spec.horizon * rate / safety))


# ---------------------------------------------------------------------------
# grid functions


@dataclass
class GridFunction:
    values: np.ndarray  # (time, node, mark)
    grid: Grid
    equation: str
    n: float | None = None
    m: float | None = None
    policy: np.ndarray | None = None  # argmax mark per (time, node) for the VI
    meta: dict = field(default_factory=dict)

    @property
    def times(self) -> np.ndarray:
        return self.grid.time_grid.times

    def slice(self, k: int, mark: int = 0) -> np.ndarray:
        return self.values[k, :, mark].reshape(self.grid.shape)

    def at(self, x, mark: int = 0, k: int = 0) -> float:
        """Value at an arbitrary point, linear interpolation in space."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if self.grid.dim == 1:
            return float(np.interp(x[0], self.grid.axes[0], self.values[k, :, mark]))
        interp = RegularGridInterpolator(self.grid.axes, self.slice(k, mark))
        return float(interp(x[None, :])[0])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        nm = f"n={_fmt(self.n)} m={_fmt(self.m)}"
        buf.write(f"# equation={self.equation} {nm}\n")
        w.writerow(["t"] + [f"x{i + 1}" for i in range(self.grid.dim)] + ["mark", "value"])
        X = self.grid.nodes
        for k, t in enumerate(self.times):
            for j in range(self.values.shape[2]):
                for p in range(X.shape[0]):
                    w.writerow([repr(float(t))] + [repr(float(c)) for c in X[p]]
                               + [j, repr(float(self.values[k, p, j]))])
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return "-"
    return repr(float(v))


class _Stepper:
    """Precomputed operators for the transport step."""

    def __init__(self, spec: ModelSpec, grid: Grid, m: float):
        self.spec, self.grid, self.m = spec, grid, m
        self.X = grid.nodes
        self.ops = [dynkin_matrix(spec, grid, j) for j in range(spec.marks.size)]
        self.grads = gradient_matrices(grid)
        self.sig = [spec.sigma(self.X, j) for j in range(spec.marks.size)]
        self.lam = np.asarray(spec.marks.weights)

    def z(self, v_col, j):
        grad = np.stack([D @ v_col for D in self.grads], axis=1)  # (N, d)
        return np.einsum("nik,ni->nk", self.sig[j], grad)

    def drive(self, v_col, j):
        """L^a v + f for mark j."""
        return self.ops[j] @ v_col + self.spec.f(self.X, j, v_col, self.z(v_col, j))

    def transport(self, v, dt):
        w = np.empty_like(v)
        for j in range(v.shape[1]):
            w[:, j] = v[:, j] + dt * self.drive(v[:, j], j)
        if self.m > 0 and v.shape[1] > 1:
            w += dt * self.m * jump_penalty(v, self.lam)
        return w


def jump_penalty(v: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """sum_j lam_j (v[:, j] - v[:, a])_+ for every column a."""
    diff = v[:, None, :] - v[:, :, None]  # [node, a, j] = v_j - v_a
    return np.maximum(diff, 0.0) @ weights


def _check_finite(v, k, what):
    if not np.all(np.isfinite(v)):
        raise SolverError(f"non-finite value in {what} at time index {k}")


def _terminal(spec: ModelSpec, grid: Grid, n_marks: int) -> np.ndarray:
    g = np.asarray(spec.g(grid.nodes), dtype=float)
    return np.repeat(g[:, None], n_marks, axis=1)


def solve_penalized(spec: ModelSpec, grid: Grid, params: PenaltyParams) -> GridFunction:
    n, m = params.n, params.m
    if not math.isfinite(n):
        return solve_reflected_penalized(spec, grid, m)
    st = _Stepper(spec, grid, m)
    check_cfl(spec, grid, n, m, st.ops)
    tg = grid.time_grid
    dt, times = tg.dt, tg.times
    J = spec.marks.size
    out = np.empty((tg.steps + 1, grid.n_nodes, J))
    out[-1] = _terminal(spec, grid, J)
    for k in range(tg.steps - 1, -1, -1):
        w = st.transport(out[k + 1], dt)
        if n > 0:
            u = np.asarray(spec.u(times[k], st.X), dtype=float)[:, None]
            w = w - n * dt * np.maximum(w - u, 0.0)
        _check_finite(w, k, "penalized solve")
        out[k] = w
    return GridFunction(out, grid, "penalized", n=n, m=m)


def solve_reflected_penalized(spec: ModelSpec, grid: Grid, m: float) -> GridFunction:
    st = _Stepper(spec, grid, m)
    check_cfl(spec, grid, 0.0, m, st.ops)
    tg = grid.time_grid
    dt, times = tg.dt, tg.times
    J = spec.marks.size
    out = np.empty((tg.steps + 1, grid.n_nodes, J))
    out[-1] = _terminal(spec, grid, J)
    for k in range(tg.steps - 1, -1, -1):
        w = st.transport(out[k + 1], dt)
        u = np.asarray(spec.u(times[k], st.X), dtype=float)[:, None]
        w = np.minimum(w, u)
        _check_finite(w, k, "reflected solve")
        out[k] = w
    return GridFunction(out, grid, "reflected", n=math.inf, m=m)


def solve_hjb_isaacs(spec: ModelSpec, grid: Grid) -> GridFunction:
    st = _Stepper(spec, grid, 0.0)
    check_cfl(spec, grid, 0.0, 0.0, st.ops)
    tg = grid.time_grid
    dt, times = tg.dt, tg.times
    J = spec.marks.size
    out = np.empty((tg.steps + 1, grid.n_nodes, 1))
    policy = np.zeros((tg.steps, grid.n_nodes), dtype=np.int64)
    out[-1, :, 0] = spec.g(grid.nodes)
    for k in range(tg.steps - 1, -1, -1):
        v = out[k + 1, :, 0]
        drives = np.stack([st.drive(v, j) for j in range(J)], axis=1)
        best = np.argmax(drives, axis=1)  # first maximizer: lowest mark index
        w = v + dt * drives[np.arange(len(v)), best]
        w = np.minimum(w, spec.u(times[k], st.X))
        _check_finite(w, k, "HJB-Isaacs solve")
        out[k, :, 0] = w
        policy[k] = best
    return GridFunction(out, grid, "hjb_isaacs", policy=policy)


def complementarity_residual(v: GridFunction, spec: ModelSpec) -> float:
    """max over interior nodes of |min(u - v, -D_t v - max_a [L^a v + f])|.

    The Hamiltonian is evaluated at the earlier time slice, so the residual
    measures the O(dt + h^2) consistency error rather than being zero by
    construction.
    """
    grid = v.grid
    st = _Stepper(spec, grid, 0.0)
    dt, times = grid.time_grid.dt, grid.time_grid.times
    inner = grid.interior_mask()
    worst = 0.0
    for k in range(grid.time_grid.steps):
        vk = v.values[k, :, 0]
        ham = np.max(np.stack([st.drive(vk, j) for j in range(spec.marks.size)]), axis=0)
        dv = -(v.values[k + 1, :, 0] - vk) / dt
        res = np.minimum(spec.u(times[k], st.X) - vk, dv - ham)
        worst = max(worst, float(np.abs(res[inner]).max()))
    return worst


def a_spread(v: GridFunction) -> float:
    """Largest spread of v across marks over all (t, x).

    Boundary marks of an ordered one-dimensional mark set are dropped only
    when at least two interior marks remain; otherwise all marks are used.
    """
    J = v.values.shape[2]
    if J < 2:
        raise ValueError("a_spread needs at least two marks")
    cols = spread_marks(v.grid.marks)
    vals = v.values[:, :, cols]
    return float((vals.max(axis=2) - vals.min(axis=2)).max())


def spread_marks(marks: MarkSet) -> list[int]:
    J = marks.size
    if J >= 4 and marks.points.shape[1] == 1:
        order = np.argsort(marks.points[:, 0])
        return sorted(int(i) for i in order[1:-1])
    return list(range(J))
