"""Problem data shared by every solver: mark sets, model coefficients, validation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class ModelError(ValueError):
    """Raised when problem data violates a hard invariant."""


@dataclass(frozen=True)
class MarkSet:
    """Finite control set with intensity mass ``weights[j]`` (1/time) on ``points[j]``."""

    points: np.ndarray  # shape (J, q)
    weights: np.ndarray  # shape (J,)

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def other_mass(self, j: int) -> float:
        """Intensity mass of all marks except ``j`` (jumps onto j itself do nothing)."""
        return self.total_mass - float(self.weights[j])

    def point(self, j: int) -> np.ndarray:
        return self.points[j]


def build_mark_set(points, weights) -> MarkSet:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    w = np.asarray(weights, dtype=float).ravel()
    if pts.shape[0] != w.shape[0]:
        raise ModelError(f"{pts.shape[0]} points but {w.shape[0]} weights")
    if w.shape[0] == 0:
        raise ModelError("empty mark set")
    if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(w)):
        raise ModelError("mark points and weights must be finite")
    if np.any(w < 0):
        raise ModelError("weights must be nonnegative")
    if not np.any(w > 0):
        raise ModelError("at least one weight must be strictly positive")
    for i in range(len(pts)):
        for j in range(i):
            if np.array_equal(pts[i], pts[j]):
                raise ModelError(f"duplicate mark points at indices {j} and {i}")
    pts.setflags(write=False)
    w.setflags(write=False)
    return MarkSet(points=pts, weights=w)


# Coefficient callbacks are vectorized over nodes:
#   drift(x, a)       x: (N, d), a: (q,) -> (N, d)
#   diffusion(x, a)   -> (N, d, d)
#   running_gain(x, a, y, z)  y: (N,), z: (N, d) -> (N,)
#   terminal(x)       -> (N,)
#   obstacle(t, x)    -> (N,)


@dataclass(frozen=True)
class ModelSpec:
    dim_x: int
    marks: MarkSet
    horizon: float
    drift: Callable
    diffusion: Callable
    running_gain: Callable
    terminal: Callable
    obstacle: Callable
    lipschitz_budget: dict = field(default_factory=dict)
    tag: str = ""

    def __post_init__(self):
        if self.dim_x < 1:
            raise ModelError("dim_x must be >= 1")
        if not self.horizon > 0:
            raise ModelError("horizon must be positive")

    # Evaluation helpers that fix array shapes for the solvers.

    def b(self, x: np.ndarray, j: int) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.broadcast_to(np.asarray(self.drift(x, self.marks.points[j]), dtype=float),
                               x.shape)

    def sigma(self, x: np.ndarray, j: int) -> np.ndarray:
        x = np.atleast_2d(x)
        s = np.asarray(self.diffusion(x, self.marks.points[j]), dtype=float)
        return np.broadcast_to(s, (x.shape[0], self.dim_x, self.dim_x))

    def f(self, x, j, y, z) -> np.ndarray:
        x = np.atleast_2d(x)
        out = np.asarray(self.running_gain(x, self.marks.points[j], y, z), dtype=float)
        return np.broadcast_to(out, (x.shape[0],))

    def g(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.broadcast_to(np.asarray(self.terminal(x), dtype=float), (x.shape[0],))

    def u(self, t: float, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.broadcast_to(np.asarray(self.obstacle(t, x), dtype=float), (x.shape[0],))

    def f_y_budget(self) -> float:
        return float(self.lipschitz_budget.get("f_y", 0.0))

    def gain_depends_on(self, x, which: str = "yz") -> bool:
        """Probe whether f reacts to y (and/or z) at the given points."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        zero_y, zero_z = np.zeros(len(x)), np.zeros_like(x)
        probes = []
        if "y" in which:
            probes += [(zero_y + 1.0, zero_z), (zero_y - 3.0, zero_z)]
        if "z" in which:
            probes += [(zero_y, zero_z + 1.0), (zero_y, zero_z - 2.0)]
        for j in range(self.marks.size):
            base = self.f(x, j, zero_y, zero_z)
            for y, z in probes:
                if not np.array_equal(self.f(x, j, y, z), base):
                    return True
        return False


@dataclass
class Violation:
    kind: str
    node: int
    x: tuple
    mark: int | None = None
    detail: str = ""


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)
    advisories: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def nodes(self, kind: str) -> list[int]:
        return sorted({v.node for v in self.violations if v.kind == kind})

    def summary(self) -> str:
        if self.ok:
            return f"valid ({len(self.advisories)} advisories)"
        kinds = sorted({v.kind for v in self.violations})
        return f"{len(self.violations)} violations: " + ", ".join(kinds)


def _probe_points(spec: ModelSpec, probe_grid) -> np.ndarray:
    pts = np.asarray(probe_grid, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None] if spec.dim_x == 1 else pts[None, :]
    if pts.shape[0] == 0:
        raise ModelError("probe grid is empty")
    if pts.shape[1] != spec.dim_x:
        raise ModelError(f"probe points have dimension {pts.shape[1]}, expected {spec.dim_x}")
    return pts


def validate_model(spec: ModelSpec, probe_grid) -> ValidationReport:
    """Check the data invariants at every probe point.

    Hard violations: terminal dominance ``u(T, x) >= g(x)`` and finiteness of
    b, sigma, f(., ., 0, 0), g, u.  Lipschitz estimates from difference
    quotients between consecutive probe points are advisory only.
    """
    pts = _probe_points(spec, probe_grid)
    report = ValidationReport()
    T = spec.horizon
    with np.errstate(all="ignore"):
        g = np.asarray(spec.g(pts), dtype=float)
        uT = np.asarray(spec.u(T, pts), dtype=float)
        u0 = np.asarray(spec.u(0.0, pts), dtype=float)

    for name, vals in (("terminal_nonfinite", g), ("obstacle_nonfinite", uT),
                       ("obstacle_nonfinite", u0)):
        for i in np.flatnonzero(~np.isfinite(vals)):
            report.violations.append(Violation(name, int(i), tuple(pts[i])))
    for i in np.flatnonzero(np.isfinite(g) & np.isfinite(uT) & (uT < g)):
        report.violations.append(Violation(
            "terminal_dominance", int(i), tuple(pts[i]),
            detail=f"u(T,x)={uT[i]!r} < g(x)={g[i]!r}"))

    zeros_y = np.zeros(len(pts))
    zeros_z = np.zeros_like(pts)
    for j in range(spec.marks.size):
        with np.errstate(all="ignore"):
            b = spec.b(pts, j)
            s = spec.sigma(pts, j)
            f0 = spec.f(pts, j, zeros_y, zeros_z)
        for name, vals in (("drift_nonfinite", b.reshape(len(pts), -1)),
                           ("diffusion_nonfinite", s.reshape(len(pts), -1)),
                           ("gain_nonfinite", f0.reshape(len(pts), -1))):
            bad = np.flatnonzero(~np.all(np.isfinite(vals), axis=1))
            for i in bad:
                report.violations.append(Violation(name, int(i), tuple(pts[i]), mark=j))
        if len(pts) >= 2:
            _lipschitz_advisory(report, spec, pts, j, b, s)
    return report


def _lipschitz_advisory(report, spec, pts, j, b, s):
    budget = spec.lipschitz_budget.get("forward")
    dx = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    keep = dx > 0
    if not np.any(keep):
        return
    with np.errstate(all="ignore"):
        db = np.linalg.norm(np.diff(b, axis=0), axis=1)
        ds = np.linalg.norm(np.diff(s.reshape(len(pts), -1), axis=0), axis=1)
        q = (db + ds)[keep] / dx[keep]
    q = q[np.isfinite(q)]
    if q.size == 0:
        return
    qmax = float(q.max())
    if budget is not None and qmax > budget:
        report.advisories.append(
            f"mark {j}: forward difference quotient {qmax:.4g} exceeds budget {budget:.4g}")
    elif budget is None and qmax > 0:
        report.advisories.append(f"mark {j}: forward Lipschitz estimate {qmax:.4g}")


def supersolution_bound(spec: ModelSpec, C_bar: float, rho: float, r: float, t: float,
                        x) -> float:
    """Polynomial-growth envelope C_bar * exp(rho (T - t)) * (1 + |x|^r)."""
    if r < 2:
        raise ModelError("growth exponent r must be >= 2")
    if not C_bar > 0 or rho < 0:
        raise ModelError("need C_bar > 0 and rho >= 0")
    if not 0 <= t <= spec.horizon:
        raise ModelError(f"t={t} outside [0, {spec.horizon}]")
    norm = float(np.linalg.norm(np.atleast_1d(np.asarray(x, dtype=float))))
    return C_bar * math.exp(rho * (spec.horizon - t)) * (1.0 + norm**r)
