"""Euler simulation of the regime-switching pair (X, I).

X follows dX = b(X, I) dt + sigma(X, I) dW and the mark index I is reset to
a freshly drawn mark at the atoms of a Poisson random measure with intensity
``weights[j]`` per mark.  Jump times are snapped to the next grid node, so a
jump inside (t_k, t_{k+1}] takes effect from node k + 1 and the step from t_k
uses the old mark.
"""

from __future__ import annotations

import csv
import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import MarkSet, ModelSpec


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    horizon: float
    steps: int

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("need at least one time step")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.steps + 1)


def path_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for path ``index``; identical for any worker layout."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_jump_schedule(total_rate: float, horizon: float, seed, marks) -> list[tuple[float, int]]:
    """Atoms of the Poisson random measure on (0, T] x marks.

    ``marks`` is a MarkSet or a weight vector; marks are drawn with
    probability weights[j] / total.  ``total_rate`` sets the jump frequency.
    """
    if total_rate < 0:
        raise ValueError("total rate must be nonnegative")
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    weights = marks.weights if isinstance(marks, MarkSet) else np.asarray(marks, dtype=float)
    rng = _as_rng(seed)
    count = rng.poisson(total_rate * horizon) if total_rate > 0 else 0
    if count == 0:
        return []
    # uniform order statistics on (0, T]
    times = np.sort(horizon - rng.random(count) * horizon)
    idx = rng.choice(len(weights), size=count, p=weights / weights.sum())
    return [(float(t), int(j)) for t, j in zip(times, idx)]


@dataclass(frozen=True)
class PathBundle:
    times: np.ndarray  # (N+1,)
    X: np.ndarray  # (P, N+1, d)
    I: np.ndarray  # (P, N+1) mark indices
    dW: np.ndarray  # (P, N, d)
    jump_path: np.ndarray  # flattened jump events: path index,
    jump_node: np.ndarray  # node from which the new mark applies,
    jump_mark: np.ndarray  # and the new mark index
    mark_points: np.ndarray
    seed: int

    @property
    def n_paths(self) -> int:
        return self.X.shape[0]

    @property
    def steps(self) -> int:
        return self.X.shape[1] - 1

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def jump_counts(self) -> np.ndarray:
        return np.bincount(self.jump_path, minlength=self.n_paths)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.times, self.X, self.I, self.dW, self.jump_path, self.jump_node,
                    self.jump_mark):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _draw_paths(indices, seed, steps, d, dt, horizon, marks: MarkSet):
    dW = np.empty((len(indices), steps, d))
    events = []
    for row, i in enumerate(indices):
        rng = path_rng(seed, int(i))
        dW[row] = rng.standard_normal((steps, d)) * np.sqrt(dt)
        for t, j in sample_jump_schedule(marks.total_mass, horizon, rng, marks):
            node = min(steps, max(1, int(np.ceil(t / dt))))
            events.append((int(i), node, j))
    return dW, events


def simulate_paths(spec: ModelSpec, time_grid: TimeGrid, n_paths: int, seed: int,
                   x0=None, mark0: int = 0, threads: int = 1) -> PathBundle:
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    if not 0 <= mark0 < spec.marks.size:
        raise ValueError(f"initial mark {mark0} out of range")
    d, N, dt = spec.dim_x, time_grid.steps, time_grid.dt
    x0 = np.zeros(d) if x0 is None else np.broadcast_to(np.asarray(x0, dtype=float), (d,))

    chunks = np.array_split(np.arange(n_paths), max(1, min(threads, n_paths)))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(
                lambda idx: _draw_paths(idx, seed, N, d, dt, time_grid.horizon, spec.marks),
                chunks))
    else:
        parts = [_draw_paths(idx, seed, N, d, dt, time_grid.horizon, spec.marks)
                 for idx in chunks]
    dW = np.concatenate([p[0] for p in parts], axis=0)
    events = [e for p in parts for e in p[1]]

    I = np.full((n_paths, N + 1), mark0, dtype=np.int64)
    for path, node, j in events:  # events are time-sorted within each path
        I[path, node:] = j
    ev = np.array(events, dtype=np.int64).reshape(-1, 3)

    X = np.empty((n_paths, N + 1, d))
    X[:, 0] = x0
    for k in range(N):
        xk = X[:, k]
        nxt = np.empty_like(xk)
        for j in range(spec.marks.size):
            sel = I[:, k] == j
            if not np.any(sel):
                continue
            b = spec.b(xk[sel], j)
            s = spec.sigma(xk[sel], j)
            if not (np.all(np.isfinite(b)) and np.all(np.isfinite(s))):
                raise SimulationError(f"non-finite coefficient at step {k}, mark {j}")
            nxt[sel] = xk[sel] + b * dt + np.einsum("pij,pj->pi", s, dW[sel, k])
        X[:, k + 1] = nxt

    return PathBundle(times=time_grid.times, X=X, I=I, dW=dW, jump_path=ev[:, 0],
                      jump_node=ev[:, 1], jump_mark=ev[:, 2],
                      mark_points=np.asarray(spec.marks.points), seed=seed)


@dataclass(frozen=True)
class MomentEstimate:
    pointwise: np.ndarray  # E[|X_k|^p + |a_{I_k}|^p] per node
    pointwise_stderr: np.ndarray
    running_sup: np.ndarray  # E[sup_{j<=k} |X_j|^p + sup_{j<=k} |a_{I_j}|^p]


def empirical_moments(bundle: PathBundle, p: float) -> MomentEstimate:
    """Moment diagnostics; reported only, the growth constant is unknown."""
    if p < 2:
        raise ValueError("p must be >= 2")
    xs = np.linalg.norm(bundle.X, axis=2) ** p
    a = np.linalg.norm(bundle.mark_points[bundle.I], axis=2) ** p
    point = xs + a
    sup = np.maximum.accumulate(xs, axis=1) + np.maximum.accumulate(a, axis=1)
    n = bundle.n_paths
    se = point.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(point.shape[1])
    return MomentEstimate(point.mean(axis=0), se, sup.mean(axis=0))


def dump_bundle_csv(bundle: PathBundle, path) -> None:
    """Debug dump, one row per path per node: path, t, x_1..x_d, mark index."""
    d = bundle.X.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "t"] + [f"x{i + 1}" for i in range(d)] + ["mark"])
        for p in range(bundle.n_paths):
            for k, t in enumerate(bundle.times):
                w.writerow([p, repr(float(t))] + [repr(float(v)) for v in bundle.X[p, k]]
                           + [int(bundle.I[p, k])])
