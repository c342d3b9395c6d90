"""Experiment orchestration: schedules over (n, m), solver calls, CSV/JSON output."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentSpec
from .dual import build_chain, eps_saddle_sandwich, gap_report_csv, saddle_dp
from .forward import TimeGrid, simulate_paths
from .lsmc import (RegressionBasis, constraint_residuals, pathwise_violation_rate,
                   quartile_increments, solve_bsde)
from .model import validate_model
from .oracles import (TestProblem, binomial_american, compare_values, controller_stopper_dp,
                      get_problem, uncertain_vol_put)
from .pde import (CFLError, PenaltyParams, a_spread, solve_hjb_isaacs, solve_penalized,
                  stable_steps)

CONVERGENCE_COLUMNS = ["n", "m", "nodes", "dt", "value_at_reference_point", "a_spread",
                       "R_jump", "R_obst", "R_skor", "runtime_s"]


class ExperimentError(RuntimeError):
    pass


def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def emit_convergence_table(results) -> str:
    """CSV with the fixed convergence columns, rows sorted by (m, n, nodes).

    ``results`` is an iterable of dicts or a dict keyed by (n, m, level).
    Missing entries are written as empty fields.
    """
    rows = list(results.values()) if isinstance(results, dict) else list(results)
    rows.sort(key=lambda r: (float(r["m"]), float(r["n"]), int(r.get("nodes") or 0)))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CONVERGENCE_COLUMNS)
    for r in rows:
        w.writerow([_num(r.get(c)) for c in CONVERGENCE_COLUMNS])
    return buf.getvalue()


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    if isinstance(v, np.integer):
        return int(v)
    return v


@dataclass
class Manifest:
    out_dir: Path
    files: dict = field(default_factory=dict)  # label -> path
    summary: dict = field(default_factory=dict)

    def paths(self) -> list[Path]:
        return [self.files[k] for k in sorted(self.files)]


def resolve_problem(spec: ExperimentSpec) -> TestProblem:
    if not spec.inline:
        return get_problem(spec.problem)
    model = uncertain_vol_put(spec.horizon, spec.strike, spec.rate, spec.vols, spec.weights,
                              log_price=spec.log_price, discounted=spec.discounted,
                              tag="inline")
    if spec.log_price:
        c = math.log(spec.spot)
        box, x0 = (c - 2.5, c + 2.5), (c,)
    else:
        box, x0 = (0.0, 3.0 * spec.spot), (spec.spot,)
    return TestProblem("inline", model, box, 51, None, x0, seeds=(spec.seed,))


def _grid_for(spec: ExperimentSpec, prob: TestProblem):
    box = spec.box or prob.box
    nodes = spec.nodes or prob.nodes
    prob = TestProblem(prob.name, prob.spec, tuple(box), nodes, prob.steps, prob.x0,
                       prob.mark0, prob.seeds, prob.notes)
    if spec.steps is not None:
        return prob, prob.grid(steps=spec.steps)
    if prob.steps is not None:
        return prob, prob.grid()
    g = prob.grid(steps=1)
    n_fin = [n for n in spec.n_values if math.isfinite(n)]
    steps = stable_steps(prob.spec, g, max(n_fin, default=0.0), max(spec.m_values))
    return prob, g.with_steps(steps)


def run_experiment(spec: ExperimentSpec, threads: int = 1, out_dir=None) -> Manifest:
    """Run the selected solvers over the penalty schedule and write the outputs.

    The m-schedule is the outer loop; for each m the n-schedule runs inside,
    with n = inf meaning the projection solver.  Outputs depend only on the
    spec: ``threads`` changes the simulation layout, not the numbers.
    """
    prob, grid = _grid_for(spec, resolve_problem(spec))
    model = prob.spec
    mark0 = prob.mark0 if spec.mark0 is None else spec.mark0
    x0 = prob.x0
    out = Path(out_dir or spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest(out)
    summary = {"problem": prob.name, "nodes": grid.n_nodes, "steps": grid.time_grid.steps,
               "x0": list(x0), "mark0": mark0, "solvers": list(spec.solvers)}
    report = validate_model(model, grid.nodes)
    summary["validation"] = report.summary()
    if not report.ok:
        raise ExperimentError(f"model fails validation on the grid: {report.summary()}")

    rows = {}
    timings = {}

    def row(n, m):
        return rows.setdefault((n, m, 0), {"n": n, "m": m, "nodes": grid.n_nodes,
                                           "dt": grid.time_grid.dt})

    try:
        if "pde" in spec.solvers:
            pde = {}
            for m in spec.m_values:
                for n in spec.n_values:
                    t0 = time.perf_counter()
                    v = solve_penalized(model, grid, PenaltyParams(n, m))
                    r = row(n, m)
                    r["value_at_reference_point"] = v.at(x0, mark0)
                    r["a_spread"] = a_spread(v) if model.marks.size > 1 else None
                    timings[f"pde n={_num(n)} m={_num(m)}"] = time.perf_counter() - t0
                    pde[f"n={_num(n)},m={_num(m)}"] = r["value_at_reference_point"]
            vi = solve_hjb_isaacs(model, grid)
            summary["pde"] = {"values": pde, "vi_value": vi.at(x0, 0)}

        if "bsde" in spec.solvers:
            bundle = simulate_paths(model, TimeGrid(model.horizon, spec.mc_steps), spec.paths,
                                    spec.seed, x0=x0, mark0=mark0, threads=threads)
            basis = RegressionBasis(spec.degree, spec.obstacle_feature)
            bs = {}
            res_rows = []
            violations = {}
            prev = {}  # n -> solution at the previous m
            for m in spec.m_values:
                for n in spec.n_values:
                    t0 = time.perf_counter()
                    sol = solve_bsde(model, bundle, PenaltyParams(n, m), basis)
                    if n in prev:
                        key = f"n={_num(n)},m={_num(prev[n].params.m)}->{_num(m)}"
                        violations[key] = pathwise_violation_rate(prev[n], sol)
                    prev[n] = sol
                    rep = constraint_residuals(sol, model, bundle)
                    q_mean, q_se = quartile_increments(sol)
                    r = row(n, m)
                    r.update(rep.as_dict())
                    timings[f"bsde n={_num(n)} m={_num(m)}"] = time.perf_counter() - t0
                    bs[f"n={_num(n)},m={_num(m)}"] = {"Y0": sol.Y0, "stderr": sol.stderr,
                                                      **rep.as_dict()}
                    res_rows.append([n, m, sol.Y0, sol.stderr, rep.R_jump, rep.R_obst,
                                     rep.R_skor, *q_mean, *q_se])
            summary["bsde"] = {"paths": spec.paths, "steps": spec.mc_steps, "seed": spec.seed,
                               "bundle_digest": bundle.digest(), "values": bs,
                               "kminus_pathwise_violation_rate": violations}
            head = ["n", "m", "Y0", "stderr", "R_jump", "R_obst", "R_skor"]
            head += [f"dKminus_q{i + 1}" for i in range(4)]
            head += [f"dKminus_q{i + 1}_se" for i in range(4)]
            _write(man, "residuals", "residuals.csv", _table(head, res_rows))

        if "dual" in spec.solvers:
            _run_dual(spec, model, grid, x0, mark0, man, summary)

        if "oracle" in spec.solvers:
            _run_oracles(spec, prob, grid, x0, mark0, man, summary)
    except CFLError as exc:
        raise ExperimentError(f"{prob.name}: {exc}") from exc

    if rows:
        _write(man, "convergence", "convergence.csv", emit_convergence_table(rows))
    if spec.timings:
        man.files["timings"] = out / "timings.json"
        man.files["timings"].write_text(json.dumps(_jsonable(timings), indent=2, sort_keys=True)
                                        + "\n")
    summary["files"] = sorted(p.name for p in man.files.values()) + ["summary.json"]
    man.summary = _jsonable(summary)
    man.files["summary"] = out / "summary.json"
    man.files["summary"].write_text(json.dumps(man.summary, indent=2, sort_keys=True) + "\n")
    return man


def _write(man: Manifest, label: str, name: str, text: str) -> None:
    path = man.out_dir / name
    path.write_text(text)
    man.files[label] = path


def _table(head, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(head)
    for r in rows:
        w.writerow([_num(x) for x in r])
    return buf.getvalue()


def _run_dual(spec, model, grid, x0, mark0, man, summary):
    if model.gain_depends_on(grid.nodes):
        raise ExperimentError("the dual game needs a running gain free of (y, z); "
                              "use an inline model with discount = false")
    chain = build_chain(model, grid)
    node = int(np.argmin(np.abs(grid.nodes - np.asarray(x0)).sum(axis=1)))
    gap_rows, sandwich = [], {}
    for m in spec.m_values:
        for n in spec.n_values:
            if not math.isfinite(n) or m <= 0:
                continue
            nu_grid = None if spec.nu_levels == 0 else np.linspace(m / spec.nu_levels, m,
                                                                    spec.nu_levels)
            res = saddle_dp(chain, PenaltyParams(n, m), nu_grid,
                            np.linspace(0.0, n, spec.theta_levels), model)
            gap_rows.append(res.row(node, mark0))
            eps = min(spec.eps, m)
            sw = eps_saddle_sandwich(chain, model, PenaltyParams(n, m), eps)
            sandwich[f"n={_num(n)},m={_num(m)}"] = {"eps": eps, "holds": sw.holds()}
    _write(man, "gaps", "gaps.csv", gap_report_csv(gap_rows))
    summary["dual"] = {"states": chain.n_states, "reference_node": node, "sandwich": sandwich}


def _run_oracles(spec, prob, grid, x0, mark0, man, summary):
    model = prob.spec
    entries = []
    vi = solve_hjb_isaacs(model, grid).at(x0, 0)
    flip = -1.0 if prob.name in ("P0", "P1") or spec.inline else 1.0
    entries.append(("vi", flip * vi))
    chain = build_chain(model, grid)
    V = controller_stopper_dp(chain, model)
    entries.append(("chain_dp", flip * float(np.interp(x0[0], grid.axes[0], V[0]))
                    if grid.dim == 1 else flip * float(V[0, 0])))
    if prob.name == "P0" or (spec.inline and len(spec.vols) == 1 and not spec.log_price):
        notes = prob.notes if prob.name == "P0" else {
            "S0": spec.spot, "K": spec.strike, "r": spec.rate, "sigma": spec.vols[0]}
        entries.append(("binomial", binomial_american(notes["S0"], notes["K"], notes["r"],
                                                      notes["sigma"], model.horizon, 500)))
    if prob.name == "P2":
        entries.append(("exact", float(x0[0]) + model.horizon))
    if "bsde" in spec.solvers or prob.name == "P0":
        bundle = simulate_paths(model, TimeGrid(model.horizon, spec.mc_steps), spec.paths,
                                spec.seed, x0=x0, mark0=mark0)
        sol = solve_bsde(model, bundle, PenaltyParams(math.inf, max(spec.m_values)),
                         RegressionBasis(spec.degree, spec.obstacle_feature))
        entries.append(("lsmc", flip * sol.Y0))
        summary.setdefault("oracle", {})["lsmc_stderr"] = sol.stderr
    cmp = compare_values(entries)
    label = "game" if prob.name in ("P0", "P1") or spec.inline else "reflected control problem"
    summary.setdefault("oracle", {}).update(
        {"values": dict(entries), "label": label, "max_rel_diff": cmp.max_rel()})
    _write(man, "comparison", "comparison.csv", cmp.to_csv())
