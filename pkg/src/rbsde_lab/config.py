"""Sectioned key=value experiment configuration.

    [model]
    problem = P1            # built-in name; omit for an inline model
    solvers = pde, bsde

    [penalty]
    n = 1, 4, 16            # ascending; inf selects the projection solver
    m = 1, 4, 16, 64

Inline models describe the sign-flipped American put with one volatility per
mark and need horizon, strike, rate, vols, weights and spot.  With
``discount = false`` the rate only enters the drift, which keeps the running
gain free of y as the dual game requires.

Comments start with ``#``.  ``emit_config`` writes every key, defaults
included, so its output reparses to an equal spec.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

SOLVERS = ("pde", "bsde", "dual", "oracle")


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)  # (line number or 0, message)
        super().__init__("; ".join(f"line {ln}: {msg}" if ln else msg for ln, msg in self.errors))


def _float(s: str) -> float:
    v = float(s)
    if math.isnan(v):
        raise ValueError("nan")
    return v


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(s)


def _floats(s: str) -> tuple:
    return tuple(_float(p) for p in s.split(",") if p.strip())


def _strs(s: str) -> tuple:
    return tuple(p.strip() for p in s.split(",") if p.strip())


def _opt_int(s: str):
    return None if s.lower() == "auto" else int(s)


# section -> key -> (field name, parser)
_SCHEMA = {
    "model": {
        "problem": ("problem", str), "solvers": ("solvers", _strs),
        "horizon": ("horizon", _float), "strike": ("strike", _float),
        "rate": ("rate", _float), "vols": ("vols", _floats), "weights": ("weights", _floats),
        "spot": ("spot", _float), "log_price": ("log_price", _bool),
        "discount": ("discounted", _bool), "mark0": ("mark0", int),
    },
    "grid": {"nodes": ("nodes", _opt_int), "steps": ("steps", _opt_int),
             "box": ("box", _floats)},
    "penalty": {"n": ("n_values", _floats), "m": ("m_values", _floats), "eps": ("eps", _float),
                "nu_levels": ("nu_levels", int), "theta_levels": ("theta_levels", int)},
    "mc": {"paths": ("paths", int), "seed": ("seed", int), "steps": ("mc_steps", int),
           "degree": ("degree", int), "obstacle_feature": ("obstacle_feature", _bool)},
    "output": {"dir": ("out_dir", str), "timings": ("timings", _bool)},
}
_INLINE_REQUIRED = ("horizon", "strike", "rate", "vols", "weights", "spot")


@dataclass(frozen=True)
class ExperimentSpec:
    problem: str | None = None
    solvers: tuple = ("pde",)
    horizon: float | None = None
    strike: float | None = None
    rate: float | None = None
    vols: tuple | None = None
    weights: tuple | None = None
    spot: float | None = None
    log_price: bool = True
    discounted: bool = True
    mark0: int | None = None
    nodes: int | None = None
    steps: int | None = None
    box: tuple | None = None
    n_values: tuple = (math.inf,)
    m_values: tuple = (0.0,)
    eps: float = 1e-3
    nu_levels: int = 0  # 0: closed-form supremum over nu
    theta_levels: int = 3
    paths: int = 10000
    seed: int = 20240611
    mc_steps: int = 50
    degree: int = 2
    obstacle_feature: bool = True
    out_dir: str = "out"
    timings: bool = False

    @property
    def inline(self) -> bool:
        return self.problem is None


def parse_config(text: str) -> ExperimentSpec:
    errors = []
    values = {}
    seen = {}
    section = None
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                errors.append((ln, f"unknown section [{section}]"))
            continue
        if "=" not in line:
            errors.append((ln, f"expected key = value, got {line!r}"))
            continue
        if section is None:
            errors.append((ln, "key outside of any section"))
            continue
        if section not in _SCHEMA:
            continue
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in _SCHEMA[section]:
            errors.append((ln, f"unknown key {key!r} in [{section}]"))
            continue
        name, parse = _SCHEMA[section][key]
        if name in seen:
            errors.append((ln, f"duplicate key {key!r} (first on line {seen[name]})"))
            continue
        try:
            values[name] = parse(val)
            seen[name] = ln
        except ValueError:
            kind = parse.__name__.strip("_")
            errors.append((ln, f"type mismatch for {key!r}: {val!r} (expected {kind})"))

    if values.get("problem") is None:
        for key in _INLINE_REQUIRED:
            if key not in values:
                errors.append((0, f"missing required key {key!r} in [model] for an inline model"))
    errors += [(seen.get(name, 0), msg) for name, msg in _check(values)]
    if errors:
        raise ConfigError(errors)
    return ExperimentSpec(**values)


def _check(v: dict):
    for name in ("n_values", "m_values"):
        seq = v.get(name)
        if seq is None:
            continue
        if not seq:
            yield name, f"{name} must be nonempty"
        elif any(x < 0 for x in seq):
            yield name, f"{name} must be nonnegative"
        elif list(seq) != sorted(seq):
            yield name, f"{name} must be sorted ascending"
    for s in v.get("solvers", ()):
        if s not in SOLVERS:
            yield "solvers", f"unknown solver {s!r}; choose from {', '.join(SOLVERS)}"
    if "vols" in v and "weights" in v and len(v["vols"]) != len(v["weights"]):
        yield "weights", "vols and weights differ in length"
    if "box" in v and len(v["box"]) != 2:
        yield "box", "box takes two numbers: lo, hi"
    for name in ("paths", "mc_steps", "theta_levels"):
        if name in v and v[name] < 1:
            yield name, f"{name} must be >= 1"
    if v.get("nu_levels", 0) < 0:
        yield "nu_levels", "nu_levels must be >= 0"
    if "eps" in v and not v["eps"] > 0:
        yield "eps", "eps must be positive"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return "auto"
    return str(v)


def emit_config(spec: ExperimentSpec) -> str:
    lines = []
    for section, keys in _SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (name, _) in keys.items():
            val = getattr(spec, name)
            if val is None and name not in ("nodes", "steps"):
                continue
            lines.append(f"{key} = {_fmt(val)}")
        lines.append("")
    return "\n".join(lines)


def spec_fields() -> list[str]:
    return [f.name for f in fields(ExperimentSpec)]
