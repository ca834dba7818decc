"""Configuration-driven experiment runner.

Config files are INI-style text with two sections::

    [run]
    experiment = capacity          ; one of EXPERIMENTS
    domain = slit_square           ; preset name or path to a domain file
    coefficients = drift           ; preset name or path to a coefficient file
    h = 1/128                      ; spacing, a number or a fraction p/q
    seed = 0
    out = results/capacity         ; relative to the config file

    [params]
    x = 0.5 0.25                   ; experiment-specific keys, see README

Lists are whitespace-separated numbers (fractions allowed).  The output
directory may be overridden by ``--out`` or by ``BHPLAB_OUT``; nothing else
is read from the environment.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import bhp, forms, geometry, potential, report, solve
from .errors import BhpLabError, ConfigError, NumericalError

EXPERIMENTS = ("capacity", "width", "harnack", "heat", "carleson", "green_bhp", "solution_bhp", "decay",
               "geometry_audit")
RUN_KEYS = {"experiment", "domain", "coefficients", "h", "seed", "out"}
COEFFICIENT_PRESETS = {"laplacian": forms.laplacian, "drift": forms.drift, "skew": forms.skew}


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    experiment: str
    domain: str
    coefficients: str
    h: float
    seed: int
    out: Path
    params: dict = field(default_factory=dict)
    base: Path = Path(".")
    text: str = ""

    def resolve(self, ref: str) -> Path:
        p = Path(ref)
        return p if p.is_absolute() else self.base / p

    def load_domain(self) -> geometry.Domain:
        if self.domain in geometry.PRESETS:
            return geometry.preset(self.domain)
        path = self.resolve(self.domain)
        if not path.is_file():
            raise ConfigError(f"domain {self.domain!r} is neither a preset nor a file")
        return geometry.Domain.load(path)

    def load_coefficients(self) -> forms.CoefficientField:
        if self.coefficients in COEFFICIENT_PRESETS:
            return COEFFICIENT_PRESETS[self.coefficients]()
        path = self.resolve(self.coefficients)
        if not path.is_file():
            raise ConfigError(f"coefficients {self.coefficients!r} is neither a preset nor a file")
        return forms.CoefficientField.load(path)

    def config_hash(self) -> str:
        """Hash of the canonical config (output directory excluded) and the
        contents of referenced files; the seed is recorded separately."""
        parts = [f"experiment={self.experiment}", f"h={self.h!r}"]
        for key, ref in (("domain", self.domain), ("coefficients", self.coefficients)):
            if ref in geometry.PRESETS or ref in COEFFICIENT_PRESETS:
                parts.append(f"{key}=preset:{ref}")
            else:
                parts.append(f"{key}=file:" + self.resolve(ref).read_text())
        parts += [f"param.{k}={v}" for k, v in sorted(self.params.items())]
        return hashlib.sha256("\n".join(parts).encode()).hexdigest()[:16]


def _number(s: str) -> float:
    s = s.strip()
    try:
        return float(Fraction(s)) if "/" in s else float(s)
    except (ValueError, ZeroDivisionError):
        raise ConfigError(f"not a number: {s!r}") from None


def parse_config(text: str, base: Path = Path("."), seed: int | None = None, out: str | None = None) -> RunConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if "run" not in cp:
        raise ConfigError("missing [run] section")
    run = dict(cp["run"])
    extra = set(cp.sections()) - {"run", "params"}
    if extra:
        raise ConfigError(f"unknown sections {sorted(extra)}")
    unknown = set(run) - RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown [run] keys {sorted(unknown)}")
    for key in ("experiment", "domain", "h"):
        if key not in run:
            raise ConfigError(f"[run] needs {key!r}")
    kind = run["experiment"].strip()
    if kind not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment kind {kind!r}; known: {', '.join(EXPERIMENTS)}")
    h = _number(run["h"])
    if not h > 0:
        raise ConfigError("h must be positive")
    try:
        s = int(run.get("seed", "0")) if seed is None else int(seed)
    except ValueError:
        raise ConfigError("seed must be an integer") from None
    out_dir = out or os.environ.get("BHPLAB_OUT") or run.get("out") or f"out/{kind}"
    out_path = Path(out_dir)
    if not out_path.is_absolute() and out is None and "BHPLAB_OUT" not in os.environ:
        out_path = (base / out_path).resolve()
    params = dict(cp["params"]) if "params" in cp else {}
    return RunConfig(kind, run["domain"].strip(), run.get("coefficients", "laplacian").strip(), h, s, out_path,
                     params, base, text)


def load_config(path, seed: int | None = None, out: str | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} not found")
    return parse_config(path.read_text(), path.parent, seed, out)


class Params:
    """Typed access to the ``[params]`` section with defaults."""

    def __init__(self, raw: dict):
        self.raw = raw
        self.used: set[str] = set()

    def get(self, key, default=None, kind=float):
        self.used.add(key)
        if key not in self.raw:
            if default is None:
                raise ConfigError(f"[params] needs {key!r}")
            return default
        v = self.raw[key]
        try:
            if kind is float:
                return _number(v)
            if kind is int:
                return int(v)
            if kind is str:
                return v.strip()
            if kind is bool:
                return v.strip().lower() in ("1", "true", "yes", "on")
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {v!r}") from None
        raise TypeError(kind)

    def optional(self, key, kind=float):
        self.used.add(key)
        return self.get(key, kind=kind) if key in self.raw else None

    def floats(self, key, default=None) -> list[float]:
        self.used.add(key)
        if key not in self.raw:
            if default is None:
                raise ConfigError(f"[params] needs {key!r}")
            return list(default)
        return [_number(s) for s in self.raw[key].split()]

    def point(self, key, default=None) -> tuple[float, float]:
        v = self.floats(key, default)
        if len(v) != 2:
            raise ConfigError(f"{key!r} must be two numbers")
        return v[0], v[1]

    def points(self, key, default=None) -> list[tuple[float, float]]:
        self.used.add(key)
        if key not in self.raw:
            if default is None:
                raise ConfigError(f"[params] needs {key!r}")
            return list(default)
        out = []
        for chunk in self.raw[key].split(","):
            v = [_number(s) for s in chunk.split()]
            if len(v) != 2:
                raise ConfigError(f"{key!r} must be comma-separated coordinate pairs")
            out.append((v[0], v[1]))
        return out

    def unused(self) -> list[str]:
        return sorted(set(self.raw) - self.used)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


@dataclass
class Outcome:
    tables: dict  # name -> (columns, rows)
    summary: dict  # section -> {key: value}
    plots: dict = field(default_factory=dict)  # name -> svg text


def _pmap(fn, items, workers: int):
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _xi(grid, p: Params):
    x, y = p.point("xi")
    side = p.optional("xi_side", int)
    return grid.nearest_boundary_point(x, y, side)


def _cfg(grid, p: Params, seed: int, r: float) -> bhp.BhpConfig:
    return bhp.BhpConfig(
        xi=_xi(grid, p), r=r, c_u=p.get("c_u", 0.2), C_u=p.get("C_u", 2.0),
        override_A0=p.optional("override_A0"), sphere_samples=p.optional("sphere_samples", int),
        pairs=p.get("pairs", 200, int), seed=seed, x_samples=p.get("x_samples", 50, int),
        green_multiplier=p.optional("green_multiplier"), C_Omega=p.get("C_Omega", 1.0),
    )


def _exp_capacity(form, p, seed, workers):
    grid = form.grid
    x = grid.nearest_node(*p.point("x"))
    R = p.get("R")
    radii = p.floats("radii", [R / 2, R / 4, R / 8, R / 16])
    tabs = _pmap(lambda r: potential.verify_capacity_estimate(form, grid, x, [r], R).rows[0], radii, workers)
    tab = potential.CapacityTable(tabs, R, x)
    rho = tab.rho
    summary = {"empirical_A2": tab.spread, "rho_min": float(rho.min()), "rho_max": float(rho.max()),
               "x_node": x, "R": R}
    plot = report.svg_line_plot({"rho": ([r["r"] for r in tabs], rho)}, "capacity ratio", "r", "rho", logx=True)
    return Outcome({"capacity": (("r", "cap", "integral", "rho"), tabs)}, {"capacity": summary}, {"capacity": plot})


def _exp_width(form, p, seed, workers):
    grid = form.grid
    xi = _xi(grid, p)
    R = p.get("R")
    rs = p.floats("r")
    c_u = p.get("c_u", 0.2)
    eta = p.get("eta", 1 / 3)
    samples = p.get("samples", 16, int)
    A7 = 2 / c_u + 1
    margin = min(2 * A7 * max(rs), grid.domain.scale)
    bhp.ambient_form(form, margin)  # built once before the pool
    rows = _pmap(lambda r: bhp.capacity_width_boundary(form, xi, R, [r], c_u, eta, samples, seed, margin)[0],
                 rs, workers)
    for row in rows:
        row["eta"] = eta
    cols = ("r", "eta", "width", "samples", "ratio", "A_7", "ok", "nodes")
    summary = {"A_7": A7, "max_ratio": max(r["ratio"] for r in rows), "all_ok": all(r["ok"] for r in rows)}
    plot = report.svg_line_plot({"width/r": (rs, [r["ratio"] for r in rows]), "A_7": (rs, [A7] * len(rs))},
                                "collar capacity width", "r", "width / r", logx=True)
    return Outcome({"width": (cols, rows)}, {"width": summary}, {"width": plot})


def _exp_harnack(form, p, seed, workers):
    grid = form.grid
    x = grid.nearest_node(*p.point("x"))
    rs = p.floats("r")
    mode = p.get("mode", "elliptic", str)
    trials = p.get("trials", 50, int)
    tau, delta, steps = p.get("tau", 1.0), p.get("delta", 0.5), p.get("steps", 64, int)
    ests = _pmap(lambda r: solve.harnack_constants(form, (x, r), mode, trials, seed, tau, delta, steps), rs, workers)
    rows = [{"r": e.r, "trial": k, "ratio": float(v)} for e in ests for k, v in enumerate(e.ratios)]
    summary = {f"estimate_r{i}": e.estimate for i, e in enumerate(ests)}
    summary.update(mode=mode, trials=trials, max_over_min=max(e.estimate for e in ests) / min(e.estimate for e in ests))
    plot = report.svg_line_plot({mode: (rs, [e.estimate for e in ests])}, "Harnack constant", "r", "estimate",
                                logx=True)
    return Outcome({"harnack": (("r", "trial", "ratio"), rows)}, {"harnack": summary}, {"harnack": plot})


def _exp_heat(form, p, seed, workers):
    grid = form.grid
    x = grid.nearest_node(*p.point("x"))
    t = p.get("t")
    steps = p.get("steps", 64, int)
    hs = solve.heat(form, grid.all_nodes(), x, t, steps, trace_nodes=[x])
    rows = [{"step": k, "time": float(hs.times[k]), "mass": float(hs.mass[k]), "min": float(hs.min_value[k]),
             "p_xx": float(hs.trace[k, 0])} for k in range(steps + 1)]
    summary = {"final_mass": float(hs.mass[-1]), "max_mass": float(hs.mass.max()),
               "positivity_violation": hs.positivity_violation, "p_xx_times_4pi_t": float(hs.trace[-1, 0] * 4 * np.pi * t)}
    fields = {"heat_field": hs.field.values}
    plot = report.svg_line_plot({"mass": (hs.times[1:], hs.mass[1:])}, "heat mass", "t", "mass")
    out = Outcome({"heat": (("step", "time", "mass", "min", "p_xx"), rows)}, {"heat": summary}, {"heat": plot})
    out.tables["heat_field"] = (report.FIELD_COLUMNS, list(report.field_rows(grid.xy, fields["heat_field"])))
    return out


def _exp_carleson(form, p, seed, workers):
    grid = form.grid
    cfg = _cfg(grid, p, seed, p.get("r"))
    tab = bhp.carleson_estimate(form, cfg)
    cols = ("node", "x", "y", "omega", "green", "ratio", "omega_adj", "green_adj", "ratio_adj")
    summary = {"A_2": tab.A_2, "A_2_adjoint": tab.A_2_adjoint, "anchor": tab.anchor, **tab.meta}
    return Outcome({"carleson": (cols, tab.rows)}, {"carleson": summary})


def _exp_bhp(kind):
    def run(form, p, seed, workers):
        grid = form.grid
        rs = p.floats("r")
        base = _cfg(grid, p, seed, rs[0])
        if kind == "green_bhp":
            reps = _pmap(lambda r: bhp.green_bhp(form, base.at_scale(r)), rs, workers)
        else:
            reps = _pmap(lambda r: bhp.solution_bhp(form, base.at_scale(r)), rs, workers)
        rows = [row for rep in reps for row in rep.per_scale]
        if kind == "green_bhp":
            cols = ("r", "A1_green", "poles", "x_nodes")
            a1 = [row["A1_green"] for row in rows]
            summary = {"A1_green": max(a1)}
        else:
            cols = ("r", "A1_green", "A1_solution", "members", "x_nodes")
            a1 = [row["A1_solution"] for row in rows]
            summary = {"A1_green": max(r["A1_green"] for r in rows), "A1_solution": max(a1)}
        summary.update(scale_spread=max(a1) / min(a1), conforming=base.conforming, A_0_used=base.A0_used,
                       A_0=base.A_0, violations=len([v for rep in reps for v in rep.violations]))
        plot = report.svg_line_plot({"A1": (rs, a1)}, kind, "r", "A1", logx=True, logy=True,
                                    comment=None if base.conforming else "non-conforming override")
        return Outcome({kind: (cols, rows)}, {kind: summary}, {kind: plot})
    return run


def decay_set(grid, p: Params) -> geometry.NodeSet:
    """Boundary strip of the given thickness, optionally restricted to ``B(xi, R)``."""
    thick = p.get("thickness")
    mask = grid.delta < thick
    if "xi" in p.raw:
        d = geometry.inner_distance(grid, _xi(grid, p)).dist
        mask &= d < p.get("R")
    return geometry.NodeSet(np.flatnonzero(mask), f"strip({thick!r})")


def _exp_decay(form, p, seed, workers):
    grid = form.grid
    U = decay_set(grid, p)
    w = p.optional("width")
    if w is None:
        margin = p.get("margin", min(0.25, grid.domain.scale))
        amb = bhp.ambient_form(form, margin)
        w = potential.capacity_width(amb, potential.transfer(grid, amb.grid, U), p.get("eta", 1 / 3),
                                     p.get("samples", 8, int), seed).width
    xs = [grid.nearest_node(*q) for q in p.points("x")]
    rs = p.floats("radii", np.linspace(2.5 * w, p.get("r_max", 0.45), p.get("scales", 8, int)))
    fit = bhp.harmonic_measure_decay(form, U, xs, rs, w)
    cols = ("x", "r", "r_over_w", "omega", "excluded")
    summary = {"width": w, "slope": fit.slope, "a1": -fit.slope, "intercept": fit.intercept, "r2": fit.r2,
               "rows_used": sum(not r["excluded"] for r in fit.rows)}
    use = [r for r in fit.rows if not r["excluded"]]
    plot = report.svg_line_plot({"omega": ([r["r_over_w"] for r in use], [r["omega"] for r in use])},
                                "harmonic measure decay", "r / w", "omega", logy=True)
    return Outcome({"decay": (cols, fit.rows)}, {"decay": summary}, {"decay": plot})


def _exp_geometry_audit(form, p, seed, workers):
    grid = form.grid
    rng = np.random.default_rng(seed)
    n = p.get("samples", 100, int)
    r_lo, r_hi = p.floats("r_range", [0.05, 0.3])
    clear = p.get("clearance", 0.01)
    x0, y0, x1, y1 = grid.domain.bbox
    pts = []
    while len(pts) < n:
        q = rng.uniform((x0, y0), (x1, y1))
        if grid.domain.contains(*q) and grid.domain.distance_to_boundary(*q) > clear:
            pts.append((q, rng.uniform(r_lo, r_hi)))
    samples = [(grid.nearest_node(*q), r) for q, r in pts]

    def cell(s):
        x, r = s
        inner = geometry.inner_ball(grid, x, r)
        comp = geometry.component_ball(grid, x, r)
        ratio = geometry.estimate_C_Omega(grid, [s])
        return {"node": x, "x": float(grid.xy[x, 0]), "y": float(grid.xy[x, 1]), "r": float(r),
                "inner_nodes": len(inner), "component_nodes": len(comp),
                "included": inner.issubset(comp), "C_ratio": ratio}

    rows = _pmap(cell, samples, workers)
    C_u = p.get("C_u", 2.0)
    pairs = geometry.sample_node_pairs(grid, p.get("pairs", 40, int), seed)
    c_u = geometry.largest_certified_c(grid, C_u, pairs)
    summary = {"C_Omega": max(r["C_ratio"] for r in rows), "inclusion_all": all(r["included"] for r in rows),
               "c_u": c_u, "C_u": C_u, "doubling_inner": geometry.doubling_estimate(grid, samples),
               "metrication": grid.metrication}
    cols = ("node", "x", "y", "r", "inner_nodes", "component_nodes", "included", "C_ratio")
    return Outcome({"geometry_audit": (cols, rows)}, {"geometry_audit": summary})


RUNNERS = {
    "capacity": _exp_capacity, "width": _exp_width, "harnack": _exp_harnack, "heat": _exp_heat,
    "carleson": _exp_carleson, "green_bhp": _exp_bhp("green_bhp"), "solution_bhp": _exp_bhp("solution_bhp"),
    "decay": _exp_decay, "geometry_audit": _exp_geometry_audit,
}


# ---------------------------------------------------------------------------
# run / validate
# ---------------------------------------------------------------------------


def validate(cfg: RunConfig) -> list[tuple[str, str]]:
    """Diagnostics as ``(level, message)``; empty for a clean config."""
    diags = []
    try:
        dom = cfg.load_domain()
    except (ConfigError, BhpLabError, OSError, ValueError) as exc:
        return [("error", f"domain: {exc}")]
    try:
        cfg.load_coefficients()
    except (ConfigError, BhpLabError, OSError, ValueError) as exc:
        diags.append(("error", f"coefficients: {exc}"))
    for s in dom.slits:
        L = float(np.hypot(s[2] - s[0], s[3] - s[1]))
        if cfg.h > L:
            diags.append(("warning", f"h = {cfg.h!r} exceeds slit length {L!r}"))
    for rect in dom.rectangles:
        side = min(rect[2] - rect[0], rect[3] - rect[1])
        if cfg.h > side:
            diags.append(("warning", f"h = {cfg.h!r} exceeds rectangle side {side!r}"))
    return diags


def run(cfg: RunConfig, workers: int = 1) -> dict:
    """Execute the experiment and write its outputs; returns the written paths."""
    for level, msg in validate(cfg):
        if level == "error":
            raise ConfigError(msg)
    grid = geometry.build_grid(cfg.load_domain(), cfg.h)
    form = forms.assemble(grid, cfg.load_coefficients())
    p = Params(cfg.params)
    outcome = RUNNERS[cfg.experiment](form, p, cfg.seed, max(1, workers))
    if p.unused():
        raise ConfigError(f"unknown [params] keys for {cfg.experiment}: {p.unused()}")
    chash = cfg.config_hash()
    cfg.out.mkdir(parents=True, exist_ok=True)
    written = {}
    for name, (cols, rows) in outcome.tables.items():
        written[name] = report.write_csv(cfg.out / f"{name}.csv", cols, rows, chash, cfg.seed)
    for name, svg in outcome.plots.items():
        path = cfg.out / f"{name}.svg"
        path.write_text(svg.replace("<svg ", f"<svg data-config-hash=\"{chash}\" data-seed=\"{cfg.seed}\" ", 1))
        written[name + "_svg"] = path
    sections = {
        "config": {"experiment": cfg.experiment, "domain": cfg.domain, "coefficients": cfg.coefficients,
                   "h": cfg.h, "seed": cfg.seed, **{f"param.{k}": v for k, v in sorted(cfg.params.items())}},
        **outcome.summary,
        "mesh": {"nodes": grid.n, "boundary_points": grid.n_boundary, "triangles": form.n_triangles,
                 "ellipticity": form.ellipticity, "symmetric": form.is_symmetric,
                 "m_matrix": form.is_m_matrix, "positive_coupling": form.positive_coupling,
                 "metrication": grid.metrication},
    }
    path = cfg.out / "summary.txt"
    path.write_text(report.summary_text(sections, chash, cfg.seed))
    written["summary"] = path
    return written


def _error_record(exc: BaseException, code: int) -> str:
    return json.dumps({"status": "error", "exit_code": code, "type": type(exc).__name__, "message": str(exc)},
                      sort_keys=True)


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericalError):
        return 3
    if isinstance(exc, BhpLabError):
        return 2
    return 1


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="bhplab", description="Boundary Harnack experiments on slit domains.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("run", "validate"):
        sp = sub.add_parser(name)
        sp.add_argument("config")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)
        sp.add_argument("--workers", type=int, default=1)
    sub.add_parser("list-domains")
    args = ap.parse_args(argv)
    cfg = None

    if args.command == "list-domains":
        for name in geometry.list_domains():
            d = geometry.preset(name)
            print(f"{name}\trectangles={len(d.rectangles)} slits={len(d.slits)}")
        return 0
    try:
        cfg = load_config(args.config, args.seed, args.out)
        if args.command == "validate":
            diags = validate(cfg)
            for level, msg in diags:
                print(f"{level}: {msg}")
            return 2 if any(level == "error" for level, _ in diags) else 0
        written = run(cfg, args.workers)
        print(json.dumps({"status": "ok", "outputs": {k: str(v) for k, v in written.items()}}, sort_keys=True))
        return 0
    except Exception as exc:  # mapped to an exit status with a JSON record
        code = exit_code(exc)
        rec = _error_record(exc, code)
        print(rec, file=sys.stderr)
        if code == 1:
            traceback.print_exc()
        if cfg is not None and args.command == "run":
            cfg.out.mkdir(parents=True, exist_ok=True)
            (cfg.out / "error.json").write_text(rec + "\n")
        return code


if __name__ == "__main__":
    sys.exit(main())
