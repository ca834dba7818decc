"""Boundary Harnack experiments: Green-ratio and solution BHP constants,
harmonic-measure decay, collar capacity width and the Carleson-type estimate.

Balls centred at a boundary point ``xi`` are inner balls (graph distance from
``xi``); the spheres of the four-point inequality are node bands
``|d - rho| <= h / sqrt(2)``, which is the thinnest band that every
8-neighbour geodesic must cross.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateRegression, EmptySample, NoInteriorAnchor, ScaleTooFine
from .forms import AssembledForm, assemble
from .geometry import (BoundaryPoint, Grid, NodeSet, ambient_grid, ambient_volume, boundary_anchor,
                       inner_distance)
from .potential import capacity_width, transfer
from .solve import BoundaryPortion, boundary_layer, green_matrix, harmonic_measure


@dataclass(frozen=True)
class BhpConfig:
    xi: BoundaryPoint
    r: float
    c_u: float
    C_u: float
    override_A0: float | None = None
    sphere_samples: int | None = None
    pairs: int = 200
    seed: int = 0
    x_samples: int = 50
    green_multiplier: float | None = None
    C_Omega: float = 1.0

    @property
    def A_3(self) -> float:
        return 2 * (12 + 12 * self.C_u)

    @property
    def A_0(self) -> float:
        return self.A_3 + 7

    @property
    def A_7(self) -> float:
        return 2 / self.c_u + 1

    @property
    def A_8(self) -> float:
        return 2 * max(self.A_0, 7 * self.A_7)

    @property
    def A0_used(self) -> float:
        return self.A_0 if self.override_A0 is None else float(self.override_A0)

    @property
    def conforming(self) -> bool:
        return self.override_A0 is None and self.green_multiplier is None

    def at_scale(self, r: float) -> "BhpConfig":
        return BhpConfig(self.xi, r, self.c_u, self.C_u, self.override_A0, self.sphere_samples, self.pairs,
                         self.seed, self.x_samples, self.green_multiplier, self.C_Omega)


@dataclass
class BhpReport:
    A1_green: float
    A1_solution: float
    per_scale: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    violations: list = field(default_factory=list)


def four_point_constant(L: np.ndarray) -> float:
    """``max_{j, k} max_{x, x'} (L[x, j] - L[x, k]) - (L[x', j] - L[x', k])``
    exponentiated, for a matrix of logarithms ``L[x, j]``."""
    best = 0.0
    for j in range(L.shape[1]):
        D = L - L[:, [j]]
        best = max(best, float((D.max(axis=0) - D.min(axis=0)).max()))
    return float(np.exp(best))


def sphere_nodes(grid: Grid, dist: np.ndarray, center: np.ndarray, rho: float, count: int) -> np.ndarray:
    """Up to ``count`` nodes of the band ``|dist - rho| <= h/sqrt(2)``, one per
    angular sector around ``center`` (the one closest to radius ``rho``)."""
    band = np.flatnonzero(np.abs(dist - rho) <= grid.h / np.sqrt(2))
    if len(band) <= count:
        return band
    theta = np.arctan2(grid.xy[band, 1] - center[1], grid.xy[band, 0] - center[0])
    sector = np.minimum(((theta + np.pi) / (2 * np.pi) * count).astype(int), count - 1)
    err = np.abs(dist[band] - rho)
    order = np.lexsort((band, err, sector))
    first = np.r_[True, sector[order][1:] != sector[order][:-1]]
    return np.sort(band[order][first])


def _count(cfg: BhpConfig, rho: float, h: float) -> int:
    if cfg.sphere_samples is not None:
        return max(8, cfg.sphere_samples)
    return max(8, int(np.ceil(2 * np.pi * rho / h / 4)))


def _setup(form: AssembledForm, cfg: BhpConfig):
    grid = form.grid
    h = grid.h
    if 6 * cfg.r < 8 * h:
        raise ScaleTooFine(f"6r = {6 * cfg.r} is below 8h = {8 * h}")
    d = inner_distance(grid, cfg.xi).dist
    Y = NodeSet(np.flatnonzero(d < cfg.A0_used * cfg.r), "inner_ball(xi,A0 r)")
    ball = np.flatnonzero(d < cfg.r)
    if len(ball) < 2:
        raise ScaleTooFine("inner ball B(xi, r) holds fewer than two nodes")
    if not np.any(np.abs(d - 6 * cfg.r) <= h / np.sqrt(2)):
        raise EmptySample(f"no nodes at inner distance 6r = {6 * cfg.r} from xi")
    return grid, d, Y, ball


def _masked(grid, nodes, poles, radius):
    keep = np.ones(len(nodes), bool)
    for p in poles:
        keep &= np.hypot(*(grid.xy[nodes] - grid.xy[p]).T) > radius
    return nodes[keep]


def green_bhp(form: AssembledForm, cfg: BhpConfig, adjoint: bool = False) -> BhpReport:
    """Four-point Green ratio over ``x, x'`` in ``B(xi, r)`` and poles on the
    inner sphere of radius ``6r``, Green functions of ``Y' = B(xi, A0 r)``."""
    grid, d, Y, ball = _setup(form, cfg)
    poles = sphere_nodes(grid, d, cfg.xi.xy, 6 * cfg.r, _count(cfg, 6 * cfg.r, grid.h))
    G = green_matrix(form, Y, poles, adjoint)
    xs = _masked(grid, ball, poles, 4 * grid.h)
    vals = G[xs]
    violations = []
    if vals.min() <= 0:
        violations.append({"kind": "nonpositive_green", "min": float(vals.min())})
        vals = np.maximum(vals, np.finfo(float).tiny)
    A1 = four_point_constant(np.log(vals))
    meta = _meta(form, cfg, Y, len(xs), len(poles))
    row = {"r": cfg.r, "A1_green": A1, "poles": len(poles), "x_nodes": len(xs)}
    return BhpReport(A1, float("nan"), [row], meta, violations)


def _meta(form, cfg, Y, nx, npoles):
    return {
        "h": form.grid.h,
        "nodes": form.n,
        "Y_nodes": len(Y),
        "x_nodes": nx,
        "poles": npoles,
        "A_0": cfg.A_0,
        "A_3": cfg.A_3,
        "A0_used": cfg.A0_used,
        "conforming": cfg.conforming,
        "coefficients": form.coeff.name,
        "domain": form.grid.domain.name,
    }


def solution_family(form: AssembledForm, cfg: BhpConfig, count: int, adjoint: bool = False):
    """Positive solutions in ``Y'`` vanishing on ``B(xi, 6r) \\ Omega``: Green
    functions with poles on or beyond the ``6r`` sphere, harmonic measures of
    arcs of the outer layer of ``Y'``, and random positive mixtures."""
    grid, d, Y, ball = _setup(form, cfg)
    rng = np.random.default_rng(cfg.seed)
    center = cfg.xi.xy
    k = _count(cfg, 6 * cfg.r, grid.h)
    poles = list(sphere_nodes(grid, d, center, 6 * cfg.r, k))
    outer = cfg.A0_used * cfg.r
    for rho in np.linspace(6 * cfg.r, outer, 5)[1:-1]:
        poles += list(sphere_nodes(grid, d, center, rho, max(8, k // 4)))
    poles = np.unique(poles)
    members = [green_matrix(form, Y, poles, adjoint)]
    labels = [f"green:{p}" for p in poles]
    layer = boundary_layer(form, Y)
    arcs = 8
    if len(layer.nodes):
        th = np.arctan2(grid.xy[layer.nodes, 1] - center[1], grid.xy[layer.nodes, 0] - center[0])
        for a in range(arcs):
            lo = -np.pi + 2 * np.pi * a / arcs
            sel = (th >= lo) & (th < lo + 2 * np.pi / arcs)
            if not sel.any():
                continue
            S = BoundaryPortion(layer.nodes[sel], np.array([], dtype=np.int64))
            w = harmonic_measure(form, Y, S, adjoint).values.copy()
            w[~Y.mask(form.n)] = 0.0
            members.append(w[:, None])
            labels.append(f"harmonic:{a}")
    base = np.column_stack(members)
    base = base / np.maximum(base[ball].max(axis=0), np.finfo(float).tiny)
    n_mix = max(0, count - base.shape[1])
    if n_mix:
        W = rng.exponential(size=(base.shape[1], n_mix)) * (rng.uniform(size=(base.shape[1], n_mix)) < 0.3)
        W[rng.integers(0, base.shape[1], n_mix), np.arange(n_mix)] += 1.0
        base = np.column_stack([base, base @ W])
        labels += [f"mix:{i}" for i in range(n_mix)]
    return base, labels, grid, d, Y, ball, poles


def solution_bhp(form: AssembledForm, cfg: BhpConfig, pairs: int | None = None, adjoint: bool = False) -> BhpReport:
    """Largest ``u(x) v(x') / (u(x') v(x))`` over pairs from the solution family
    and ``x, x'`` in ``B(xi, r)``; also returns the Green four-point constant."""
    pairs = cfg.pairs if pairs is None else pairs
    need = int(np.ceil((1 + np.sqrt(1 + 8 * pairs)) / 2))
    U, labels, grid, d, Y, ball, poles = solution_family(form, cfg, need, adjoint)
    xs = _masked(grid, ball, poles, 4 * grid.h)
    vals = U[xs]
    violations = []
    if vals.min() <= 0:
        bad = np.flatnonzero(vals.min(axis=0) <= 0)
        violations.append({"kind": "nonpositive_solution", "members": [labels[i] for i in bad]})
        vals = np.maximum(vals, np.finfo(float).tiny)
    L = np.log(vals)
    A1s = four_point_constant(L)
    green_cols = [i for i, s in enumerate(labels) if s.startswith("green:")]
    sphere = sphere_nodes(grid, d, cfg.xi.xy, 6 * cfg.r, _count(cfg, 6 * cfg.r, grid.h))
    on_sphere = [i for i in green_cols if int(labels[i].split(":")[1]) in set(sphere.tolist())]
    A1g = four_point_constant(L[:, on_sphere])
    n = U.shape[1]
    meta = _meta(form, cfg, Y, len(xs), len(sphere))
    meta.update(members=n, pairs=n * (n - 1) // 2, adjoint=adjoint)
    row = {"r": cfg.r, "A1_green": A1g, "A1_solution": A1s, "members": n, "x_nodes": len(xs)}
    return BhpReport(A1g, A1s, [row], meta, violations)


def bhp_scales(form: AssembledForm, cfg: BhpConfig, scales, adjoint: bool = False) -> BhpReport:
    rows, viol = [], []
    meta = {}
    for r in scales:
        rep = solution_bhp(form, cfg.at_scale(r), adjoint=adjoint)
        rows += rep.per_scale
        viol += rep.violations
        meta = rep.metadata
    meta = dict(meta, scales=list(map(float, scales)))
    return BhpReport(max(r["A1_green"] for r in rows), max(r["A1_solution"] for r in rows), rows, meta, viol)


# ---------------------------------------------------------------------------
# Harmonic-measure decay
# ---------------------------------------------------------------------------


@dataclass
class DecayFit:
    slope: float
    intercept: float
    r2: float
    width: float
    rows: list


def sphere_measure(form: AssembledForm, U: NodeSet, x: int, r: float, adjoint: bool = False) -> float:
    """``omega_{U cap B(x,r)}(x, U cap dB(x,r))``."""
    grid = form.grid
    p = grid.xy[x]
    dist = np.hypot(grid.xy[:, 0] - p[0], grid.xy[:, 1] - p[1])
    Um = U.mask(grid.n)
    D = NodeSet(np.flatnonzero(Um & (dist < r)))
    layer = boundary_layer(form, D)
    S = BoundaryPortion(layer.nodes[Um[layer.nodes]], np.array([], dtype=np.int64))
    return float(harmonic_measure(form, D, S, adjoint).values[x])


def harmonic_measure_decay(form: AssembledForm, U: NodeSet, x_samples, r_list, width: float,
                           adjoint: bool = False) -> DecayFit:
    """Regress ``log omega`` on ``r / w(U)``; rows with ``r / w <= 2`` (where the
    exponential bound is vacuous) are excluded from the fit."""
    rows = []
    for x in x_samples:
        for r in r_list:
            om = sphere_measure(form, U, int(x), float(r), adjoint)
            t = r / width
            rows.append({"x": int(x), "r": float(r), "r_over_w": t, "omega": om,
                         "excluded": bool(t <= 2 or om <= 0)})
    use = [row for row in rows if not row["excluded"]]
    if len(use) < 3:
        raise DegenerateRegression(f"only {len(use)} usable rows")
    t = np.array([row["r_over_w"] for row in use])
    y = np.log([row["omega"] for row in use])
    if np.ptp(t) == 0:
        raise DegenerateRegression("all usable rows share one scale")
    slope, intercept = np.polyfit(t, y, 1)
    resid = y - (slope * t + intercept)
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid ** 2) / ss if ss > 0 else 1.0
    return DecayFit(float(slope), float(intercept), float(r2), float(width), rows)


# ---------------------------------------------------------------------------
# Collar capacity width
# ---------------------------------------------------------------------------


def collar(grid: Grid, xi: BoundaryPoint, R: float, r: float) -> NodeSet:
    """Nodes of ``B(xi, R)`` within distance ``r`` of the boundary."""
    d = inner_distance(grid, xi).dist
    return NodeSet(np.flatnonzero((d < R) & (grid.delta < r)), f"collar({xi.index},{R!r},{r!r})")


def ambient_form(form: AssembledForm, margin: float) -> AssembledForm:
    key = ("ambient", float(margin))
    if key not in form._cache:
        form._cache[key] = assemble(ambient_grid(form.grid, margin), form.coeff)
    return form._cache[key]


def capacity_width_boundary(form: AssembledForm, xi: BoundaryPoint, R: float, r_list, c_u: float,
                            eta: float = 1.0 / 3.0, samples: int = 16, seed: int = 0,
                            margin: float | None = None, tolerance: float = 0.0) -> list[dict]:
    """Per ``r``: capacity width of the boundary collar in ``B(xi, R)``, measured
    in the ambient plane (exterior and slit points count as complement)."""
    A7 = 2 / c_u + 1
    if margin is None:
        margin = min(2 * A7 * max(r_list), form.grid.domain.scale)
    amb = ambient_form(form, margin)
    rows = []
    for r in r_list:
        Y = collar(form.grid, xi, R, r)
        Ya = transfer(form.grid, amb.grid, Y)
        res = capacity_width(amb, Ya, eta, samples, seed, r_max=2 * A7 * r + 2 * form.grid.h)
        ratio = res.width / r
        rows.append({"r": float(r), "width": res.width, "ratio": ratio, "A_7": A7,
                     "ok": bool(ratio <= A7 * (1 + tolerance)), "samples": res.samples, "nodes": len(Y)})
    return rows


# ---------------------------------------------------------------------------
# Carleson-type estimate
# ---------------------------------------------------------------------------


@dataclass
class CarlesonTable:
    rows: list
    A_2: float
    A_2_adjoint: float
    anchor: int
    meta: dict


def sample_ball_points(grid: Grid, d: np.ndarray, center, r: float, count: int, seed: int) -> np.ndarray:
    """Nodes nearest to uniformly random points of the disk ``B(center, r)``
    that lie in the inner ball ``{d < r}``; physical points depend only on
    ``seed`` so different resolutions see the same locations."""
    rng = np.random.default_rng(seed)
    out: list[int] = []
    tries = 0
    tree = cKDTree(grid.xy)
    while len(out) < count and tries < 200 * count:
        tries += 1
        rad = r * np.sqrt(rng.uniform())
        ang = rng.uniform(0, 2 * np.pi)
        q = center + rad * np.array([np.cos(ang), np.sin(ang)])
        _, k = tree.query(q)
        if d[k] < r and k not in out and grid.domain.contains(q[0], q[1]):
            out.append(int(k))
    return np.array(out, dtype=np.int64)


def carleson_estimate(form: AssembledForm, cfg: BhpConfig) -> CarlesonTable:
    """Ratios ``omega(x) / ((V(xi, r) / r^2) G(x, xi_16r))`` for sampled
    ``x`` in ``B(xi, r)``, together with the adjoint ratios."""
    grid = form.grid
    r = cfg.r
    anchor = boundary_anchor(grid, cfg.xi, r, 4.0)
    if anchor.delta < 2 * cfg.c_u * r:
        raise NoInteriorAnchor(f"anchor clearance {anchor.delta:.4g} < 2 c_u r = {2 * cfg.c_u * r:.4g}")
    d = inner_distance(grid, cfg.xi).dist
    B2 = NodeSet(np.flatnonzero(d < 2 * r), "inner_ball(xi,2r)")
    layer = boundary_layer(form, B2)
    S = BoundaryPortion(layer.nodes, np.array([], dtype=np.int64))
    mult = cfg.C_Omega * cfg.A_3 if cfg.green_multiplier is None else cfg.green_multiplier
    W = NodeSet(np.flatnonzero(d < mult * r), "inner_ball(xi,C_Omega A3 r)")
    V = ambient_volume(grid, cfg.xi, r)
    xs = sample_ball_points(grid, d, cfg.xi.xy, r, cfg.x_samples, cfg.seed)
    rows = []
    out = {}
    for adj in (False, True):
        om = harmonic_measure(form, B2, S, adj).values
        G = green_matrix(form, W, [anchor.node], adj)[:, 0]
        out[adj] = (om, G)
    for x in xs:
        (om, G), (oms, Gs) = out[False], out[True]
        rows.append({
            "x": float(grid.xy[x, 0]), "y": float(grid.xy[x, 1]), "node": int(x),
            "omega": float(om[x]), "green": float(G[x]),
            "ratio": float(om[x] / (V / r ** 2 * G[x])),
            "omega_adj": float(oms[x]), "green_adj": float(Gs[x]),
            "ratio_adj": float(oms[x] / (V / r ** 2 * Gs[x])),
        })
    A2 = max(row["ratio"] for row in rows)
    A2s = max(row["ratio_adj"] for row in rows)
    meta = {"anchor_delta_over_r": anchor.delta_over_r, "green_multiplier": mult,
            "conforming": cfg.green_multiplier is None, "V": V, "W_nodes": len(W)}
    return CarlesonTable(rows, A2, A2s, anchor.node, meta)
