"""Dirichlet problems, Green functions, heat kernels and Harnack measurements.

All solvers work on a node set ``U`` of an :class:`~bhplab.forms.AssembledForm`.
Nodes outside ``U`` and the boundary vertices of the triangulation carry
Dirichlet data.  ``adjoint=True`` swaps ``E`` for its transpose, i.e. the
operator ``L`` for ``L*``.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .errors import SingularSystem, StepRejection
from .forms import AssembledForm
from .geometry import NodeSet

DIRECT_LIMIT = 512 * 512
RESIDUAL_TOL = 1e-10


@dataclass
class ScalarField:
    """Values on all interior nodes; ``support`` is the set the field solves on."""

    values: np.ndarray
    support: NodeSet
    name: str = "field"
    meta: dict = field(default_factory=dict)

    def __getitem__(self, idx):
        return self.values[idx]

    def on(self, nodes) -> np.ndarray:
        idx = nodes.indices if isinstance(nodes, NodeSet) else nodes
        return self.values[idx]


@dataclass
class GreenSlice:
    pole: int
    field: ScalarField
    adjoint: bool


@dataclass
class HeatSlice:
    t: float
    source: int
    field: ScalarField
    times: np.ndarray
    mass: np.ndarray
    min_value: np.ndarray
    positivity_violation: float
    trace: np.ndarray | None = None


@dataclass(frozen=True)
class BoundaryPortion:
    """Dirichlet nodes (interior nodes outside ``U``) and boundary vertices."""

    nodes: np.ndarray
    bverts: np.ndarray

    def __len__(self):
        return len(self.nodes) + len(self.bverts)


# ---------------------------------------------------------------------------
# factorization cache
# ---------------------------------------------------------------------------


class _Factor:
    def __init__(self, A: sparse.csc_matrix):
        self.A = A
        self.n = A.shape[0]
        self.direct = self.n <= DIRECT_LIMIT
        if self.direct:
            try:
                self.lu = spla.splu(A)
            except RuntimeError as exc:
                raise SingularSystem(str(exc)) from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        if self.direct:
            x = self.lu.solve(b)
            r = b - self.A @ x
            nb = np.linalg.norm(b, axis=0)
            nr = np.linalg.norm(r, axis=0)
            bad = nr > RESIDUAL_TOL * np.maximum(nb, 1e-300)
            if np.any(bad):
                x = x + self.lu.solve(r)  # one step of iterative refinement
                nr = np.linalg.norm(b - self.A @ x, axis=0)
                if np.any(nr > RESIDUAL_TOL * np.maximum(nb, 1e-300) * 10):
                    raise SingularSystem(f"residual {np.max(nr / np.maximum(nb, 1e-300)):.2e} above tolerance")
            return x
        return self._cgnr(b)

    def _cgnr(self, b):
        cols = b.reshape(self.n, -1)
        out = np.empty_like(cols)
        AT = self.A.T.tocsr()
        for k in range(cols.shape[1]):
            op = spla.LinearOperator((self.n, self.n), matvec=lambda v: AT @ (self.A @ v))
            x, info = spla.cg(op, AT @ cols[:, k], rtol=RESIDUAL_TOL, maxiter=20 * self.n)
            if info != 0:
                raise SingularSystem("conjugate gradient on the normal equations did not converge")
            out[:, k] = x
        return out.reshape(b.shape)


def _key(U: NodeSet, adjoint: bool, alpha: float, part: str):
    return (hashlib.sha1(U.indices.tobytes()).hexdigest(), bool(adjoint), float(alpha), part)


CACHE_ENTRIES = 8


def system(form: AssembledForm, U: NodeSet, adjoint: bool = False, alpha: float = 0.0,
           part: str = "E", cache: bool = True) -> _Factor:
    """Factorization of ``(E + alpha * mass)`` restricted to ``U``, kept in a
    small per-form cache unless ``cache`` is false."""
    if len(U) == 0:
        raise SingularSystem("empty node set")
    key = _key(U, adjoint, alpha, part)
    f = form._cache.get(key)
    if f is None:
        M = form.matrix(adjoint, part)
        A = M[U.indices][:, U.indices]
        if alpha:
            A = A + sparse.diags(alpha * form.mass[U.indices])
        f = _Factor(A.tocsc())
        if cache:
            keys = [k for k in form._cache if isinstance(k, tuple) and len(k) == 4]
            if len(keys) >= CACHE_ENTRIES:
                form._cache.pop(keys[0])
            form._cache[key] = f
    return f


def boundary_layer(form: AssembledForm, U: NodeSet) -> BoundaryPortion:
    """Nodes outside ``U`` and boundary vertices coupled to ``U`` by the mesh."""
    P = form.pattern[U.indices]
    cols = np.unique(P.indices)
    inU = U.mask(form.n)
    nodes = cols[(cols < form.n)]
    nodes = nodes[~inU[nodes]]
    bverts = cols[cols >= form.n] - form.n
    return BoundaryPortion(nodes, bverts)


def _data(g, xy):
    if g is None:
        return np.zeros(len(xy))
    if callable(g):
        return np.asarray(g(xy[:, 0], xy[:, 1]), float) * np.ones(len(xy))
    g = np.asarray(g, float)
    if g.ndim == 0:
        return np.full(len(xy), float(g))
    return g


def _rhs_dirichlet(form, U, g_nodes, g_b, adjoint):
    """``-E[U, out] g_out - E_b[U, :] g_b`` (or the transposed blocks)."""
    inU = U.mask(form.n)
    out = ~inU
    g_out = np.where(out, g_nodes, 0.0)
    E = form.E.T.tocsr() if adjoint else form.E
    Eb = form.E_bt.T.tocsr() if adjoint else form.E_b
    r = -(E[U.indices] @ g_out)
    if form.n_bverts:
        r -= Eb[U.indices] @ g_b
    return r


def dirichlet_solve(form: AssembledForm, U: NodeSet, g=None, f=None, adjoint: bool = False,
                    g_boundary=None, alpha: float = 0.0) -> ScalarField:
    """Solve ``E(u, phi) + alpha (u, phi) = (f, phi)`` for ``phi`` supported in ``U``
    with ``u = g`` off ``U``.

    ``g`` may be a scalar, a callable of ``(x, y)`` or an array over all
    interior nodes; ``g_boundary`` gives the values at boundary vertices and
    defaults to ``g`` when that is a scalar or callable (zero for arrays).
    ``f`` is a density over all nodes (array, scalar or callable).
    """
    grid = form.grid
    g_nodes = _data(g, grid.xy)
    if g_boundary is None and (g is None or callable(g) or np.ndim(g) == 0):
        g_boundary = g
    g_b = _data(g_boundary, form.bvert_xy)
    rhs = _rhs_dirichlet(form, U, g_nodes, g_b, adjoint)
    if f is not None:
        fv = _data(f, grid.xy)
        rhs = rhs + form.mass[U.indices] * fv[U.indices]
    F = system(form, U, adjoint, alpha)
    u = g_nodes.copy()
    u[U.indices] = F.solve(rhs)
    return ScalarField(u, U, "dirichlet", {"adjoint": adjoint})


def green_matrix(form: AssembledForm, U: NodeSet, poles, adjoint: bool = False) -> np.ndarray:
    """Columns ``G_U(., y)`` for each pole ``y`` (values on all nodes, zero off U)."""
    poles = np.atleast_1d(np.asarray(poles, dtype=np.int64))
    pos = np.searchsorted(U.indices, poles)
    if np.any(pos >= len(U)) or np.any(U.indices[np.minimum(pos, len(U) - 1)] != poles):
        raise ValueError("pole outside U")
    B = np.zeros((len(U), len(poles)))
    B[pos, np.arange(len(poles))] = 1.0  # unit mass: density 1/h^2 times area h^2
    F = system(form, U, adjoint)
    out = np.zeros((form.n, len(poles)))
    out[U.indices] = F.solve(B)
    return out


def green(form: AssembledForm, U: NodeSet, y: int, adjoint: bool = False) -> GreenSlice:
    """Green function ``G_U(., y)`` (``adjoint`` gives ``G*_U(., y) = G_U(y, .)``)."""
    col = green_matrix(form, U, [y], adjoint)[:, 0]
    return GreenSlice(int(y), ScalarField(col, U, "green", {"adjoint": adjoint}), adjoint)


def harmonic_measure(form: AssembledForm, U: NodeSet, S: BoundaryPortion, adjoint: bool = False) -> ScalarField:
    g = np.zeros(form.n)
    g[S.nodes] = 1.0
    gb = np.zeros(form.n_bverts)
    gb[S.bverts] = 1.0
    u = dirichlet_solve(form, U, g, adjoint=adjoint, g_boundary=gb)
    u.name = "harmonic_measure"
    u.values[~U.mask(form.n)] = 0.0
    u.values[S.nodes] = 1.0
    inside = u.values[U.indices]
    u.meta.update(min=float(inside.min()), max=float(inside.max()))
    return u


def split_layer(form: AssembledForm, layer: BoundaryPortion, keep: Callable[[np.ndarray], np.ndarray]) -> BoundaryPortion:
    """Sub-portion of ``layer`` whose points satisfy ``keep(xy)``."""
    xy_n = form.grid.xy[layer.nodes]
    xy_b = form.bvert_xy[layer.bverts]
    mn = np.asarray(keep(xy_n), bool) if len(xy_n) else np.zeros(0, bool)
    mb = np.asarray(keep(xy_b), bool) if len(xy_b) else np.zeros(0, bool)
    return BoundaryPortion(layer.nodes[mn], layer.bverts[mb])


# ---------------------------------------------------------------------------
# Heat semigroup
# ---------------------------------------------------------------------------


def evolve(form: AssembledForm, U: NodeSet, u0: np.ndarray, t: float, steps: int, adjoint: bool = False,
           record: Callable[[int, float, np.ndarray], None] | None = None) -> np.ndarray:
    """Crank-Nicolson for ``M u' = -E u`` on ``U`` with zero data off ``U``.

    ``u0`` is given on ``U``; ``record(k, t_k, u_k)`` is called after each step.
    """
    dt = t / steps
    m = form.mass[U.indices]
    A = form.matrix(adjoint)[U.indices][:, U.indices]
    lhs = (sparse.diags(m) + 0.5 * dt * A).tocsc()
    rhs = (sparse.diags(m) - 0.5 * dt * A).tocsr()
    lu = spla.splu(lhs)
    u = np.array(u0, float)
    for k in range(1, steps + 1):
        u = lu.solve(rhs @ u)
        if record is not None:
            record(k, k * dt, u)
    return u


def heat(form: AssembledForm, U: NodeSet, x: int, t: float, steps: int = 64, trace_nodes=None,
         adjoint: bool = True, mass_tol: float = 1e-12) -> HeatSlice:
    """Dirichlet heat kernel ``p_U(t, x, .)`` from a unit point mass at ``x``.

    The map ``y -> p(t, x, y)`` solves the adjoint equation, so the default
    evolves with ``E^T``.  Mass and minimum are tracked at every step.
    """
    if not t > 0:
        raise ValueError("t must be positive")
    if steps < 16:
        raise ValueError("steps must be at least 16")
    pos = np.searchsorted(U.indices, x)
    if pos >= len(U) or U.indices[pos] != x:
        raise ValueError("source outside U")
    m = form.mass[U.indices]
    u0 = np.zeros(len(U))
    u0[pos] = 1.0 / m[pos]
    masses = [1.0]
    mins = [0.0]
    trace_pos = None if trace_nodes is None else np.searchsorted(U.indices, np.asarray(trace_nodes))
    traces = [] if trace_pos is None else [u0[trace_pos]]

    def record(k, tk, u):
        mass = float(np.dot(m, u))
        if mass > masses[-1] * (1 + mass_tol) + mass_tol:
            raise StepRejection(f"mass increased at step {k}: {masses[-1]!r} -> {mass!r}")
        masses.append(mass)
        mins.append(float(u.min()))
        if trace_pos is not None:
            traces.append(u[trace_pos])

    u = evolve(form, U, u0, t, steps, adjoint, record)
    vals = np.zeros(form.n)
    vals[U.indices] = u
    mins_arr = np.array(mins)
    viol = float(max(0.0, -mins_arr.min()))
    return HeatSlice(
        t=float(t),
        source=int(x),
        field=ScalarField(vals, U, "heat", {"adjoint": adjoint}),
        times=np.linspace(0.0, t, steps + 1),
        mass=np.array(masses),
        min_value=mins_arr,
        positivity_violation=viol,
        trace=None if trace_pos is None else np.array(traces),
    )


# ---------------------------------------------------------------------------
# Harnack inequalities
# ---------------------------------------------------------------------------


@dataclass
class HarnackEstimate:
    mode: str
    estimate: float
    ratios: np.ndarray
    x: int
    r: float
    meta: dict = field(default_factory=dict)


def _angular_data(rng, theta, floor=1e-3):
    """Random positive data: a floor plus a few von Mises bumps in angle."""
    k = rng.integers(1, 4)
    g = np.full_like(theta, floor)
    for _ in range(k):
        mu = rng.uniform(-np.pi, np.pi)
        conc = np.exp(rng.uniform(0.0, np.log(400.0)))
        g += rng.uniform(0.2, 1.0) * np.exp(conc * (np.cos(theta - mu) - 1.0))
    return g


def harnack_constants(form: AssembledForm, ball: tuple[int, float], mode: str = "elliptic", trials: int = 50,
                      seed: int = 0, tau: float = 1.0, delta: float = 0.5, steps: int = 64,
                      data: Callable | None = None) -> HarnackEstimate:
    """Empirical Harnack ratios on ``B(x, r)`` for positive solutions in ``B(x, 2r)``.

    Elliptic: random positive Dirichlet data on the layer around ``B(x, 2r)``,
    ratio ``sup / inf`` over ``B(x, r)``.  Parabolic: random positive initial
    data in ``B(x, 2r)`` evolved over a time ``tau r^2``; ratio of the sup over
    the lower box to the inf over the upper box, both over ``B(x, delta r)``.
    ``data(rng, points)`` may override the random generator (angles for the
    elliptic mode, coordinates for the parabolic mode).
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    x, r = ball
    grid = form.grid
    p = grid.xy[int(x)]
    dist = np.hypot(grid.xy[:, 0] - p[0], grid.xy[:, 1] - p[1])
    U = NodeSet(np.flatnonzero(dist < 2 * r), f"metric_ball({x},{2 * r!r})")
    ratios = []
    if mode == "elliptic":
        inner = np.flatnonzero(dist < r)
        layer = boundary_layer(form, U)
        pts = np.r_[grid.xy[layer.nodes], form.bvert_xy[layer.bverts]]
        theta = np.arctan2(pts[:, 1] - p[1], pts[:, 0] - p[0])
        nn = len(layer.nodes)
        F = system(form, U)
        rhs_cols = []
        for k in range(trials):
            rng = np.random.default_rng([seed, k])
            vals = data(rng, theta) if data is not None else _angular_data(rng, theta)
            g = np.zeros(form.n)
            g[layer.nodes] = vals[:nn]
            gb = np.zeros(form.n_bverts)
            gb[layer.bverts] = vals[nn:]
            rhs_cols.append(_rhs_dirichlet(form, U, g, gb, False))
        sol = F.solve(np.column_stack(rhs_cols))
        u = np.zeros((form.n, trials))
        u[U.indices] = sol
        ui = u[inner]
        ratios = ui.max(axis=0) / ui.min(axis=0)
        meta = {"min_value": float(ui.min())}
    elif mode == "parabolic":
        T = tau * r * r
        small = np.flatnonzero(dist[U.indices] < delta * r)
        times = np.linspace(0.0, T, steps + 1)
        lower = (times > T * (1 - delta) / 4) & (times < T * (1 + delta) / 4)
        upper = (times > T * (3 - delta) / 4) & (times <= T * (1 + 1e-12))
        if not lower.any() or not upper.any():
            raise ValueError("too few time steps to resolve the Harnack boxes")
        xyU = grid.xy[U.indices]
        cols = []
        for k in range(trials):
            rng = np.random.default_rng([seed, k])
            if data is not None:
                u0 = np.asarray(data(rng, xyU), float)
            else:
                u0 = np.full(len(U), 1e-3)
                for _ in range(rng.integers(1, 4)):
                    ang = rng.uniform(0, 2 * np.pi)
                    c = p + 2 * r * np.sqrt(rng.uniform()) * np.array([np.cos(ang), np.sin(ang)])
                    w = r * np.exp(rng.uniform(np.log(0.05), np.log(0.5)))
                    u0 += rng.uniform(0.2, 1.0) * np.exp(-((xyU - c) ** 2).sum(1) / (2 * w * w))
            cols.append(u0)
        sup_lo = np.full(trials, -np.inf)
        inf_up = np.full(trials, np.inf)

        def rec(j, tj, u):
            if lower[j]:
                np.maximum(sup_lo, u[small].max(axis=0), out=sup_lo)
            if upper[j]:
                np.minimum(inf_up, u[small].min(axis=0), out=inf_up)

        evolve(form, U, np.column_stack(cols), T, steps, False, rec)
        ratios = sup_lo / inf_up
        ratios = np.array(ratios)
        meta = {"tau": tau, "delta": delta, "steps": steps}
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return HarnackEstimate(mode, float(np.max(ratios)), np.asarray(ratios), int(x), float(r), meta)
