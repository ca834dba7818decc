"""Equilibrium potentials, capacities and capacity width.

The equilibrium potential of ``A`` in ``U`` is computed from the reduced
Dirichlet problem (``e = 1`` on ``A``, ``E_alpha``-harmonic on ``U \\ A``,
``e = 0`` off ``U``).  It solves the defining variational inequality (``e >= 1``
on ``A``) exactly when its charge ``E e`` on ``A`` is nonnegative.  The
smallest charge is recorded in the field's metadata.  If the potential
overshoots 1, a primal-dual active-set solver for the inequality takes over
and the result is flagged.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .errors import EmptySample, NonConvergence, ObstacleActive, WidthOverflow
from .forms import AssembledForm, AssumptionConstants, cap_comparison_constant, lowest_eigenvalue
from .geometry import Grid, NodeSet, metric_ball
from .solve import ScalarField, system

OVERSHOOT_TOL = 1e-6


@dataclass
class CapacityResult:
    value: float
    alpha: float
    potential: ScalarField
    adjoint_potential: ScalarField
    tilde_value: float
    A_set: NodeSet
    U_set: NodeSet
    nu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    obstacle_active: bool = False

    def sandwich(self, constants: AssumptionConstants, alpha: float | None = None) -> tuple[float, float, float]:
        """``(tilde, value, C^2 tilde)``; ``alpha`` defaults to the run's alpha,
        or to ``min(1, lambda_U)`` for the 0-capacity."""
        a = alpha if alpha is not None else self.alpha
        C = cap_comparison_constant(constants, a)
        return self.tilde_value, self.value, C * C * self.tilde_value


def _operator(form, U, adjoint, alpha, part="E"):
    M = form.matrix(adjoint, part)[U.indices][:, U.indices]
    if alpha:
        M = M + sparse.diags(alpha * form.mass[U.indices])
    return M.tocsr()


def _reduced(form, A: NodeSet, U: NodeSet, alpha, adjoint, part="E", cache=True):
    """Reduced problem: 1 on A, harmonic on U \\ A.  Values on U."""
    posA = np.searchsorted(U.indices, A.indices)
    free_mask = np.ones(len(U), bool)
    free_mask[posA] = False
    e = np.zeros(len(U))
    e[posA] = 1.0
    if free_mask.any():
        F = U.indices[free_mask]
        FU = NodeSet(F, "free")
        M = _operator(form, U, adjoint, alpha, part)
        rhs = -(M[free_mask][:, ~free_mask] @ e[~free_mask])
        e[free_mask] = system(form, FU, adjoint, alpha, part, cache).solve(rhs)
    return e


def _obstacle(form, A, U, alpha, adjoint, part="E", max_iter=200):
    """Primal-dual active set for the variational inequality
    ``M e >= 0, e >= 1`` on ``A``, ``M e = 0`` on ``U \\ A``, with
    ``(M e)_i (e_i - 1) = 0`` on ``A``."""
    M = _operator(form, U, adjoint, alpha, part)
    n = len(U)
    posA = np.searchsorted(U.indices, A.indices)
    onA = np.zeros(n, bool)
    onA[posA] = True
    active = onA.copy()
    for _ in range(max_iter):
        free = ~active
        e = np.ones(n)
        if free.any():
            rhs = -(M[free][:, active] @ np.ones(active.sum()))
            e[free] = spla.spsolve(M[free][:, free].tocsc(), rhs)
        lam = M @ e
        new = onA & (lam + (1.0 - e) > 0)
        if np.array_equal(new, active):
            return e
        active = new
    raise NonConvergence("obstacle active-set iteration did not settle")


def equilibrium_potential(form: AssembledForm, A: NodeSet, U: NodeSet, alpha: float = 0.0,
                          adjoint: bool = False, part: str = "E", cache: bool = True) -> ScalarField:
    if len(A) == 0:
        return ScalarField(np.zeros(form.n), U, "equilibrium", {"alpha": alpha, "adjoint": adjoint})
    if not A.issubset(U):
        raise ValueError("A must be contained in U")
    e = _reduced(form, A, U, alpha, adjoint, part, cache)
    meta = {"alpha": alpha, "adjoint": adjoint, "obstacle_active": False}
    nu = (_operator(form, U, adjoint, alpha, part) @ e)[np.searchsorted(U.indices, A.indices)]
    meta["charge_min"] = float(nu.min())
    if e.max() > 1 + OVERSHOOT_TOL:
        warnings.warn(f"reduced potential overshoots to {e.max():.6g}; solving the obstacle problem", ObstacleActive)
        e = _obstacle(form, A, U, alpha, adjoint, part)
        meta["obstacle_active"] = True
    vals = np.zeros(form.n)
    vals[U.indices] = e
    meta.update(min=float(e.min()), max=float(e.max()))
    return ScalarField(vals, U, "equilibrium", meta)


def capacity(form: AssembledForm, A: NodeSet, U: NodeSet, alpha: float = 0.0,
             with_adjoint: bool = True, cache: bool = True) -> CapacityResult:
    """``Cap_{U, alpha}(A) = E_alpha(e, e)`` together with the capacity of the
    strictly local part (``tilde_value``) and the equilibrium measure."""
    e = equilibrium_potential(form, A, U, alpha, cache=cache)
    if len(A) == 0:
        return CapacityResult(0.0, alpha, e, e, 0.0, A, U)
    eh = equilibrium_potential(form, A, U, alpha, adjoint=True, cache=cache) if with_adjoint else e
    M = _operator(form, U, False, alpha)
    eu = e.values[U.indices]
    res = M @ eu
    value = float(eu @ res)
    if form.is_symmetric and not form.kappa.any():
        tilde = value
    else:
        Ms = _operator(form, U, False, alpha, "E_s")
        et = equilibrium_potential(form, A, U, alpha, part="E_s", cache=cache).values[U.indices]
        tilde = float(et @ (Ms @ et))
    posA = np.searchsorted(U.indices, A.indices)
    nu = res[posA]
    return CapacityResult(
        value, alpha, e, eh, tilde, A, U, nu,
        bool(e.meta.get("obstacle_active") or eh.meta.get("obstacle_active")),
    )


def energy(form: AssembledForm, U: NodeSet, u: ScalarField, v: ScalarField, alpha: float = 0.0) -> float:
    """``E_alpha(u, v)`` for fields supported in ``U``."""
    M = _operator(form, U, False, alpha)
    return float(v.values[U.indices] @ (M @ u.values[U.indices]))


def sandwich_alpha(form: AssembledForm, U: NodeSet, alpha: float) -> float:
    """Regularization used in the Cap / tilde Cap comparison (``alpha`` if
    positive, else ``min(1, lambda_U)``)."""
    return alpha if alpha > 0 else min(1.0, lowest_eigenvalue(form, U))


# ---------------------------------------------------------------------------
# Two-sided capacity estimate
# ---------------------------------------------------------------------------


@dataclass
class CapacityTable:
    rows: list  # dicts with r, cap, integral, rho
    R: float
    x: int

    @property
    def rho(self) -> np.ndarray:
        return np.array([row["rho"] for row in self.rows])

    @property
    def spread(self) -> float:
        rho = self.rho
        return float(rho.max() / rho.min())


def volume_integral(grid: Grid, x, r: float, R: float, samples: int = 4096) -> float:
    """``int_r^R s / V(x, s) ds`` with ``V`` the measure of the ambient ball in
    the domain, trapezoid rule on a geometric grid of radii."""
    p = grid.position(x)
    d = np.sort(np.hypot(grid.xy[:, 0] - p[0], grid.xy[:, 1] - p[1]))
    s = np.geomspace(r, R, samples)
    V = grid.h ** 2 * np.searchsorted(d, s, side="left")
    V = np.maximum(V, grid.h ** 2)
    return float(np.trapezoid(s / V, s))


def verify_capacity_estimate(form: AssembledForm, grid: Grid, x, radii, R: float) -> CapacityTable:
    """Per radius: ``rho(r) = Cap_{B(x,R)}(closed B(x,r)) * int_r^R s / V(x,s) ds``."""
    U = metric_ball(grid, x, R)
    rows = []
    for r in radii:
        if not 0 < r < R:
            raise ValueError("radii must lie in (0, R)")
        A = metric_ball(grid, x, r, closed=True).intersection(U)
        cap = capacity(form, A, U, 0.0, with_adjoint=False, cache=False).value
        integral = volume_integral(grid, x, r, R)
        rows.append({"r": float(r), "cap": cap, "integral": integral, "rho": cap * integral})
    return CapacityTable(rows, float(R), x)


# ---------------------------------------------------------------------------
# Capacity width
# ---------------------------------------------------------------------------


@dataclass
class WidthResult:
    eta: float
    width: float
    samples: int
    worst_ratio: float
    evaluations: int


def transfer(src: Grid, dst: Grid, nodes: NodeSet) -> NodeSet:
    """Map a node set between grids on the same lattice by coordinates."""
    ij = np.round((src.xy[nodes.indices] - dst.origin) / dst.h).astype(np.int64)
    ok = (ij[:, 0] >= 0) & (ij[:, 0] < dst.shape[0]) & (ij[:, 1] >= 0) & (ij[:, 1] < dst.shape[1])
    ids = dst.lat2node[ij[ok, 1], ij[ok, 0]]
    return NodeSet(ids[ids >= 0], nodes.descriptor)


def _width_test(form, U_mask, xs, r):
    grid = form.grid
    worst = np.inf
    for x in xs:
        p = grid.xy[x]
        d = np.hypot(grid.xy[:, 0] - p[0], grid.xy[:, 1] - p[1])
        ball = NodeSet(np.flatnonzero(d < 2 * r))
        full = np.flatnonzero(d <= r * (1 + 1e-12))
        rest = full[~U_mask[full]]
        if len(rest) == 0:
            return 0.0
        den = capacity(form, NodeSet(full), ball, with_adjoint=False, cache=False).value
        num = capacity(form, NodeSet(rest), ball, with_adjoint=False, cache=False).value
        worst = min(worst, num / den)
    return worst


def capacity_width(form: AssembledForm, U: NodeSet, eta: float = 1.0 / 3.0, samples: int = 16, seed: int = 0,
                   r_max: float | None = None, tol: float | None = None) -> WidthResult:
    """Smallest ``r`` with ``Cap(B(x,r) \\ U) >= eta Cap(B(x,r))`` in ``B(x, 2r)``
    for all sampled ``x`` in ``U`` (bisection to within ``2h``).

    The complement of ``U`` is taken inside ``form.grid``; to account for the
    exterior of a domain, pass a form on a larger ambient grid with ``U``
    transferred by :func:`transfer`.
    """
    if not 0 < eta < 1:
        raise ValueError("eta must lie in (0, 1)")
    if len(U) == 0:
        raise EmptySample("empty set")
    grid = form.grid
    h = grid.h
    tol = 2 * h if tol is None else tol
    r_max = grid.domain.diameter if r_max is None else r_max
    rng = np.random.default_rng(seed)
    xs = U.indices if len(U) <= samples else np.sort(rng.choice(U.indices, samples, replace=False))
    Um = U.mask(grid.n)
    count = 0

    def ok(r):
        nonlocal count
        count += 1
        return _width_test(form, Um, xs, r)

    # doubling from h brackets the width cheaply (small balls first), then bisect
    lo, hi = None, h
    while True:
        w = ok(hi)
        if w >= eta:
            worst_hi = w
            break
        lo = hi
        if hi >= r_max:
            raise WidthOverflow(f"capacity ratio {w:.3g} < eta up to r = {r_max}")
        hi = min(2 * hi, r_max)
    if lo is None:
        return WidthResult(eta, float(hi), len(xs), float(worst_hi), count)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        w = ok(mid)
        if w >= eta:
            hi, worst_hi = mid, w
        else:
            lo = mid
    return WidthResult(eta, float(hi), len(xs), float(worst_hi), count)
