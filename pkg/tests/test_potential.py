import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bhplab import potential
from bhplab.bhp import ambient_form
from bhplab.errors import EmptySample, ObstacleActive, WidthOverflow
from bhplab.forms import CoefficientField, assemble, drift, estimate_constants, laplacian, skew
from bhplab.geometry import NodeSet, box, build_grid, metric_ball, preset
from bhplab.potential import (capacity, capacity_width, energy, equilibrium_potential, sandwich_alpha, transfer,
                              verify_capacity_estimate, volume_integral)


@pytest.fixture(scope="module")
def annulus64():
    g = build_grid(box(-1.25, -1.25, 1.25, 1.25), 1 / 64)
    f = assemble(g, laplacian())
    return f, metric_ball(g, (0.0, 0.0), 1.0), metric_ball(g, (0.0, 0.0), 0.25, closed=True)


def test_annulus_potential_and_capacity_coarse(annulus64):
    f, U, A = annulus64
    c = capacity(f, A, U)
    assert c.value == pytest.approx(2 * np.pi / np.log(4), rel=0.03)
    r = np.hypot(*f.grid.xy.T)
    sel = (r > 0.3) & (r < 0.95)
    assert np.abs(c.potential.values[sel] - np.log(1 / r[sel]) / np.log(4)).max() < 0.02
    assert c.tilde_value == c.value
    np.testing.assert_allclose(c.potential.values[A.indices], 1.0)
    assert c.nu.min() >= -1e-10 and c.nu.sum() == pytest.approx(c.value, rel=1e-10)


def test_trivial_sets(annulus64):
    f, U, A = annulus64
    empty = NodeSet(np.array([], dtype=int))
    assert capacity(f, empty, U).value == 0.0
    e = equilibrium_potential(f, U, U)
    np.testing.assert_allclose(e.values[U.indices], 1.0)
    with pytest.raises(ValueError):
        equilibrium_potential(f, U, A)


def test_large_alpha_concentrates(lap_slit32):
    f = lap_slit32
    U = f.grid.all_nodes()
    A = metric_ball(f.grid, (0.5, 0.25), 0.05, closed=True)
    e0 = equilibrium_potential(f, A, U).values
    e1 = equilibrium_potential(f, A, U, alpha=1e4).values
    far = np.hypot(*(f.grid.xy - [0.5, 0.25]).T) > 0.2
    assert e1.min() >= 0 and e1[far].max() < 1e-3 * e0[far].max()


def test_obstacle_fallback_solves_inequality(monkeypatch):
    g = build_grid(preset("square"), 1 / 16)
    f = assemble(g, drift(40.0))
    U = metric_ball(g, (0.5, 0.5), 0.45)
    A = metric_ball(g, (0.5, 0.5), 0.1, closed=True)
    reduced = equilibrium_potential(f, A, U)
    assert reduced.meta["charge_min"] < 0 and not reduced.meta["obstacle_active"]
    monkeypatch.setattr(potential, "OVERSHOOT_TOL", -1.0)
    with pytest.warns(ObstacleActive):
        e = equilibrium_potential(f, A, U)
    assert e.meta["obstacle_active"]
    M = potential._operator(f, U, False, 0.0)
    eu = e.values[U.indices]
    res = M @ eu
    onA = A.mask(f.n)[U.indices]
    assert np.all(eu[onA] >= 1 - 1e-10)
    assert np.all(res[onA] >= -1e-10)
    assert np.abs(res[onA] * (eu[onA] - 1)).max() < 1e-10
    assert np.abs(res[~onA]).max() < 1e-10


def test_capacity_estimate_interior_laplacian():
    g = build_grid(preset("square"), 1 / 128)
    f = assemble(g, laplacian())
    x = g.nearest_node(0.5, 0.5)
    R = 0.4
    tab = verify_capacity_estimate(f, g, x, [R / 2, R / 4, R / 8, R / 16], R)
    # Cap = 2 pi / ln(R/r) and the integral = ln(R/r) / pi: rho = 2 for every r
    np.testing.assert_allclose(tab.rho, 2.0, rtol=0.1)
    assert tab.spread <= 1.1
    assert volume_integral(g, x, R / 2, R) == pytest.approx(np.log(2) / np.pi, rel=0.05)
    with pytest.raises(ValueError):
        verify_capacity_estimate(f, g, x, [R], R)


def test_width_of_thin_collar():
    h = 1 / 64
    g = build_grid(preset("square"), h)
    f = assemble(g, laplacian())
    amb = ambient_form(f, 0.25)
    widths = []
    for w in (1 / 16, 1 / 8):
        U = NodeSet(np.flatnonzero(g.xy[:, 1] < w))
        res = capacity_width(amb, transfer(g, amb.grid, U), samples=6)
        assert w / 8 <= res.width <= 2 * w
        widths.append(res.width)
    assert widths[0] <= widths[1]


def test_width_overflow_without_complement(lap_slit32):
    f = lap_slit32
    # no complement inside the grid: the ratio stays 0 at every radius
    U = f.grid.all_nodes()
    with pytest.raises(WidthOverflow):
        capacity_width(f, U, samples=3, r_max=0.1)
    with pytest.raises(ValueError):
        capacity_width(f, U, eta=1.5)
    with pytest.raises(EmptySample):
        capacity_width(f, NodeSet(np.array([], dtype=int)))


def test_drift_potential_can_undershoot_on_coarse_grids():
    # First-order terms give positive couplings on diagonal edges, so the drift
    # form is not an M-matrix and nonnegativity is not guaranteed.  The known
    # undershoot below the slit at h = 1/16 is gone at h = 1/32.
    mins = []
    for h in (1 / 16, 1 / 32):
        g = build_grid(preset("slit_square"), h)
        f = assemble(g, drift(0.5))
        assert not f.is_m_matrix and f.positive_coupling == pytest.approx(h / 48, rel=1e-9)
        U = metric_ball(g, (0.4375, 0.71875), 0.3)
        A = metric_ball(g, (0.4375, 0.71875), 0.1, closed=True)
        e = equilibrium_potential(f, A, U)
        mins.append(e.meta["min"])
    assert -2e-4 < mins[0] < 0 and mins[1] >= 0


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

_FORMS = {
    "laplacian": laplacian(),
    "drift": drift(0.5),
    "skew": skew("0.5*x"),
    "killed": CoefficientField({"b1": "0.3", "c": "1"}),
}


def _setup(name, cx, cy, r_a, r_u):
    g = build_grid(preset("slit_square"), 1 / 16)
    f = assemble(g, _FORMS[name])
    U = metric_ball(g, (cx, cy), r_u)
    A = metric_ball(g, (cx, cy), r_a, closed=True).intersection(U)
    return f, A, U


@given(st.sampled_from(sorted(_FORMS)), st.floats(0.3, 0.7), st.floats(0.2, 0.8), st.floats(0.06, 0.15),
       st.floats(0.0, 0.1), st.floats(0.25, 0.4), st.floats(0.0, 0.3))
def test_capacity_monotone(name, cx, cy, ra, dra, ru, dru):
    f, A, U = _setup(name, cx, cy, ra, ru)
    _, A2, _ = _setup(name, cx, cy, ra + dra, ru)
    _, _, U2 = _setup(name, cx, cy, ra, ru + dru)
    if len(A) == 0:
        return
    c = capacity(f, A, U, with_adjoint=False).value
    assert capacity(f, A2, U, with_adjoint=False).value >= c * (1 - 1e-9)
    assert capacity(f, A, U2, with_adjoint=False).value <= c * (1 + 1e-9)


@given(st.sampled_from(sorted(_FORMS)), st.floats(0.3, 0.7), st.floats(0.2, 0.8),
       st.one_of(st.just(0.0), st.floats(1e-3, 1.0)))
def test_sandwich_and_duality(name, cx, cy, alpha):
    f, A, U = _setup(name, cx, cy, 0.1, 0.3)
    if len(A) == 0:
        return
    res = capacity(f, A, U, alpha)
    consts = estimate_constants(f)
    a = sandwich_alpha(f, U, alpha)
    lo, val, hi = res.sandwich(consts, a)
    assert lo <= val * (1 + 1e-9) and val <= hi * (1 + 1e-9)
    e, eh = res.potential, res.adjoint_potential
    ee = energy(f, U, e, e, alpha)
    assert energy(f, U, e, eh, alpha) == pytest.approx(ee, rel=1e-6)
    assert energy(f, U, eh, eh, alpha) == pytest.approx(ee, rel=1e-6)
    assert res.value >= 0
    vals = e.values[U.indices]
    assert vals.max() <= 1 + 1e-8
    if f.is_m_matrix:
        assert vals.min() >= -1e-12


@given(st.floats(0.3, 0.7), st.floats(0.2, 0.8), st.floats(0.05, 0.15), st.floats(0.2, 0.4))
def test_equilibrium_measure_nonnegative_for_symmetric_forms(cx, cy, ra, ru):
    f, A, U = _setup("laplacian", cx, cy, ra, ru)
    if len(A) == 0:
        return
    res = capacity(f, A, U)
    assert res.nu.min() >= -1e-10
    assert res.nu.sum() == pytest.approx(res.value, rel=1e-9)
