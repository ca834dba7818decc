import numpy as np
import pytest
import scipy.linalg
from hypothesis import given
from hypothesis import strategies as st
from scipy import sparse

from bhplab.errors import EllipticityViolation, NegativeKilling
from bhplab.expr import parse
from bhplab.forms import (AssumptionConstants, CoefficientField, a_R, assemble, cap_comparison_constant, drift,
                          estimate_constants, laplacian, lowest_eigenvalue, sector_constant, skew)
from bhplab.geometry import NodeSet, box, build_grid, metric_ball, preset


def five_point(n):
    """Standard 5-point stiffness (unscaled) on an n x n interior lattice."""
    T = sparse.diags([-np.ones(n - 1), 2 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1])
    I = sparse.identity(n)
    return (sparse.kron(I, T) + sparse.kron(T, I)).tocsr()


def full_apply(form, fn):
    """``E u`` on interior rows for the interpolant of ``fn`` including boundary vertices."""
    u = fn(form.grid.xy[:, 0], form.grid.xy[:, 1])
    ub = fn(form.bvert_xy[:, 0], form.bvert_xy[:, 1])
    return form.E @ u + form.E_b @ ub


def far_from_boundary(grid):
    return np.flatnonzero(grid.delta > 1.5 * grid.h)


def test_laplacian_is_five_point_stiffness(lap_square32):
    f = lap_square32
    assert abs(f.E - five_point(31)).max() < 1e-12
    assert f.E_skew.nnz == 0 and not f.kappa.any()
    assert abs(f.E_hat - f.E).max() < 1e-12


def test_constant_skew_leaves_symmetric_part_laplacian(square32, lap_square32):
    f = assemble(square32, skew(0.5))
    assert abs(f.E_sym - lap_square32.E_sym).max() < 1e-12
    # a constant antisymmetric a integrates to a boundary term: its P1 form vanishes
    assert abs(f.E_skew).max() < 1e-12 if f.E_skew.nnz else True


def test_constant_drift_decomposition_and_exactness(square32, lap_square32):
    beta = 0.7
    f = assemble(square32, drift(beta))
    assert not f.kappa.any()
    assert abs(f.E_sym - lap_square32.E_sym).max() < 1e-12
    assert abs(f.E_skew + f.E_skew.T).max() < 1e-15
    k = far_from_boundary(square32)
    h2 = square32.h ** 2
    np.testing.assert_allclose(full_apply(f, lambda x, y: x)[k], beta * h2, rtol=1e-10)
    np.testing.assert_allclose(full_apply(f, lambda x, y: y)[k], 0.0, atol=1e-14)


def test_variable_skew_exactness(square32):
    sigma = 0.8
    f = assemble(square32, skew(f"{sigma!r}*x"))
    k = far_from_boundary(square32)
    # E(y, phi) = int -s(x) d_x phi = int s'(x) phi = sigma h^2
    np.testing.assert_allclose(full_apply(f, lambda x, y: y)[k], sigma * square32.h ** 2, rtol=1e-10)
    assert abs(f.E_skew).max() > 0


def test_killing_weight_from_c(square32):
    f = assemble(square32, CoefficientField({"c": "2"}))
    np.testing.assert_allclose(f.kappa, 2.0)
    d = (f.E_sym - f.E_s).diagonal()
    np.testing.assert_allclose(d, 2.0 * f.mass)


def test_assembly_errors(square32):
    with pytest.raises(EllipticityViolation):
        assemble(square32, CoefficientField({"a11": "-1"}))
    with pytest.raises(NegativeKilling):
        assemble(square32, CoefficientField({"b1": "x"}))  # div b = 1, c = 0
    with pytest.raises(NegativeKilling):
        assemble(square32, CoefficientField({"c": "-0.5"}))


def test_coefficient_file_round_trip(tmp_path):
    k = {"s": 0.3, "beta": 0.2}
    cf = CoefficientField({"a12": parse("s*x", k), "a21": parse("-s*x", k), "b1": parse("beta*cos(pi*y)", k),
                           "c": "1 + x*x"}, "mixed")
    path = tmp_path / "mixed.ini"
    path.write_text(cf.to_text())
    back = CoefficientField.load(path)
    assert back.name == "mixed"
    x, y = np.linspace(0, 1, 7), np.linspace(1, 0, 7)
    for key in ("a11", "a12", "a21", "a22", "b1", "b2", "d1", "d2", "c"):
        np.testing.assert_array_equal(back(key, x, y), cf(key, x, y))
    assert CoefficientField.from_text("[constants]\nbeta = 0.25\n[fields]\nb1 = beta\n")("b1", 0.0, 0.0) == 0.25


def test_structural_invariants(slit32):
    f = assemble(slit32, CoefficientField({"a12": "0.3*y", "a21": "-0.3*y", "b1": "0.4", "d2": "0.2", "c": "1"}))
    assert abs(f.E - f.E_sym - f.E_skew).max() < 1e-14
    assert abs(f.E_sym - f.E_s - sparse.diags(f.kappa * f.mass)).max() < 1e-14
    assert abs(f.E_skew + f.E_skew.T).max() < 1e-14
    assert f.E.shape == (slit32.n, slit32.n)
    # E_s dominates ellipticity * E_hat
    rng = np.random.default_rng(0)
    for _ in range(5):
        u = rng.standard_normal(f.n)
        assert u @ f.E_s @ u >= f.ellipticity * (u @ f.E_hat @ u) * (1 - 1e-12)


# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------


def dense_sector_constant(form):
    """sqrt of the top generalized eigenvalue of K^T E1^-1 K v = mu E1 v."""
    E1 = (form.E_sym + sparse.diags(form.mass)).toarray()
    K = form.E_skew.toarray()
    M = K.T @ np.linalg.solve(E1, K)
    return float(np.sqrt(scipy.linalg.eigh(0.5 * (M + M.T), E1, eigvals_only=True)[-1]))


def test_laplacian_constants(lap_slit32):
    c = estimate_constants(lap_slit32)
    assert c.C0 == 0 and c.C1 == 1
    assert all(getattr(c, f"C{k}") == 0 for k in range(2, 9))


def test_sector_constant_against_dense_oracle():
    g = build_grid(preset("slit_square"), 1 / 16)
    vals = []
    for s in (0.25, 0.5):
        f = assemble(g, skew(f"{s!r}*x"))
        est, spread = sector_constant(f, probes=16, seed=1, tol=1e-10)
        ref = dense_sector_constant(f)
        assert est == pytest.approx(ref, rel=1e-3)
        assert spread >= 0
        vals.append(est)
    assert 0 < vals[0] < vals[1] < np.inf
    f = assemble(g, skew(0.5))
    assert estimate_constants(f).C1 == 1.0


def test_drift_constants_closed_form(square32):
    for beta in (0.5, 1.0):
        c = estimate_constants(assemble(square32, drift(beta)))
        assert c.C4 == 0
        assert c.C5 == pytest.approx(beta ** 2 / 4)
        assert c.C2 == pytest.approx(beta ** 2 / 4)
        assert c.C8 == c.C2 + c.C3 + c.C5 + c.C7


def test_C0_scale_free_for_constant_a():
    vals = [sector_constant(assemble(build_grid(preset("square"), h), skew(0.4)))[0] for h in (1 / 16, 1 / 32)]
    assert vals[0] == pytest.approx(vals[1], abs=1e-12)


def test_a_R_examples():
    zero = AssumptionConstants(0, 1, 0, 0, 0, 0, 0, 0)
    assert a_R(zero, 1.0) == 1.0
    one = AssumptionConstants(0.5, 1, 0, 0, 0, 0, 0, 0)
    assert a_R(one, 0.5) == pytest.approx(16.0)
    c2 = AssumptionConstants(0, 1, 0.3, 0, 0, 0, 0, 0)
    alpha = 0.4
    eps = np.geomspace(1e-4, 1e2, 200001)
    inner = (eps / alpha + 0.3 / eps).min()  # brute-force infimum
    assert inner == pytest.approx(2 * np.sqrt(0.3 / alpha), rel=1e-6)
    assert a_R(c2, alpha) == pytest.approx((1 + inner) ** 2, rel=1e-6)
    assert cap_comparison_constant(c2, alpha) ** 2 == pytest.approx(a_R(c2, alpha) ** 0.5 * (1 + inner), rel=1e-6)
    with pytest.raises(ValueError):
        a_R(zero, 0.0)


def test_lowest_eigenvalue_square():
    f = assemble(build_grid(preset("square"), 1 / 64), laplacian())
    assert lowest_eigenvalue(f) == pytest.approx(2 * np.pi ** 2, rel=0.01)


def test_lowest_eigenvalue_matches_eigsh(lap_slit32):
    from scipy.sparse.linalg import eigsh
    f = lap_slit32
    ref = eigsh(f.E_sym.tocsc(), k=1, M=sparse.diags(f.mass).tocsc(), sigma=0, which="LM")[0][0]
    assert lowest_eigenvalue(f) == pytest.approx(ref, rel=1e-7)


def test_lowest_eigenvalue_disk_and_scaling():
    g = build_grid(box(-1.0, -1.0, 1.0, 1.0), 1 / 64)
    f = assemble(g, laplacian())
    lam1 = lowest_eigenvalue(f, metric_ball(g, (0.0, 0.0), 1.0))
    assert lam1 == pytest.approx(2.404825557695773 ** 2, rel=0.05)
    lam_half = lowest_eigenvalue(f, metric_ball(g, (0.0, 0.0), 0.5))
    assert lam_half / lam1 == pytest.approx(4.0, rel=0.05)


def test_lambda_R_and_A_R_reported(lap_slit32):
    nodes = metric_ball(lap_slit32.grid, (0.5, 0.25), 0.2)
    c = estimate_constants(lap_slit32, nodes=nodes)
    assert c.lambda_R > 0 and c.A_R == 1.0
    assert c.as_dict()["C8"] == 0


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.integers(0, 1000))
def test_skew_quadratic_form_vanishes(s, b1, b2, seed):
    g = build_grid(preset("slit_square"), 1 / 16)
    f = assemble(g, CoefficientField({"a12": f"{s!r}*y", "a21": f"-{s!r}*y", "b1": repr(b1), "b2": repr(b2)}))
    u = np.random.default_rng(seed).standard_normal(f.n)
    assert abs(u @ (f.E_skew @ u)) <= 1e-12 * (u @ u)


@given(st.floats(0.1, 2), st.floats(0.1, 2), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_assembly_linear_in_a(p, q, r, t):
    g = build_grid(preset("L_shape"), 1 / 16)
    a1 = {"a11": f"{p!r}", "a22": "1", "a12": f"{r!r}*x", "a21": "0"}
    a2 = {"a11": "1", "a22": f"{q!r}+x*0", "a12": "0", "a21": f"{t!r}*y"}
    a12 = {"a11": f"{p!r}+1", "a22": f"1+{q!r}", "a12": f"{r!r}*x", "a21": f"{t!r}*y"}
    E1, E2, E3 = (assemble(g, CoefficientField(a)).E for a in (a1, a2, a12))
    assert abs(E1 + E2 - E3).max() <= 1e-12 * abs(E3).max()


@given(st.floats(0.1, 0.45), st.floats(0.0, 0.3))
def test_eigenvalue_antitone(r, dr):
    g = build_grid(preset("slit_square"), 1 / 16)
    f = assemble(g, laplacian())
    small = metric_ball(g, (0.5, 0.5), r)
    big = metric_ball(g, (0.5, 0.5), r + dr)
    if len(small) == 0:
        return
    assert lowest_eigenvalue(f, small) >= lowest_eigenvalue(f, big) * (1 - 1e-7)
