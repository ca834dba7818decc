"""P1 finite-element assembly of the bilinear form of a divergence-form operator.

For coefficients ``a`` (2x2), ``b``, ``d`` (vectors) and ``c`` (scalar) the form is

    E(f, g) = int sum_kl a_kl d_k f d_l g + (b . grad f) g + f (d . grad g) + c f g.

It is assembled directly in its decomposed shape.  Writing ``sym(a)`` and
``skew(a)`` for the symmetric and antisymmetric parts of ``a``,
``e = (b - d)/2`` and ``kappa = c - (div b + div d)/2``,

    E = E_s + K_a + K_e + diag(kappa * mass)

where ``E_s`` is the ``sym(a)`` stiffness, ``K_a`` the ``skew(a)`` stiffness
and ``K_e(f, g) = int (e . grad f) g - f (e . grad g)``.  The symmetric part
is ``E_sym = E_s + diag(kappa * mass)`` and the skew part ``K_a + K_e``.

Matrices follow the convention ``E[i, j] = E(phi_j, phi_i)``: rows index test
functions, columns trial functions, so ``E @ u`` is the weak residual of ``u``.

Sufficient constants (sup norms over barycenters and nodes, with
``lam = lambda_min(sym a)``, ``beta = |b + d| / sqrt(lam)``, ``gamma = |c|``,
``s = |skew(a)| / lam`` and ``epsilon = |e| / sqrt(lam)``)::

    C1 = max(lambda_max(sym a), 1 / lambda_min(sym a))
    C2 = beta^2 / 2,   C3 = gamma^2 / 2      (beta^2/4 or gamma^2/4 if the other vanishes)
    C4 = 2 s^2,        C5 = 2 epsilon^2       (s^2 or epsilon^2 if the other vanishes)
    C6 = s^2,          C7 = 2 epsilon^2
    C8 = C2 + C3 + C5 + C7

``C0`` (sector constant) is estimated by block power iteration.
"""
from __future__ import annotations

from configparser import ConfigParser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .errors import EllipticityViolation, NegativeKilling, NonConvergence
from .expr import Expression, parse
from .geometry import Grid, NodeSet, _seg_point_distance

Field = Callable[[np.ndarray, np.ndarray], np.ndarray]
FIELD_NAMES = ("a11", "a12", "a21", "a22", "b1", "b2", "d1", "d2", "c")
DEFAULTS = {"a11": "1", "a12": "0", "a21": "0", "a22": "1",
            "b1": "0", "b2": "0", "d1": "0", "d2": "0", "c": "0"}


@dataclass(frozen=True)
class CoefficientField:
    """Coefficient functions of ``(x, y)``.  Each entry is an
    :class:`~bhplab.expr.Expression` or any numpy-broadcasting callable."""

    fields: Mapping[str, Field]
    name: str = "custom"

    def __post_init__(self):
        full = {k: parse(v) for k, v in DEFAULTS.items()}
        for k, v in dict(self.fields).items():
            if k not in FIELD_NAMES:
                raise KeyError(f"unknown coefficient {k!r}")
            full[k] = parse(v) if isinstance(v, str) else v
        object.__setattr__(self, "fields", full)

    def __call__(self, key, x, y):
        x = np.asarray(x, float)
        y = np.asarray(y, float)
        return np.broadcast_to(np.asarray(self.fields[key](x, y), float), x.shape).astype(float)

    def matrix(self, x, y):
        """``a`` as an array of shape ``x.shape + (2, 2)``."""
        a = np.empty(np.shape(x) + (2, 2))
        a[..., 0, 0] = self("a11", x, y)
        a[..., 0, 1] = self("a12", x, y)
        a[..., 1, 0] = self("a21", x, y)
        a[..., 1, 1] = self("a22", x, y)
        return a

    def vector(self, key, x, y):
        return np.stack([self(key + "1", x, y), self(key + "2", x, y)], axis=-1)

    def is_expression(self) -> bool:
        return all(isinstance(v, Expression) for v in self.fields.values())

    def to_text(self) -> str:
        if not self.is_expression():
            raise TypeError("only expression-based fields serialize")
        consts = {}
        for v in self.fields.values():
            consts.update(v.constants)
        lines = []
        if consts:
            lines.append("[constants]")
            lines += [f"{k} = {consts[k]!r}" for k in sorted(consts)]
        lines.append("[fields]")
        lines += [f"{k} = {self.fields[k].source}" for k in FIELD_NAMES]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, name="file") -> "CoefficientField":
        cp = ConfigParser()
        cp.optionxform = str
        cp.read_string(text)
        consts = {k: float(v) for k, v in cp["constants"].items()} if cp.has_section("constants") else {}
        fields = {}
        if cp.has_section("fields"):
            for k, v in cp["fields"].items():
                fields[k] = parse(v, consts)
        return cls(fields, name)

    @classmethod
    def load(cls, path) -> "CoefficientField":
        p = Path(path)
        return cls.from_text(p.read_text(), p.stem)


def laplacian() -> CoefficientField:
    return CoefficientField({}, "laplacian")


def drift(beta: float = 0.5, direction=(1.0, 0.0)) -> CoefficientField:
    k = {"beta": float(beta)}
    return CoefficientField(
        {"b1": parse(f"beta*{direction[0]!r}", k), "b2": parse(f"beta*{direction[1]!r}", k)},
        f"drift({beta!r})",
    )


def skew(s: float | str = 0.5) -> CoefficientField:
    """``a = [[1, s], [-s, 1]]``; ``s`` may be an expression in ``x, y``."""
    src = repr(float(s)) if not isinstance(s, str) else s
    return CoefficientField({"a12": parse(src), "a21": parse(f"-({src})")}, f"skew({src})")


PRESET_COEFFICIENTS = {"laplacian": laplacian, "drift": drift, "skew": skew}


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class AssembledForm:
    """Assembled matrices on the interior nodes of ``grid``.

    Boundary vertices (lattice points of the closure, slit banks duplicated)
    are numbered separately; ``E_b`` couples interior rows to them and
    ``E_bt`` is the boundary-row block (used for adjoint boundary data).
    """

    grid: Grid
    coeff: CoefficientField
    E: sparse.csr_matrix
    E_sym: sparse.csr_matrix
    E_skew: sparse.csr_matrix
    E_s: sparse.csr_matrix
    E_hat: sparse.csr_matrix
    kappa: np.ndarray
    mass: np.ndarray
    E_b: sparse.csr_matrix
    E_bt: sparse.csr_matrix
    bvert_xy: np.ndarray
    bvert_side: np.ndarray
    pattern: sparse.csr_matrix  # interior x (interior + boundary) structural coupling
    ellipticity: float
    norms: dict
    n_triangles: int
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.E.shape[0]

    @property
    def n_bverts(self) -> int:
        return len(self.bvert_xy)

    @property
    def is_symmetric(self) -> bool:
        return self.E_skew.nnz == 0 or abs(self.E_skew).max() == 0

    @property
    def positive_coupling(self) -> float:
        """Largest positive off-diagonal entry of ``E`` (interior and boundary
        columns) relative to the largest diagonal entry.  First-order terms put
        ``+-beta h / 6`` on diagonal edges, where the stiffness coupling is 0."""
        if "positive_coupling" not in self._cache:
            off = self.E.tocsr(copy=True)
            off.setdiag(0)
            worst = max(off.max(), self.E_b.max() if self.E_b.nnz else 0.0, 0.0)
            self._cache["positive_coupling"] = float(worst / self.E.diagonal().max())
        return self._cache["positive_coupling"]

    @property
    def is_m_matrix(self) -> bool:
        """Nonpositive couplings: the discrete maximum principle holds for
        ``kappa = 0`` and potentials stay in ``[0, 1]``."""
        return self.positive_coupling <= 1e-12

    def matrix(self, adjoint: bool = False, part: str = "E") -> sparse.csr_matrix:
        M = {"E": self.E, "E_sym": self.E_sym, "E_s": self.E_s, "E_hat": self.E_hat}[part]
        return M.T.tocsr() if adjoint else M


def _triangles(grid: Grid):
    nx, ny = grid.shape[0] - 1, grid.shape[1] - 1
    ci, cj = np.meshgrid(np.arange(nx), np.arange(ny))
    ci, cj = ci.ravel(), cj.ravel()
    lo = np.stack([np.c_[ci, cj], np.c_[ci + 1, cj], np.c_[ci + 1, cj + 1]], axis=1)
    up = np.stack([np.c_[ci, cj], np.c_[ci + 1, cj + 1], np.c_[ci, cj + 1]], axis=1)
    tri = np.empty((2 * len(ci), 3, 2), dtype=np.int64)
    tri[0::2] = lo
    tri[1::2] = up
    return tri  # lattice coordinates (i, j) of the vertices


def _cut_by_slit(grid: Grid, tri_xy: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Triangles whose interior (or an edge not lying on the slit) meets a slit."""
    dom = grid.domain
    h = grid.h
    tol = 1e-9 * dom.scale
    cut = np.zeros(len(tri_xy), bool)
    if not dom.slits:
        return cut
    x0, y0 = grid.origin
    nx = grid.shape[0] - 1
    ny = grid.shape[1] - 1
    for s in dom.slits:
        L = np.hypot(s[2] - s[0], s[3] - s[1])
        m = max(int(np.ceil(L / h * 8)), 1)
        t = np.linspace(0.0, 1.0, m + 1)
        px = s[0] + t * (s[2] - s[0])
        py = s[1] + t * (s[3] - s[1])
        ci = np.floor((px - x0) / h + 1e-9).astype(int)
        cj = np.floor((py - y0) / h + 1e-9).astype(int)
        for di in (-1, 0):
            for dj in (-1, 0):
                ii, jj = ci + di, cj + dj
                ok = (ii >= 0) & (ii < nx) & (jj >= 0) & (jj < ny)
                for k in (0, 1):
                    tid = 2 * (jj[ok] * nx + ii[ok]) + k
                    P = np.c_[px[ok], py[ok]]
                    V = tri_xy[tid]
                    lam = _barycentric(V, P)
                    inside = (lam >= -1e-9).all(axis=1)
                    # point is harmless if it is a vertex or sits on an edge lying on the slit
                    on_vertex = (lam > 1 - 1e-9).any(axis=1)
                    zero = np.abs(lam) <= 1e-9
                    on_edge = zero.sum(axis=1) == 1
                    harmless = on_vertex.copy()
                    for e in range(3):
                        a, b = (e + 1) % 3, (e + 2) % 3
                        sel = on_edge & zero[:, e]
                        if sel.any():
                            va, vb = V[sel, a], V[sel, b]
                            both = (_seg_point_distance(va[:, 0], va[:, 1], s) <= tol) & (
                                _seg_point_distance(vb[:, 0], vb[:, 1], s) <= tol
                            )
                            harmless[np.flatnonzero(sel)[both]] = True
                    bad = inside & ~harmless
                    cut[tid[bad]] = True
    return cut & keep


def _barycentric(V, P):
    v0, v1, v2 = V[:, 0], V[:, 1], V[:, 2]
    det = (v1[:, 0] - v0[:, 0]) * (v2[:, 1] - v0[:, 1]) - (v2[:, 0] - v0[:, 0]) * (v1[:, 1] - v0[:, 1])
    l1 = ((P[:, 0] - v0[:, 0]) * (v2[:, 1] - v0[:, 1]) - (v2[:, 0] - v0[:, 0]) * (P[:, 1] - v0[:, 1])) / det
    l2 = ((v1[:, 0] - v0[:, 0]) * (P[:, 1] - v0[:, 1]) - (P[:, 0] - v0[:, 0]) * (v1[:, 1] - v0[:, 1])) / det
    return np.c_[1 - l1 - l2, l1, l2]


def assemble(grid: Grid, coeff: CoefficientField, kappa_tol: float = 1e-10) -> AssembledForm:
    """Assemble the decomposed P1 form with barycenter quadrature."""
    dom = grid.domain
    h = grid.h
    tri = _triangles(grid)
    tri_xy = grid.origin + h * tri.astype(float)
    cen = tri_xy.mean(axis=1)
    keep = dom.in_open_union(cen[:, 0], cen[:, 1]) & ~dom.on_slit(cen[:, 0], cen[:, 1])
    keep &= ~_cut_by_slit(grid, tri_xy, keep)
    tri, tri_xy, cen = tri[keep], tri_xy[keep], cen[keep]
    T = len(tri)

    # vertex numbering: interior nodes first, then boundary vertices keyed by (i, j, side)
    node = grid.lat2node[tri[..., 1], tri[..., 0]]
    tol = 1e-9 * dom.scale
    tips = dom.free_tips()
    bkeys: dict[tuple[int, int, int], int] = {}
    vid = node.copy()
    for t, k in zip(*np.nonzero(node < 0)):
        i, j = tri[t, k]
        px, py = tri_xy[t, k]
        side = 0
        if not any(abs(px - a) <= tol and abs(py - b) <= tol for a, b in tips):
            for s in dom.slits:
                if _seg_point_distance(px, py, s) <= tol:
                    off = (cen[t, 1] - s[1]) if s[1] == s[3] else (cen[t, 0] - s[0])
                    side = 1 if off > 0 else -1
                    break
        key = (int(i), int(j), side)
        if key not in bkeys:
            bkeys[key] = len(bkeys)
        vid[t, k] = grid.n + bkeys[key]
    nb = len(bkeys)
    bvert_xy = np.zeros((nb, 2))
    bvert_side = np.zeros(nb, dtype=np.int64)
    for (i, j, side), v in bkeys.items():
        bvert_xy[v] = grid.origin + h * np.array([i, j], float)
        bvert_side[v] = side

    # geometry of each triangle
    x = tri_xy[..., 0]
    y = tri_xy[..., 1]
    twoA = (x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0])
    area = 0.5 * twoA
    G = np.empty((T, 3, 2))
    G[:, 0] = np.c_[y[:, 1] - y[:, 2], x[:, 2] - x[:, 1]]
    G[:, 1] = np.c_[y[:, 2] - y[:, 0], x[:, 0] - x[:, 2]]
    G[:, 2] = np.c_[y[:, 0] - y[:, 1], x[:, 1] - x[:, 0]]
    G /= twoA[:, None, None]

    a = coeff.matrix(cen[:, 0], cen[:, 1])
    a_sym = 0.5 * (a + a.transpose(0, 2, 1))
    a_skw = 0.5 * (a - a.transpose(0, 2, 1))
    b = coeff.vector("b", cen[:, 0], cen[:, 1])
    d = coeff.vector("d", cen[:, 0], cen[:, 1])
    c = coeff("c", cen[:, 0], cen[:, 1])
    e = 0.5 * (b - d)
    eig = np.linalg.eigvalsh(a_sym) if T else np.ones((0, 2))
    lam_min = float(eig[:, 0].min()) if T else 1.0
    if lam_min <= 0:
        raise EllipticityViolation(f"symmetric part of a is not positive definite (min eigenvalue {lam_min})")

    # local matrices, index [t, i(test), j(trial)]
    Ks = area[:, None, None] * np.einsum("tjk,tkl,til->tij", G, a_sym, G)
    Ka = area[:, None, None] * np.einsum("tjk,tkl,til->tij", G, a_skw, G)
    eG = np.einsum("tk,tjk->tj", e, G)
    Ke = (area / 3.0)[:, None, None] * (eG[:, None, :] - eG[:, :, None])
    Kh = area[:, None, None] * np.einsum("tjk,tik->tij", G, G)

    N = grid.n + nb
    rows = np.repeat(vid, 3, axis=1).ravel()
    cols = np.tile(vid, (1, 3)).ravel()

    def glob(K):
        M = sparse.coo_matrix((K.ravel(), (rows, cols)), shape=(N, N)).tocsr()
        M.sum_duplicates()
        return M

    Ms, Ma, Me, Mh = glob(Ks), glob(Ka), glob(Ke), glob(Kh)
    pattern_full = sparse.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(N, N)).tocsr()
    pattern_full.data[:] = 1.0

    # killing weights at nodes from a central divergence
    px, py = grid.xy[:, 0], grid.xy[:, 1]
    div = np.zeros(grid.n)
    for key in ("b", "d"):
        div += (coeff(key + "1", px + h, py) - coeff(key + "1", px - h, py)) / (2 * h)
        div += (coeff(key + "2", px, py + h) - coeff(key + "2", px, py - h)) / (2 * h)
    kappa = coeff("c", px, py) - 0.5 * div
    if kappa.min() < -kappa_tol:
        raise NegativeKilling(f"killing weight {kappa.min()} < 0 at node {int(np.argmin(kappa))}")
    kappa = np.where(np.abs(kappa) <= kappa_tol, 0.0, kappa)
    mass = np.full(grid.n, h * h)

    n = grid.n
    ii = slice(0, n)
    bb = slice(n, N)
    E_s = Ms[ii, ii].tocsr()
    K = (Ma + Me).tocsr()
    K.eliminate_zeros()
    E_skew = K[ii, ii].tocsr()
    E_sym = (E_s + sparse.diags(kappa * mass)).tocsr()
    E = (E_sym + E_skew).tocsr()
    full = (Ms + K).tocsr()
    E_b = full[ii, bb].tocsr()
    E_bt = full[bb, ii].tocsr()

    # sup norms for the constants
    gx = np.r_[cen[:, 0], px]
    gy = np.r_[cen[:, 1], py]
    bb_ = coeff.vector("b", gx, gy)
    dd_ = coeff.vector("d", gx, gy)
    aa_ = coeff.matrix(gx, gy)
    skw = 0.5 * (aa_[..., 0, 1] - aa_[..., 1, 0])
    norms = {
        "lambda_min": lam_min,
        "lambda_max": float(eig[:, 1].max()) if T else 1.0,
        "skew_a": float(np.abs(skw).max()),
        "b_plus_d": float(np.hypot(*(bb_ + dd_).T).max()),
        "e": float(np.hypot(*(0.5 * (bb_ - dd_)).T).max()),
        "c": float(np.abs(coeff("c", gx, gy)).max()),
    }
    return AssembledForm(
        grid=grid,
        coeff=coeff,
        E=E,
        E_sym=E_sym,
        E_skew=E_skew,
        E_s=E_s,
        E_hat=Mh[ii, ii].tocsr(),
        kappa=kappa,
        mass=mass,
        E_b=E_b,
        E_bt=E_bt,
        bvert_xy=bvert_xy,
        bvert_side=bvert_side,
        pattern=pattern_full[ii, :].tocsr(),
        ellipticity=lam_min,
        norms=norms,
        n_triangles=T,
    )


# ---------------------------------------------------------------------------
# Constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssumptionConstants:
    C0: float
    C1: float
    C2: float
    C3: float
    C4: float
    C5: float
    C6: float
    C7: float
    C0_spread: float = 0.0
    lambda_R: float | None = None

    @property
    def C8(self) -> float:
        return self.C2 + self.C3 + self.C5 + self.C7

    @property
    def A_R(self) -> float | None:
        if self.lambda_R is None:
            return None
        return a_R(self, min(1.0, self.lambda_R))

    def as_dict(self) -> dict:
        out = {f"C{k}": getattr(self, f"C{k}") for k in range(9)}
        out["C0_spread"] = self.C0_spread
        out["lambda_R"] = self.lambda_R
        out["A_R"] = self.A_R
        return out


def _pair_split(u: float, v: float) -> tuple[float, float]:
    """Constants (p, q) with ``u X + v Y <= 2 sqrt(p X^2 + q Y^2)``."""
    if u > 0 and v > 0:
        return u * u / 2, v * v / 2
    return u * u / 4, v * v / 4


def sector_constant(form: AssembledForm, probes: int = 16, seed: int = 0, max_iter: int = 2000,
                    tol: float = 1e-6) -> tuple[float, float]:
    """Estimate ``sup |E_skew(u, v)| / (||u||_E1 ||v||_E1)`` by block power
    iteration; returns ``(estimate, spread across probes)``."""
    if probes < 16:
        raise ValueError("probes must be at least 16")
    K = form.E_skew
    if K.nnz == 0 or abs(K).max() == 0:
        return 0.0, 0.0
    E1 = (form.E_sym + sparse.diags(form.mass)).tocsc()
    lu = spla.splu(E1)
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((form.n, probes))
    prev = None
    for it in range(max_iter):
        W = lu.solve(np.asarray(K @ V))
        num = np.einsum("ij,ij->j", np.asarray(K @ V), W)
        den = np.einsum("ij,ij->j", V, np.asarray(E1 @ V))
        rq = num / den
        V = lu.solve(np.asarray(K.T @ W))
        V /= np.sqrt(np.einsum("ij,ij->j", V, np.asarray(E1 @ V)))
        top = rq.max()
        if prev is not None and abs(top - prev) <= tol * top:
            return float(np.sqrt(top)), float(np.sqrt(top) - np.sqrt(max(rq.min(), 0.0)))
        prev = top
    raise NonConvergence(f"sector-constant power iteration did not settle in {max_iter} steps")


def estimate_constants(form: AssembledForm, probes: int = 16, seed: int = 0,
                       nodes: NodeSet | None = None, **power_kw) -> AssumptionConstants:
    nm = form.norms
    lam = nm["lambda_min"]
    C1 = max(nm["lambda_max"], 1.0 / lam, 1.0)
    # sup norms measured against the energy density of E_s
    beta = nm["b_plus_d"] / np.sqrt(lam)
    s_a = nm["skew_a"] / lam
    eps = nm["e"] / np.sqrt(lam)
    C2, C3 = _pair_split(beta, nm["c"])
    C4, C5 = (4 * v for v in _pair_split(s_a, eps))
    C6 = s_a ** 2
    C7 = 2 * eps ** 2
    C0, spread = sector_constant(form, probes, seed, **power_kw)
    lam_R = lowest_eigenvalue(form, nodes) if nodes is not None else None
    return AssumptionConstants(C0, C1, C2, C3, C4, C5, C6, C7, spread, lam_R)


def a_R(constants: AssumptionConstants, alpha: float) -> float:
    """``(1 + C0 C1/alpha)^4 (1 + 2 sqrt(m/alpha))^2`` with ``m = max(C2, C3/alpha)``;
    the second factor is the closed-form infimum over epsilon of
    ``1 + epsilon/alpha + m/epsilon``."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    m = max(constants.C2, constants.C3 / alpha)
    return (1 + constants.C0 * constants.C1 / alpha) ** 4 * (1 + 2 * np.sqrt(m / alpha)) ** 2


def cap_comparison_constant(constants: AssumptionConstants, alpha: float) -> float:
    """Constant ``C`` with ``tilde Cap <= Cap <= C^2 tilde Cap``."""
    m = max(constants.C2, constants.C3 / alpha)
    return (1 + constants.C0 * constants.C1 / alpha) * (1 + 2 * np.sqrt(m / alpha))


def lowest_eigenvalue(form: AssembledForm, nodes: NodeSet | None = None, tol: float = 1e-8,
                      max_iter: int = 10000, seed: int = 0) -> float:
    """Smallest Dirichlet eigenvalue of ``E_sym`` on ``nodes`` (mass inner product)
    by shifted-free inverse iteration."""
    idx = np.arange(form.n) if nodes is None else nodes.indices
    if len(idx) == 0:
        raise ValueError("empty node set")
    A = form.E_sym[idx][:, idx].tocsc()
    m = form.mass[idx]
    lu = spla.splu(A)
    v = np.ones(len(idx)) + 0.01 * np.random.default_rng(seed).standard_normal(len(idx))
    lam = np.inf
    for _ in range(max_iter):
        w = lu.solve(m * v)
        w /= np.sqrt(np.dot(w, m * w))
        new = float(w @ (A @ w))
        v = w
        if abs(new - lam) <= tol * new:
            return new
        lam = new
    raise NonConvergence("inverse iteration did not converge")
