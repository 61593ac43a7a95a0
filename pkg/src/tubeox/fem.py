"""Lagrange P1/P2 elements on affine triangles and sparse assembly.

Element-local matrices are computed for all cells at once with numpy and
scattered into CSR through a cached :class:`SparsityPattern`, so that repeated
Newton assemblies only redo the numeric fill.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.special import roots_jacobi

from .errors import ConstraintError, SingularElementError
from .mesh import Mesh, P2Mesh

# ----------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureRule:
    """Points in barycentric coordinates; weights sum to the reference area 1/2."""

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def xi(self) -> np.ndarray:
        """Reference coordinates (xi, eta) = (lambda1, lambda2)."""
        return self.points[:, 1:]


def _orbit(a, b=None):
    if b is None:
        c = 1 - 2 * a
        return [(a, a, c), (a, c, a), (c, a, a)]
    c = 1 - a - b
    return [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]


def _sym_rule(parts, degree):
    pts, wts = [], []
    for w, orbit in parts:
        pts.extend(orbit)
        wts.extend([w] * len(orbit))
    return QuadratureRule(np.array(pts), 0.5 * np.array(wts), degree)


# Strang-Fix / Dunavant symmetric rules; weights normalised to unit area.
_RULES = {
    1: _sym_rule([(1.0, [(1 / 3, 1 / 3, 1 / 3)])], 1),
    2: _sym_rule([(1 / 3, _orbit(1 / 6))], 2),
    4: _sym_rule([(0.223381589678011, _orbit(0.445948490915965)),
                  (0.109951743655322, _orbit(0.091576213509771))], 4),
    5: _sym_rule([(0.225, [(1 / 3, 1 / 3, 1 / 3)]),
                  (0.132394152788506, _orbit(0.470142064105115)),
                  (0.125939180544827, _orbit(0.101286507323456))], 5),
}


@lru_cache(maxsize=None)
def collapsed_gauss(degree: int) -> QuadratureRule:
    """Conical product rule (Gauss-Jacobi x Gauss-Legendre), exact to ``degree``."""
    n = degree // 2 + 1
    x, wx = roots_jacobi(n, 1.0, 0.0)   # weight (1 - x) on [-1, 1]
    y, wy = roots_jacobi(n, 0.0, 0.0)
    u = 0.5 * (1 + x)
    v = 0.5 * (1 + y)
    xi = np.repeat(u, n)
    eta = np.outer(1 - u, v).ravel()
    w = np.outer(wx, wy).ravel() / 8.0
    pts = np.column_stack([1 - xi - eta, xi, eta])
    return QuadratureRule(pts, w, degree)


def quadrature(degree: int) -> QuadratureRule:
    for d in sorted(_RULES):
        if d >= degree:
            return _RULES[d]
    return collapsed_gauss(degree)


# Gauss-Legendre on [0, 1] for edge integrals
def line_gauss(n: int = 3):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1), 0.5 * w


# ----------------------------------------------------------------------------
# shape functions

def shape_eval(kind: str, bary):
    """Basis values and reference gradients at barycentric points.

    Returns ``(values, grads)`` with shapes ``(..., nb)`` and ``(..., nb, 2)``
    where gradients are taken with respect to ``(xi, eta) = (l1, l2)``.
    P2 ordering: three vertices, then edges (0,1), (1,2), (2,0).
    """
    lam = np.asarray(bary, dtype=float)
    l0, l1, l2 = lam[..., 0], lam[..., 1], lam[..., 2]
    # d(lambda_k)/d(xi, eta)
    dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    if kind == "P1":
        vals = np.stack([l0, l1, l2], axis=-1)
        grads = np.broadcast_to(dl, vals.shape + (2,)).copy()
        return vals, grads
    if kind != "P2":
        raise ValueError(f"unknown element kind {kind!r}")
    vals = np.stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                     4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0], axis=-1)
    g = [
        (4 * l0 - 1)[..., None] * dl[0],
        (4 * l1 - 1)[..., None] * dl[1],
        (4 * l2 - 1)[..., None] * dl[2],
        4 * (l1[..., None] * dl[0] + l0[..., None] * dl[1]),
        4 * (l2[..., None] * dl[1] + l1[..., None] * dl[2]),
        4 * (l0[..., None] * dl[2] + l2[..., None] * dl[0]),
    ]
    return vals, np.stack(g, axis=-2)


# ----------------------------------------------------------------------------
# geometry and dof maps

@dataclass(frozen=True)
class Geometry:
    """Affine maps of all cells: ``det`` is twice the area, ``invJT`` maps
    reference gradients to physical ones."""

    det: np.ndarray
    invJT: np.ndarray

    @classmethod
    def of(cls, mesh: Mesh) -> "Geometry":
        V, T = mesh.vertices, mesh.triangles
        p0 = V[T[:, 0]]
        J = np.stack([V[T[:, 1]] - p0, V[T[:, 2]] - p0], axis=-1)  # columns
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        scale = np.maximum(np.abs(J).max(axis=(1, 2)) ** 2, 1e-300)
        bad = np.flatnonzero(det <= 1e-14 * scale)
        if len(bad):
            raise SingularElementError(int(bad[0]))
        inv = np.empty_like(J)
        inv[:, 0, 0] = J[:, 1, 1] / det
        inv[:, 1, 1] = J[:, 0, 0] / det
        inv[:, 0, 1] = -J[:, 0, 1] / det
        inv[:, 1, 0] = -J[:, 1, 0] / det
        return cls(det, np.transpose(inv, (0, 2, 1)))

    def grads(self, ref_grads):
        """Physical gradients (n_cells, nq, nb, 2) from reference ones (nq, nb, 2)."""
        return np.einsum("eik,qak->eqai", self.invJT, ref_grads)


@dataclass(frozen=True)
class DofMap:
    """Global numbering for one field.

    ``cell_dofs`` has one row per triangle; for ``P2-vector2`` the first six
    columns are component 1 and the next six component 2 (blocked numbering:
    component c of node k is ``c * n_nodes + k``). For ``boundary-P1`` the map
    covers only the listed boundary vertices and ``cell_dofs`` is empty.
    """

    kind: str
    cell_dofs: np.ndarray
    total_dofs: int
    nodes: np.ndarray | None = None

    @classmethod
    def p1(cls, mesh):
        base = mesh.base if isinstance(mesh, P2Mesh) else mesh
        return cls("P1-scalar", base.triangles, base.n_vertices)

    @classmethod
    def p2(cls, mesh: P2Mesh):
        return cls("P2-scalar", mesh.cell_nodes, mesh.n_nodes)

    @classmethod
    def p2_vector(cls, mesh: P2Mesh):
        n = mesh.n_nodes
        return cls("P2-vector2", np.hstack([mesh.cell_nodes, n + mesh.cell_nodes]), 2 * n)

    @classmethod
    def boundary_p1(cls, nodes):
        nodes = np.asarray(nodes, dtype=np.int64)
        return cls("boundary-P1", np.empty((0, 0), dtype=np.int64), len(nodes), nodes)


# ----------------------------------------------------------------------------
# sparse scatter

class SparsityPattern:
    """CSR structure of ``sum_e P_e^T A_e Q_e`` computed once (symbolic pass).

    ``fill(local)`` with ``local`` of shape (n_cells, nr, nc) returns the
    assembled matrix; values are accumulated with ``np.bincount`` so the
    result does not depend on the traversal order beyond rounding.
    """

    def __init__(self, row_dofs, col_dofs, shape):
        row_dofs = np.asarray(row_dofs, dtype=np.int64)
        col_dofs = np.asarray(col_dofs, dtype=np.int64)
        nr, nc = row_dofs.shape[1], col_dofs.shape[1]
        key = (row_dofs[:, :, None] * shape[1] + col_dofs[:, None, :]).ravel()
        uniq, inverse = np.unique(key, return_inverse=True)
        del key
        self._scatter = inverse.ravel().astype(np.int32 if len(uniq) < 2**31 else np.int64)
        del inverse
        self.shape = shape
        self.nnz = len(uniq)
        idx_type = np.int32 if max(shape) < 2**31 and self.nnz < 2**31 else np.int64
        self.indices = (uniq % shape[1]).astype(idx_type)
        self.indptr = np.zeros(shape[0] + 1, dtype=idx_type)
        np.cumsum(np.bincount(uniq // shape[1], minlength=shape[0]), out=self.indptr[1:])
        self.local_shape = (nr, nc)

    def fill(self, local) -> sp.csr_matrix:
        data = np.bincount(self._scatter, weights=np.asarray(local).ravel(), minlength=self.nnz)
        A = sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)
        A.has_sorted_indices = True
        return A


def scatter_vector(dofs, local, n):
    return np.bincount(np.asarray(dofs).ravel(), weights=np.asarray(local).ravel(), minlength=n)


# ----------------------------------------------------------------------------
# element kernels (all cells at once)

class ElementSpace:
    """Quadrature data for one element kind on one mesh."""

    def __init__(self, mesh, kind: str, degree: int):
        self.mesh = mesh
        base = mesh.base if isinstance(mesh, P2Mesh) else mesh
        self.geom = Geometry.of(base)
        self.kind = kind
        self.rule = quadrature(degree)
        self.phi, ref = shape_eval(kind, self.rule.points)
        self.grad = self.geom.grads(ref)
        self.w = self.rule.weights
        self.dx = self.geom.det[:, None] * self.w[None, :]   # (n_cells, nq)

    def values(self, cell_values):
        """Field at quadrature points from per-cell nodal values (n_cells, nb)."""
        return cell_values @ self.phi.T

    def gradients(self, cell_values):
        return np.einsum("eqai,ea->eqi", self.grad, cell_values)


def local_mass(space: ElementSpace, coef=None, trial: ElementSpace | None = None):
    trial = trial or space
    dx = space.dx if coef is None else space.dx * coef
    return np.einsum("eq,qa,qb->eab", dx, space.phi, trial.phi)


def local_stiffness(space: ElementSpace, coef=None):
    dx = space.dx if coef is None else space.dx * coef
    return np.einsum("eq,eqai,eqbi->eab", dx, space.grad, space.grad)


def local_advection(space: ElementSpace, velocity):
    """Rows test, columns trial: integral of phi_a (u . grad phi_b)."""
    ug = np.einsum("eqi,eqbi->eqb", velocity, space.grad)
    return np.einsum("eq,qa,eqb->eab", space.dx, space.phi, ug)


def local_conservative_transport(space: ElementSpace, velocity):
    """Rows test s, columns trial c: -integral of c (u . grad s)."""
    ug = np.einsum("eqi,eqai->eqa", velocity, space.grad)
    return -np.einsum("eq,eqa,qb->eab", space.dx, ug, space.phi)


def local_divergence(p_space: ElementSpace, u_space: ElementSpace, component: int):
    """Rows P1 test q, columns velocity component trial: integral q d(phi_b)/dx_i."""
    return np.einsum("eq,qk,eqb->ekb", u_space.dx, p_space.phi, u_space.grad[..., component])


def edge_flux_matrix(mesh: P2Mesh, edge_ids, u, n_gauss=3):
    """Local 2x2 matrices of the integral of (u . n) phi_i phi_j over boundary edges.

    ``u`` holds the blocked P2 velocity; edges are the given boundary edges
    (oriented, fluid on the left) so the outward normal is (dy, -dx)/len.
    Returns ``(dofs (m, 2), local (m, 2, 2))``.
    """
    base = mesh.base
    E = base.boundary_edges[edge_ids]
    V = base.vertices
    d = V[E[:, 1]] - V[E[:, 0]]
    length = np.linalg.norm(d, axis=1)
    normal = np.column_stack([d[:, 1], -d[:, 0]]) / length[:, None]
    mid = base.n_vertices + mesh.boundary_edge_ids[edge_ids]
    n = mesh.n_nodes
    s, w = line_gauss(n_gauss)
    # quadratic trace: nodes at s = 0, 1/2, 1
    q = np.stack([(1 - s) * (1 - 2 * s), s * (2 * s - 1), 4 * s * (1 - s)], axis=1)
    un = np.zeros((len(E), len(s)))
    for comp in range(2):
        nodal = np.stack([u[comp * n + E[:, 0]], u[comp * n + E[:, 1]], u[comp * n + mid]], axis=1)
        un += (nodal @ q.T) * normal[:, comp:comp + 1]
    lin = np.stack([1 - s, s], axis=1)
    local = np.einsum("eg,g,gi,gj->eij", un * length[:, None], w, lin, lin)
    return E, local


# ----------------------------------------------------------------------------
# high-level assembly

_FORMS = ("mass", "stiffness", "advection", "transport")


def assemble(form: str, mesh, kind: str = "P1", coef=None, velocity=None, degree=None,
             pattern: SparsityPattern | None = None) -> sp.csr_matrix:
    """Assemble a scalar bilinear form on P1 or P2.

    ``form`` is one of ``mass``, ``stiffness``, ``advection`` (test times
    ``u . grad trial``) or ``transport`` (``-trial u . grad test``);
    ``velocity`` is a callable mapping an :class:`ElementSpace` to the
    velocity at its quadrature points, ``coef`` a per-cell or per-point
    coefficient.
    """
    if form not in _FORMS:
        raise ValueError(f"unknown form {form!r}; expected one of {_FORMS}")
    p = 1 if kind == "P1" else 2
    if degree is None:
        degree = {"mass": 2 * p, "stiffness": 2 * p - 2, "advection": 3 * p, "transport": 3 * p}[form]
        degree = max(degree, 2 if kind == "P1" else 4)
    space = ElementSpace(mesh, kind, degree)
    if coef is not None:
        coef = np.asarray(coef, dtype=float)
        coef = coef[:, None] if coef.ndim == 1 else coef
    if form == "mass":
        local = local_mass(space, coef)
    elif form == "stiffness":
        local = local_stiffness(space, coef)
    else:
        U = velocity(space) if callable(velocity) else velocity
        local = local_advection(space, U) if form == "advection" else local_conservative_transport(space, U)
    dm = DofMap.p1(mesh) if kind == "P1" else DofMap.p2(mesh)
    if pattern is None:
        pattern = SparsityPattern(dm.cell_dofs, dm.cell_dofs, (dm.total_dofs, dm.total_dofs))
    return pattern.fill(local)


def assemble_load(mesh, kind: str, f, degree: int = 6) -> np.ndarray:
    """Load vector of ``f(x) -> values`` (vectorised over points)."""
    space = ElementSpace(mesh, kind, degree)
    base = mesh.base if isinstance(mesh, P2Mesh) else mesh
    x = physical_points(base, space.rule)
    fx = f(x)
    local = np.einsum("eq,eq,qa->ea", space.dx, fx, space.phi)
    dm = DofMap.p1(mesh) if kind == "P1" else DofMap.p2(mesh)
    return scatter_vector(dm.cell_dofs, local, dm.total_dofs)


def physical_points(mesh: Mesh, rule: QuadratureRule) -> np.ndarray:
    """Quadrature points in physical space, shape (n_cells, nq, 2)."""
    V = mesh.vertices[mesh.triangles]   # (e, 3, 2)
    return np.einsum("qk,ekj->eqj", rule.points, V)


# ----------------------------------------------------------------------------
# essential conditions

def merge_constraints(*pairs):
    """Combine (dofs, values) pairs; identical duplicates are allowed,
    conflicting ones raise :class:`ConstraintError`."""
    dofs = np.concatenate([np.asarray(d, dtype=np.int64).ravel() for d, _ in pairs]) if pairs else np.array([], np.int64)
    vals = np.concatenate([np.broadcast_to(np.asarray(v, dtype=float), np.shape(d)).ravel()
                           for d, v in pairs]) if pairs else np.array([])
    order = np.argsort(dofs, kind="stable")
    dofs, vals = dofs[order], vals[order]
    uniq, start = np.unique(dofs, return_index=True)
    first = np.repeat(vals[start], np.diff(np.append(start, len(dofs))))
    if len(dofs) and np.max(np.abs(vals - first)) > 1e-12:
        k = int(np.argmax(np.abs(vals - first)))
        raise ConstraintError(f"dof {dofs[k]} constrained to both {first[k]} and {vals[k]}")
    return uniq, vals[start]


def apply_dirichlet(A, b, dofs, values):
    """Symmetric elimination of essential conditions.

    Constrained rows and columns are zeroed, their diagonal set to one and
    the right-hand side lifted, so the solution reproduces ``values`` exactly.
    Returns new ``(A, b)``; the sparsity pattern of ``A`` is preserved.
    """
    dofs, values = merge_constraints((dofs, values))
    A = sp.csr_matrix(A, copy=True)
    A.sort_indices()
    n = A.shape[0]
    b = np.array(b, dtype=float, copy=True)
    g = np.zeros(n)
    g[dofs] = values
    b -= A @ g
    fixed = np.zeros(n, dtype=bool)
    fixed[dofs] = True
    row = np.repeat(np.arange(n), np.diff(A.indptr))
    A.data[fixed[row] | fixed[A.indices]] = 0.0
    diag = (row == A.indices) & fixed[row]
    A.data[diag] = 1.0
    missing = np.setdiff1d(dofs, row[diag])
    if len(missing):
        A = (A + sp.csr_matrix((np.ones(len(missing)), (missing, missing)), shape=A.shape)).tocsr()
    b[dofs] = values
    return A, b


def dirichlet_mask(n, dofs):
    m = np.zeros(n, dtype=bool)
    m[np.asarray(dofs, dtype=np.int64)] = True
    return m
