"""Derived fields and figure data: streamfunction, line samples, film profiles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import AlignmentError, SelectionError
from .fem import DofMap, ElementSpace, SparsityPattern, apply_dirichlet, local_mass, local_stiffness, shape_eval
from .flow import FlowField
from .linalg import lu_solve
from .mesh import OUTLET, BoundaryTag, Mesh, P2Mesh, boundary_nodes, segment_lengths


def _base(mesh) -> Mesh:
    return mesh.base if isinstance(mesh, P2Mesh) else mesh


# ----------------------------------------------------------------------------
# streamfunction

def boundary_streamfunction(flow: FlowField) -> tuple[np.ndarray, np.ndarray]:
    """Values of psi on the boundary vertices by integrating the normal flux.

    psi changes along a boundary edge by the outward flux through it
    (Simpson rule on the quadratic trace). The walk starts at the boundary
    vertex closest to the origin, where psi = 0.
    """
    mesh = flow.mesh
    base = mesh.base
    E = base.boundary_edges
    V = base.vertices
    n = mesh.n_nodes
    mid = base.n_vertices + mesh.boundary_edge_ids
    d = V[E[:, 1]] - V[E[:, 0]]
    flux = np.zeros(len(E))
    for comp, nrm in ((0, d[:, 1]), (1, -d[:, 0])):
        u = flow.u[comp * n:(comp + 1) * n]
        flux += (u[E[:, 0]] + 4 * u[mid] + u[E[:, 1]]) / 6.0 * nrm
    succ = {int(a): (int(b), k) for k, (a, b) in enumerate(E)}
    verts = np.unique(E)
    start = int(verts[np.argmin(np.linalg.norm(V[verts], axis=1))])
    psi = {start: 0.0}
    v, acc = start, 0.0
    seen = set()
    while True:
        nxt, k = succ[v]
        if k in seen:
            break
        seen.add(k)
        acc += flux[k]
        if nxt == start:
            break
        psi[nxt] = acc
        v = nxt
    if len(seen) != len(E):
        # further loops (holes) get the value at their lowest-left vertex: the
        # strip geometries produced here always have a single loop
        raise SelectionError("streamfunction boundary data needs a single boundary loop")
    nodes = np.array(sorted(psi))
    return nodes, np.array([psi[i] for i in nodes])


def vorticity(flow: FlowField) -> np.ndarray:
    """L2 projection of du2/dx1 - du1/dx2 onto P1."""
    mesh = flow.mesh
    base = mesh.base
    space = ElementSpace(base, "P1", 4)
    phi2, ref2 = shape_eval("P2", space.rule.points)
    grad2 = space.geom.grads(ref2)
    cells = mesh.cell_nodes
    n = mesh.n_nodes
    g1 = np.einsum("eqai,ea->eqi", grad2, flow.u[cells])
    g2 = np.einsum("eqai,ea->eqi", grad2, flow.u[n + cells])
    w = g2[..., 0] - g1[..., 1]
    dm = DofMap.p1(base)
    M = SparsityPattern(dm.cell_dofs, dm.cell_dofs, (base.n_vertices,) * 2).fill(local_mass(space))
    rhs = np.bincount(base.triangles.ravel(), weights=np.einsum("eq,eq,qa->ea", space.dx, w, space.phi).ravel(),
                      minlength=base.n_vertices)
    x, _ = lu_solve(M, rhs)
    return x


def streamfunction(flow: FlowField) -> np.ndarray:
    """P1 streamfunction from -lap psi = omega with flux-derived boundary values."""
    base = flow.mesh.base
    omega = vorticity(flow)
    space = ElementSpace(base, "P1", 2)
    dm = DofMap.p1(base)
    pattern = SparsityPattern(dm.cell_dofs, dm.cell_dofs, (base.n_vertices,) * 2)
    K = pattern.fill(local_stiffness(space))
    b = pattern.fill(local_mass(space)) @ omega
    nodes, vals = boundary_streamfunction(flow)
    A, b = apply_dirichlet(K, b, nodes, vals)
    psi, _ = lu_solve(A, b)
    psi[nodes] = vals
    return psi


def interior_extrema(psi, mesh) -> tuple[np.ndarray, np.ndarray]:
    """Interior vertices where psi is a strict local min / max over neighbours."""
    base = _base(mesh)
    T = base.triangles
    n = base.n_vertices
    lo = np.full(n, np.inf)
    hi = np.full(n, -np.inf)
    for a in range(3):
        for b in range(3):
            if a != b:
                np.minimum.at(lo, T[:, a], psi[T[:, b]])
                np.maximum.at(hi, T[:, a], psi[T[:, b]])
    interior = np.ones(n, dtype=bool)
    interior[np.unique(base.boundary_edges)] = False
    return np.flatnonzero(interior & (psi < lo)), np.flatnonzero(interior & (psi > hi))


def gap_vortex_strength(psi, mesh, x_left: float, x_right: float, wall_side: str = "bottom",
                        strip_width: float = 1.0) -> float:
    """Strength of reversed circulation between two tube stations.

    The wall value is psi on the symmetry line carrying the tubes. Within
    ``x_left < x1 < x_right`` on that half of the strip, returns the largest
    excursion of psi beyond the wall value, on the side opposite to the bulk
    flow (zero when there is no reversed flow).
    """
    base = _base(mesh)
    V = base.vertices
    y_wall = 0.0 if wall_side == "bottom" else strip_width
    half = (V[:, 1] < strip_width / 2) if wall_side == "bottom" else (V[:, 1] > strip_width / 2)
    sel = (V[:, 0] > x_left) & (V[:, 0] < x_right) & half
    on_wall = np.abs(V[:, 1] - y_wall) < 1e-9
    if not np.any(on_wall) or not np.any(sel):
        raise SelectionError("empty gap region")
    psi_w = float(np.median(psi[on_wall]))
    bulk = float(np.median(psi[np.abs(V[:, 1] - strip_width / 2) < 0.25 * strip_width])) - psi_w
    excursion = -np.sign(bulk) * (psi[sel] - psi_w)
    return float(max(excursion.max(), 0.0))


# ----------------------------------------------------------------------------
# point location and evaluation

class PointLocator:
    """Find the containing triangle of query points.

    Candidates are the triangles whose centroids are nearest to the point;
    a point is accepted when all barycentric coordinates are >= -tol.
    """

    def __init__(self, mesh, k: int = 12, tol: float = 1e-10):
        self.base = base = _base(mesh)
        V, T = base.vertices, base.triangles
        self.tree = cKDTree(V[T].mean(axis=1))
        self.k = min(k, len(T))
        self.tol = tol
        a = V[T[:, 1]] - V[T[:, 0]]
        b = V[T[:, 2]] - V[T[:, 0]]
        det = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
        self.inv = np.stack([np.stack([b[:, 1], -b[:, 0]], -1), np.stack([-a[:, 1], a[:, 0]], -1)], 1) / det[:, None, None]
        self.origin = V[T[:, 0]]

    def locate(self, pts):
        """Return ``(cells, bary)``; cells are -1 for points outside the mesh."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        _, cand = self.tree.query(pts, k=self.k)
        cand = cand.reshape(len(pts), -1)
        rel = pts[:, None, :] - self.origin[cand]
        lam = np.einsum("pkij,pkj->pki", self.inv[cand], rel)
        bary = np.concatenate([1 - lam.sum(-1, keepdims=True), lam], axis=-1)
        score = bary.min(-1)
        best = np.argmax(score, axis=1)
        idx = np.arange(len(pts))
        cells = np.where(score[idx, best] >= -self.tol, cand[idx, best], -1)
        return cells, bary[idx, best]


def evaluate(values, mesh, pts, locator: PointLocator | None = None):
    """Evaluate a P1 (vertex) or P2 (node) field at points; NaN outside."""
    values = np.asarray(values, dtype=float)
    locator = locator or PointLocator(mesh)
    cells, bary = locator.locate(pts)
    base = locator.base
    out = np.full(len(cells), np.nan)
    ok = cells >= 0
    if len(values) == base.n_vertices:
        out[ok] = np.einsum("pa,pa->p", values[base.triangles[cells[ok]]], bary[ok])
    else:
        if not isinstance(mesh, P2Mesh) or len(values) != mesh.n_nodes:
            raise ValueError("field length matches neither the P1 nor the P2 numbering")
        phi, _ = shape_eval("P2", bary[ok])
        nodes = mesh.cell_nodes[cells[ok]]
        out[ok] = np.einsum("pa,pa->p", values[nodes], phi if phi.ndim == 2 else phi[None])
    return out


@dataclass
class MidlineProfile:
    x: np.ndarray
    values: np.ndarray
    name: str = "value"

    @property
    def gaps(self) -> np.ndarray:
        return np.isnan(self.values)

    def rows(self):
        return [(float(x), None if np.isnan(v) else float(v)) for x, v in zip(self.x, self.values)]


def midline_profile(values, mesh, n_samples: int = 600, name: str = "value", x2: float | None = None,
                    locator: PointLocator | None = None) -> MidlineProfile:
    """Sample a field on x2 = const (default: half the strip width).

    Points that do not fall inside a fluid triangle (tube notches touching
    the line) are reported as NaN gaps.
    """
    base = _base(mesh)
    lo, hi = base.vertices.min(axis=0), base.vertices.max(axis=0)
    if x2 is None:
        x2 = 0.5 * (lo[1] + hi[1])
    x = np.linspace(lo[0], hi[0], n_samples)
    pts = np.column_stack([x, np.full_like(x, x2)])
    return MidlineProfile(x, evaluate(values, mesh, pts, locator), name)


@dataclass
class DeviationCurve:
    x: np.ndarray
    delta: np.ndarray
    name: str = ""

    @property
    def max_abs(self) -> float:
        ok = ~np.isnan(self.delta)
        return float(np.max(np.abs(self.delta[ok]))) if ok.any() else float("nan")


def deviation_curves(reference: MidlineProfile, others, scale: float = 100.0) -> list[DeviationCurve]:
    """``(other - reference) * scale`` sample by sample; gaps stay NaN."""
    out = []
    for other in others:
        if len(other.x) != len(reference.x) or not np.allclose(other.x, reference.x, rtol=0, atol=1e-12):
            raise AlignmentError(f"profile {other.name!r} is sampled at different abscissae")
        out.append(DeviationCurve(reference.x.copy(), (other.values - reference.values) * scale, other.name))
    return out


# ----------------------------------------------------------------------------
# concentration and film observables

def outlet_average(c, mesh) -> float:
    """Mean of a P1 field over the outlet (exact for the linear trace)."""
    base = _base(mesh)
    ids = base.edges_with(BoundaryTag(OUTLET))
    E = base.boundary_edges[ids]
    length = segment_lengths(base, E, base.boundary_codes[ids])
    c = np.asarray(c, dtype=float)
    return float(np.sum(length * (c[E[:, 0]] + c[E[:, 1]]) / 2) / np.sum(length))


@dataclass
class FilmProfile:
    tube: int
    theta: np.ndarray
    d: np.ndarray
    t: float = 0.0

    def argmax_theta(self) -> float:
        return float(self.theta[np.argmax(self.d)])

    def at(self, theta: float) -> float:
        return float(np.interp(theta, self.theta, self.d))


def _tube_rows(wall_nodes, mesh, tube_index: int):
    base = _base(mesh)
    if tube_index not in base.tubes:
        raise SelectionError(f"no tube {tube_index}; mesh has tubes {sorted(base.tubes)}")
    sel = boundary_nodes(base, BoundaryTag.tube_wall(tube_index))
    pos = {int(v): i for i, v in enumerate(wall_nodes)}
    try:
        rows = np.array([pos[int(v)] for v in sel.nodes])
    except KeyError:
        raise SelectionError(f"tube {tube_index} vertices are not film unknowns") from None
    return base, sel, rows


def film_profile(state, ops, tube_index: int) -> FilmProfile:
    """Film thickness around one tube versus the angle from the leading edge."""
    base, sel, rows = _tube_rows(ops.wall_nodes, ops.base, tube_index)
    circ = base.tubes[tube_index]
    rel = base.vertices[sel.nodes] - np.asarray(circ.center)
    theta = np.arccos(np.clip(-rel[:, 0] / np.linalg.norm(rel, axis=1), -1, 1))
    order = np.argsort(theta, kind="stable")
    return FilmProfile(tube_index, theta[order], state.d[rows][order], state.t)


def oxide_mass(state, ops, tube_index: int) -> float:
    """``2 * integral of d`` over the half tube (lumped arc-length quadrature)."""
    _, sel, rows = _tube_rows(ops.wall_nodes, ops.base, tube_index)
    return float(2.0 * np.sum(sel.weights * state.d[rows]))
