"""Steady incompressible Navier-Stokes on Taylor-Hood P2-P1 elements.

Unknown layout: ``[u1 (P2 nodes), u2 (P2 nodes), p (vertices)]``. The weak
form is

    int (u . grad u) . v + 1/Re int grad u : grad v - int p div v = 0
    -int q div u = 0

with the gradient-gradient viscous term, so the outlet carries the natural
"do-nothing" condition and fixes the pressure level.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import GeometryError, NonConvergenceError, SingularMatrixError
from .fem import (
    ElementSpace,
    SparsityPattern,
    apply_dirichlet,
    local_stiffness,
    merge_constraints,
    physical_points,
    scatter_vector,
    shape_eval,
)
from .linalg import LUFactor
from .mesh import INLET, OUTLET, SYMMETRY, BoundaryTag, P2Mesh

log = logging.getLogger(__name__)


@dataclass
class FlowField:
    mesh: P2Mesh
    u: np.ndarray
    p: np.ndarray
    re: float

    @property
    def u1(self):
        return self.u[: self.mesh.n_nodes]

    @property
    def u2(self):
        return self.u[self.mesh.n_nodes:]

    def stacked(self):
        return np.concatenate([self.u, self.p])


@dataclass
class NewtonReport:
    absolute: list[float] = field(default_factory=list)
    relative: list[float] = field(default_factory=list)
    converged: bool = False
    re: float = float("nan")

    @property
    def iterations(self) -> int:
        return len(self.absolute) - 1

    def rows(self):
        """(iteration, absolute, relative) for iterations 1..n."""
        return [(k, self.absolute[k], self.relative[k]) for k in range(1, len(self.absolute))]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "absolute_residual", "relative_residual"])
            for k, a, r in self.rows():
                w.writerow([k, repr(a), repr(r)])


# ----------------------------------------------------------------------------
# boundary data

def bundle_constraints(mesh: P2Mesh, inflow: float = 1.0):
    """Essential conditions of the strip problem.

    Inlet: u = (inflow, 0); tube walls: u = 0; symmetry edges: zero normal
    component (edges must be axis-aligned); outlet: natural.
    """
    base = mesh.base
    n = mesh.n_nodes
    pairs = []
    tags = base.tags
    for tag in tags:
        nodes = mesh.boundary_p2_nodes(tag)
        if tag.code == INLET:
            pairs += [(nodes, inflow), (n + nodes, 0.0)]
        elif tag.is_tube:
            pairs += [(nodes, 0.0), (n + nodes, 0.0)]
        elif tag.code == SYMMETRY:
            E = base.boundary_edges[base.edges_with(tag)]
            d = base.vertices[E[:, 1]] - base.vertices[E[:, 0]]
            horiz = np.abs(d[:, 1]) <= 1e-12 * np.abs(d).max()
            vert = np.abs(d[:, 0]) <= 1e-12 * np.abs(d).max()
            if not np.all(horiz | vert):
                raise GeometryError("symmetry boundary must consist of axis-aligned edges")
            for sel, comp in ((horiz, 1), (vert, 0)):
                if np.any(sel):
                    ids = base.edges_with(tag)[sel]
                    nn = np.unique(np.concatenate([base.boundary_edges[ids].ravel(),
                                                   base.n_vertices + mesh.boundary_edge_ids[ids]]))
                    pairs.append((comp * n + nn, 0.0))
    return merge_constraints(*pairs)


def boundary_flux(flow: FlowField, tag) -> float:
    """Integral of u . n over the edges carrying ``tag`` (Simpson, exact for P2)."""
    mesh = flow.mesh
    base = mesh.base
    ids = base.edges_with(tag)
    E = base.boundary_edges[ids]
    V = base.vertices
    d = V[E[:, 1]] - V[E[:, 0]]
    normal_len = np.column_stack([d[:, 1], -d[:, 0]])   # outward normal times length
    mid = base.n_vertices + mesh.boundary_edge_ids[ids]
    n = mesh.n_nodes
    total = 0.0
    for comp in range(2):
        u = flow.u[comp * n:(comp + 1) * n]
        avg = (u[E[:, 0]] + 4 * u[mid] + u[E[:, 1]]) / 6.0
        total += float(np.sum(avg * normal_len[:, comp]))
    return total


def mass_imbalance(flow: FlowField) -> float:
    return abs(boundary_flux(flow, BoundaryTag(INLET)) + boundary_flux(flow, BoundaryTag(OUTLET)))


# ----------------------------------------------------------------------------
# discrete operator

class FlowProblem:
    """Precomputed quadrature data, sparsity pattern and constraints for one mesh.

    ``forcing(x) -> (..., 2)`` adds a body force (used for manufactured
    solutions); ``constraints`` overrides the strip boundary conditions and
    ``pressure_pin`` fixes one pressure vertex when no natural outflow exists.
    """

    def __init__(self, mesh: P2Mesh, re: float, constraints=None, forcing=None,
                 pressure_pin: tuple[int, float] | None = None):
        self.mesh = mesh
        self.re = float(re)
        self.nn = mesh.n_nodes
        self.nv = mesh.base.n_vertices
        self.n = 2 * self.nn + self.nv
        self.vel = ElementSpace(mesh, "P2", 5)
        self.psi, _ = shape_eval("P1", self.vel.rule.points)
        cn = mesh.cell_nodes
        self.cell_dofs = np.hstack([cn, self.nn + cn, 2 * self.nn + mesh.base.triangles])
        self.pattern = SparsityPattern(self.cell_dofs, self.cell_dofs, (self.n, self.n))
        self.K = local_stiffness(self.vel)
        # B[e, k, i, b] = int psi_k dphi_b/dx_i
        self.B = np.einsum("eq,qk,eqbi->ekib", self.vel.dx, self.psi, self.vel.grad)
        if constraints is None:
            constraints = bundle_constraints(mesh)
        dofs, vals = constraints
        if pressure_pin is not None:
            dofs, vals = merge_constraints((dofs, vals), ([2 * self.nn + pressure_pin[0]], pressure_pin[1]))
        self.fixed_dofs, self.fixed_values = dofs, vals
        self.free = np.ones(self.n, dtype=bool)
        self.free[dofs] = False
        self.load = np.zeros(self.n)
        if forcing is not None:
            x = physical_points(mesh.base, self.vel.rule)
            f = forcing(x)   # (e, q, 2)
            for i in range(2):
                local = np.einsum("eq,eq,qa->ea", self.vel.dx, f[..., i], self.vel.phi)
                self.load[i * self.nn:(i + 1) * self.nn] += scatter_vector(cn, local, self.nn)

    # -- state helpers ------------------------------------------------------
    def lift(self, x=None):
        x = np.zeros(self.n) if x is None else np.array(x, dtype=float)
        x[self.fixed_dofs] = self.fixed_values
        return x

    def field(self, x, re=None) -> FlowField:
        return FlowField(self.mesh, x[: 2 * self.nn].copy(), x[2 * self.nn:].copy(),
                         self.re if re is None else re)

    def _cell_values(self, x):
        cn = self.mesh.cell_nodes
        u1 = x[: self.nn][cn]
        u2 = x[self.nn: 2 * self.nn][cn]
        p = x[2 * self.nn:][self.mesh.base.triangles]
        return u1, u2, p

    # -- residual and Jacobian ----------------------------------------------
    def local_system(self, x, convection=True, jacobian=True):
        nu = 1.0 / self.re
        sp_ = self.vel
        u1, u2, p = self._cell_values(x)
        uc = np.stack([u1, u2], axis=1)                      # (e, 2, 6)
        r = np.zeros((len(u1), 15))
        visc = np.einsum("eab,eib->eia", self.K, uc) * nu    # (e, 2, 6)
        pres = np.einsum("ekib,ek->eib", self.B, p)          # int p dphi_b/dx_i
        div = np.einsum("ekib,eib->ek", self.B, uc)          # int q div u
        r[:, :6] = visc[:, 0] - pres[:, 0]
        r[:, 6:12] = visc[:, 1] - pres[:, 1]
        r[:, 12:] = -div
        if convection:
            U = np.stack([sp_.values(u1), sp_.values(u2)], axis=-1)            # (e, q, 2)
            G = np.stack([sp_.gradients(u1), sp_.gradients(u2)], axis=2)      # (e, q, i, j) = du_i/dx_j
            conv = np.einsum("eqj,eqij->eqi", U, G)                            # (u . grad) u_i
            cres = np.einsum("eq,qa,eqi->eia", sp_.dx, sp_.phi, conv)
            r[:, :6] += cres[:, 0]
            r[:, 6:12] += cres[:, 1]
        if not jacobian:
            return r, None
        J = np.zeros((len(u1), 15, 15))
        A = nu * self.K
        if convection:
            ug = np.einsum("eqj,eqbj->eqb", U, sp_.grad)
            A = A + np.einsum("eq,qa,eqb->eab", sp_.dx, sp_.phi, ug)
            D = np.einsum("eq,qa,eqij,qb->eijab", sp_.dx, sp_.phi, G, sp_.phi)
        for i in range(2):
            si = slice(6 * i, 6 * i + 6)
            J[:, si, si] = A
            if convection:
                for j in range(2):
                    J[:, si, 6 * j:6 * j + 6] += D[:, i, j]
            Bi = self.B[:, :, i, :]            # (e, 3, 6)
            J[:, si, 12:] = -np.transpose(Bi, (0, 2, 1))
            J[:, 12:, si] = -Bi
        return r, J

    def residual(self, x, convection=True):
        r, _ = self.local_system(x, convection, jacobian=False)
        R = scatter_vector(self.cell_dofs, r, self.n) - self.load
        R[~self.free] = 0.0
        return R

    def residual_and_jacobian(self, x, convection=True):
        """Residual (constrained rows zeroed) and the Dirichlet-eliminated Jacobian."""
        r, J = self.local_system(x, convection)
        R = scatter_vector(self.cell_dofs, r, self.n) - self.load
        R[~self.free] = 0.0
        A = self.pattern.fill(J)
        A, _ = apply_dirichlet(A, np.zeros(self.n), self.fixed_dofs, np.zeros(len(self.fixed_dofs)))
        return R, A

    def jacobian_raw(self, x, convection=True):
        _, J = self.local_system(x, convection)
        return self.pattern.fill(J)


def residual_and_jacobian(state: FlowField, problem: FlowProblem | None = None):
    problem = problem or FlowProblem(state.mesh, state.re)
    return problem.residual_and_jacobian(state.stacked())


# ----------------------------------------------------------------------------
# solvers

def _factor(A):
    # perturbed pivots mean a null space, e.g. a pressure level left free
    f = LUFactor(A)
    if f.perturbed:
        raise SingularMatrixError(f"flow matrix is singular ({f.perturbed} perturbed pivots); "
                                  "is the pressure level fixed?")
    return f


def solve_stokes(mesh: P2Mesh, re: float = 1.0, problem: FlowProblem | None = None) -> FlowField:
    """One linear solve without the convective term."""
    problem = problem or FlowProblem(mesh, re)
    x = problem.lift()
    R, A = problem.residual_and_jacobian(x, convection=False)
    x = x - _factor(A).solve(R)
    return problem.field(x)


def newton_solve(mesh: P2Mesh, re: float, initial: FlowField | None = None,
                 rtol: float = 1e-10, atol: float = 1e-12, max_iter: int = 25,
                 problem: FlowProblem | None = None):
    """Newton iteration from ``initial`` (a Stokes solution by default).

    Relative residuals are measured against the residual of the initial
    guess. Raises :class:`NonConvergenceError` carrying the report.
    """
    problem = problem or FlowProblem(mesh, re)
    if initial is None:
        initial = solve_stokes(mesh, re, problem)
    x = problem.lift(initial.stacked())
    report = NewtonReport(re=re)
    R, A = problem.residual_and_jacobian(x)
    r0 = float(np.linalg.norm(R))
    report.absolute.append(r0)
    report.relative.append(1.0)
    log.info("Newton Re=%g it 0 |R|=%.3e", re, r0)
    if r0 <= atol:
        report.converged = True
        return problem.field(x, re), report
    for it in range(1, max_iter + 1):
        x = x - _factor(A).solve(R)
        R, A = problem.residual_and_jacobian(x)
        res = float(np.linalg.norm(R))
        report.absolute.append(res)
        report.relative.append(res / r0)
        log.info("Newton Re=%g it %d |R|=%.3e rel=%.3e", re, it, res, res / r0)
        if not np.isfinite(res):
            break
        if res / r0 <= rtol or res <= atol:
            report.converged = True
            return problem.field(x, re), report
    raise NonConvergenceError(f"Newton did not converge at Re={re} "
                              f"(relative residual {report.relative[-1]:.3e})", report)


def continuation_ladder(re: float):
    return [r for r in (10.0, 50.0) if r < re] + [float(re)]


def continuation_solve(mesh: P2Mesh, re: float, **kw):
    """Newton over the ladder Re = 10, 50, target, warm-starting each stage."""
    if re <= 0:
        raise ValueError("Reynolds number must be positive")
    state, reports = None, []
    for stage in continuation_ladder(re):
        try:
            state, rep = newton_solve(mesh, stage, initial=state, **kw)
        except NonConvergenceError as exc:
            raise NonConvergenceError(f"continuation failed at Re={stage}: {exc}", exc.report) from None
        reports.append(rep)
    return state, reports
