"""Transient oxidant transport with film growth on the tube walls.

Concentration is P1 on the fluid mesh, film thickness lives on the tube-wall
vertices. One time step of the two-level scheme

    M (c - c0)/tau + E c_m + W a(d_m) c_m = 0       (c = 1 on the inlet)
    W [(d - d0)/tau - a(d_m) c_m]       = 0       (tube-wall vertices)

with ``c_m = theta c + (1 - theta) c0`` (theta = 1/2 gives Crank-Nicolson)
is solved by Newton's method on the pair (c, d). ``E`` is the transport
operator ``-(c, u.grad s) + (1/Pe)(grad c, grad s) + <(u.n) c, s>_out`` and
``W`` the lumped arc-length weights of the wall vertices.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import scipy.sparse as sp

from .errors import NonConvergenceError, StepRejectedError
from .fem import (DofMap, ElementSpace, SparsityPattern, edge_flux_matrix, local_conservative_transport,
                  local_mass, local_stiffness, shape_eval)
from .flow import FlowField
from .linalg import LUFactor
from .mesh import INLET, OUTLET, BoundaryTag, P2Mesh, boundary_nodes, tube_tags

log = logging.getLogger(__name__)

NEWTON_ATOL = 1e-11
NEWTON_RTOL = 1e-9
NEWTON_MAX_ITER = 10


@dataclass(frozen=True)
class KineticsParams:
    """Dimensionless oxidation parameters.

    ``sh2_inv`` is 1/Sh2; zero switches the film law to pure linear kinetics.
    """

    sh1: float
    sh2_inv: float = 0.0
    pe: float = 10.0

    def __post_init__(self):
        if not self.sh1 > 0:
            raise ValueError(f"sh1 must be positive, got {self.sh1}")
        if not self.sh2_inv >= 0:
            raise ValueError(f"sh2_inv must be nonnegative, got {self.sh2_inv}")
        if not self.pe > 0:
            raise ValueError(f"pe must be positive, got {self.pe}")

    @classmethod
    def from_sh2(cls, sh1: float, sh2: float | None, pe: float):
        return cls(sh1, 0.0 if sh2 is None or math.isinf(sh2) else 1.0 / sh2, pe)


def robin_coefficient(d, k: KineticsParams):
    """Return ``(a, da/dd)`` with ``a = (1/sh1 + sh2_inv d)^-1``."""
    d = np.asarray(d, dtype=float)
    a = 1.0 / (1.0 / k.sh1 + k.sh2_inv * d)
    return a, -k.sh2_inv * a * a


@dataclass
class OxidationState:
    c: np.ndarray
    d: np.ndarray
    t: float = 0.0

    def copy(self):
        return OxidationState(self.c.copy(), self.d.copy(), self.t)


@dataclass
class StepReport:
    step: int
    t: float
    tau: float
    residuals: list[float] = field(default_factory=list)
    converged: bool = False
    theta: float = 0.5

    @property
    def iterations(self) -> int:
        return max(len(self.residuals) - 1, 0)


# ----------------------------------------------------------------------------
# spatial operators (independent of the step size)

def _p2_velocity(flow: FlowField, space: ElementSpace):
    """P2 velocity of ``flow`` at the quadrature points of a P1 space."""
    mesh = flow.mesh
    phi2, _ = shape_eval("P2", space.rule.points)
    cells = mesh.cell_nodes
    n = mesh.n_nodes
    return np.stack([flow.u[cells] @ phi2.T, flow.u[n + cells] @ phi2.T], axis=-1)


class TransportOperators:
    """Mass, transport and wall data of the concentration problem.

    ``walls`` selects the film-carrying boundary (all tube walls by default).
    """

    def __init__(self, flow: FlowField, k: KineticsParams, walls=None, degree: int = 4):
        mesh = flow.mesh
        if not isinstance(mesh, P2Mesh):
            raise TypeError("flow must live on a P2 mesh")
        self.flow = flow
        self.k = k
        self.base = base = mesh.base
        n = self.n = base.n_vertices
        space = ElementSpace(base, "P1", degree)
        dm = DofMap.p1(base)
        pattern = SparsityPattern(dm.cell_dofs, dm.cell_dofs, (n, n))
        U = _p2_velocity(flow, space)
        self.M = pattern.fill(local_mass(space))
        local = local_conservative_transport(space, U) + local_stiffness(space) / k.pe
        E = pattern.fill(local)
        out_ids = base.edges_with(BoundaryTag(OUTLET))
        if len(out_ids):
            dofs, loc = edge_flux_matrix(mesh, out_ids, flow.u)
            rows = np.repeat(dofs, 2, axis=1).ravel()
            cols = np.tile(dofs, (1, 2)).ravel()
            E = E + sp.csr_matrix((loc.ravel(), (rows, cols)), shape=(n, n))
        self.E = E.tocsr()
        self.inlet = np.unique(base.boundary_edges[base.edges_with(BoundaryTag(INLET))])
        if walls is None:
            walls = tube_tags(base)
        self.walls = boundary_nodes(base, walls)
        self.wall_nodes = self.walls.nodes
        self.W = self.walls.weights
        self.cell_peclet = self._cell_peclet(U)
        if self.cell_peclet > 1.0:
            log.warning("cell Peclet number %.2f exceeds 1; Galerkin transport may oscillate "
                        "(no stabilization is applied)", self.cell_peclet)

    def _cell_peclet(self, U) -> float:
        V, T = self.base.vertices, self.base.triangles
        h = np.max(np.linalg.norm(V[T] - V[np.roll(T, 1, axis=1)], axis=2), axis=1)
        speed = np.max(np.linalg.norm(U, axis=-1), axis=1)
        return float(np.max(self.k.pe * speed * h / 2))

    @property
    def m(self) -> int:
        return len(self.wall_nodes)

    def initial_state(self) -> OxidationState:
        """Homogeneous initial data with the inlet value imposed."""
        c = np.zeros(self.n)
        c[self.inlet] = 1.0
        return OxidationState(c, np.zeros(self.m), 0.0)

    def absorbed_flux(self, state: OxidationState) -> float:
        """Instantaneous oxidant flux into the walls: sum of W a(d) c."""
        a, _ = robin_coefficient(state.d, self.k)
        return float(np.sum(self.W * a * state.c[self.wall_nodes]))


# ----------------------------------------------------------------------------
# one time level

def film_residual(d_new, d_old, c_new, c_old, tau: float, k: KineticsParams, weights=1.0, theta: float = 0.5):
    """Film equation residual per wall vertex, weighted by the lumped boundary mass."""
    d_m = theta * np.asarray(d_new) + (1 - theta) * np.asarray(d_old)
    c_m = theta * np.asarray(c_new) + (1 - theta) * np.asarray(c_old)
    a, _ = robin_coefficient(d_m, k)
    return weights * ((np.asarray(d_new) - d_old) / tau - a * c_m)


class TransportStep:
    """Residual, Jacobian and Newton solver for one step size.

    The step matrix ``A0 = M/tau + theta E`` (inlet rows and columns
    eliminated) is factorized once. The wall coupling only adds a diagonal
    term on the wall vertices, so after eliminating the film unknowns the
    Newton matrix is ``A0 + P^T D P`` and is solved with the Woodbury
    identity using the precomputed ``Z = A0^-1 P^T``.
    """

    def __init__(self, ops: TransportOperators, tau: float, theta: float = 0.5):
        if not tau > 0:
            raise ValueError("tau must be positive")
        self.ops, self.tau, self.theta = ops, float(tau), float(theta)
        n, m = ops.n, ops.m
        self.P = sp.csr_matrix((np.ones(m), (np.arange(m), ops.wall_nodes)), shape=(m, n))
        A0 = (ops.M / tau + theta * ops.E).tocsr()
        self.A0 = A0
        free = np.ones(n, dtype=bool)
        free[ops.inlet] = False
        self.free = free
        Df = sp.diags(free.astype(float))
        Ae = (Df @ A0 @ Df + sp.diags((~free).astype(float))).tocsr()
        self._lu = LUFactor(Ae)
        rhs = np.zeros((n, m))
        rhs[ops.wall_nodes, np.arange(m)] = 1.0
        rhs[~free] = 0.0
        self.Z = np.asarray(self._lu.solve(rhs)).reshape(n, m) if m else np.zeros((n, 0))
        self.PZ = self.Z[ops.wall_nodes]

    def __call__(self, state_n: OxidationState, c, d):
        return self.residual(state_n, c, d)

    def _mid(self, state_n, c, d):
        th = self.theta
        wn = self.ops.wall_nodes
        c_m = th * c[wn] + (1 - th) * state_n.c[wn]
        d_m = th * d + (1 - th) * state_n.d
        return c_m, d_m

    def residual(self, state_n: OxidationState, c, d):
        """Stacked residual ``(R_c, R_d)``; inlet rows hold ``c - 1``."""
        ops, th, tau = self.ops, self.theta, self.tau
        c_m, d_m = self._mid(state_n, c, d)
        a, _ = robin_coefficient(d_m, ops.k)
        Rc = ops.M @ (c - state_n.c) / tau + ops.E @ (th * c + (1 - th) * state_n.c)
        np.add.at(Rc, ops.wall_nodes, ops.W * a * c_m)
        Rc[ops.inlet] = c[ops.inlet] - 1.0
        Rd = ops.W * ((d - state_n.d) / tau - a * c_m)
        return Rc, Rd

    def jacobian(self, state_n: OxidationState, c, d) -> sp.csr_matrix:
        """Monolithic Jacobian of :meth:`residual` (used for checks)."""
        ops, th = self.ops, self.theta
        n, m = ops.n, ops.m
        c_m, d_m = self._mid(state_n, c, d)
        a, da = robin_coefficient(d_m, ops.k)
        W = ops.W
        Jcc = self.A0 + self.P.T @ sp.diags(W * a * th) @ self.P
        Jcd = self.P.T @ sp.diags(W * da * th * c_m)
        Jdc = -sp.diags(W * a * th) @ self.P
        Jdd = sp.diags(W * (1.0 / self.tau - da * th * c_m))
        J = sp.bmat([[Jcc, Jcd], [Jdc, Jdd]]).tolil()
        for i in ops.inlet:
            J.rows[i] = [int(i)]
            J.data[i] = [1.0]
        return J.tocsr()

    def newton(self, state_n: OxidationState, step: int = 0, atol: float = NEWTON_ATOL,
               rtol: float = NEWTON_RTOL, max_iter: int = NEWTON_MAX_ITER):
        ops, th, tau = self.ops, self.theta, self.tau
        t_new = state_n.t + tau
        report = StepReport(step, t_new, tau, theta=th)
        c = state_n.c.copy()
        c[ops.inlet] = 1.0
        d = state_n.d.copy()
        W = ops.W
        wn = ops.wall_nodes
        r0 = None
        for it in range(max_iter + 1):
            Rc, Rd = self.residual(state_n, c, d)
            r = math.sqrt(float(Rc @ Rc + Rd @ Rd))
            report.residuals.append(r)
            if r0 is None:
                r0 = r
            if r <= atol or r <= rtol * r0:
                report.converged = True
                break
            if it == max_iter:
                break
            c_m, d_m = self._mid(state_n, c, d)
            a, da = robin_coefficient(d_m, ops.k)
            Dd = W * (1.0 / tau - da * th * c_m)          # film diagonal block
            g = W * da * th * c_m                         # d(R_c)/d(d) on walls
            h = W * a * th                                # -d(R_d)/d(c) and robin diagonal
            Dw = h + g * h / Dd                           # Schur complement diagonal
            rhs = -Rc
            rhs[wn] += g * Rd / Dd
            rhs[~self.free] = -Rc[~self.free]
            y = self._lu.solve(rhs)
            # Woodbury: (A + P^T D P)^-1 = A^-1 - Z D (I + P Z D)^-1 P A^-1
            if len(wn):
                cap = np.eye(len(wn)) + self.PZ * Dw[None, :]
                y = y - self.Z @ (Dw * np.linalg.solve(cap, y[wn]))
            dc = y
            dd = (-Rd + h * dc[wn]) / Dd
            c = c + dc
            d = d + dd
        if not report.converged:
            raise NonConvergenceError(
                f"step {step} (t = {t_new:.6g}): Newton residual {report.residuals[-1]:.3e} after "
                f"{report.iterations} iterations", report)
        if np.any(d < 0):
            k = int(np.argmin(d))
            raise StepRejectedError(
                f"step {step} (t = {t_new:.6g}): negative film thickness {d[k]:.3e} at wall vertex "
                f"{int(wn[k])}", report)
        return OxidationState(c, d, t_new), report


def assemble_transport_step(state_n: OxidationState, flow: FlowField, tau: float, k: KineticsParams,
                            theta: float = 0.5, ops: TransportOperators | None = None):
    """Return ``R(c, d) -> (R_c, R_d)`` for the step starting at ``state_n``."""
    step = TransportStep(ops or TransportOperators(flow, k), tau, theta)
    return lambda c, d: step.residual(state_n, c, d)


def coupled_newton_step(state_n: OxidationState, flow: FlowField, tau: float, k: KineticsParams,
                        step: TransportStep | None = None, index: int = 0):
    """Advance one step; returns ``(state, StepReport)``."""
    if step is None:
        step = TransportStep(TransportOperators(flow, k), tau)
    return step.newton(state_n, index)


# ----------------------------------------------------------------------------
# time loop

@dataclass
class TransientResult:
    times: list[float]
    observations: dict[str, list]
    snapshots: dict[float, OxidationState]
    reports: list[StepReport]
    final: OxidationState

    def iteration_counts(self) -> np.ndarray:
        return np.array([r.iterations for r in self.reports], dtype=int)


def step_count(T: float, tau: float) -> int:
    if not tau > 0 or T < 0:
        raise ValueError("need tau > 0 and T >= 0")
    n = round(T / tau)
    if abs(n * tau - T) > 1e-12 * max(1.0, T):
        raise ValueError(f"T = {T} is not an integer multiple of tau = {tau}")
    return int(n)


def run_transient(flow: FlowField, k: KineticsParams, tau: float, T: float,
                  observers: Mapping[str, Callable] | None = None, snapshot_times=(),
                  startup: int = 0, ops: TransportOperators | None = None,
                  on_step: Callable | None = None) -> TransientResult:
    """March from homogeneous initial data to ``T``.

    ``observers`` map names to ``f(ops, state)`` and are evaluated at t = 0
    and after every step. States at ``snapshot_times`` are stored. With
    ``startup > 0`` the first ``startup`` steps are each replaced by two
    backward-Euler half steps, which damps the Crank-Nicolson response to
    the incompatible inlet data.
    """
    ops = ops or TransportOperators(flow, k)
    n_steps = step_count(T, tau)
    observers = dict(observers or {})
    snap_index = {step_count(t, tau): float(t) for t in snapshot_times}
    state = ops.initial_state()
    times = [0.0]
    obs = {name: [f(ops, state)] for name, f in observers.items()}
    snapshots = {}
    if 0 in snap_index:
        snapshots[snap_index[0]] = state.copy()
    reports: list[StepReport] = []
    cn = None
    be = None
    for i in range(1, n_steps + 1):
        try:
            if i <= startup:
                be = be or TransportStep(ops, tau / 2, theta=1.0)
                state, r1 = be.newton(state, i)
                state, r2 = be.newton(state, i)
                rep = StepReport(i, state.t, tau, r1.residuals + r2.residuals[1:], True, 1.0)
            else:
                cn = cn or TransportStep(ops, tau, theta=0.5)
                state, rep = cn.newton(state, i)
        except (NonConvergenceError, StepRejectedError) as exc:
            exc.args = (f"{exc.args[0]} [step {i} of {n_steps}]",)
            raise
        state.t = i * tau
        reports.append(rep)
        times.append(state.t)
        for name, f in observers.items():
            obs[name].append(f(ops, state))
        if i in snap_index:
            snapshots[snap_index[i]] = state.copy()
        if on_step is not None:
            on_step(i, state, rep)
    return TransientResult(times, obs, snapshots, reports, state)


# ----------------------------------------------------------------------------
# frozen-concentration film harness

def film_history(k: KineticsParams, tau: float, T: float, c=1.0, theta: float = 0.5):
    """Film thickness of the scalar film law with prescribed concentration.

    ``c`` is a constant or a function of time. Each step solves the same
    film residual as the coupled solver by Newton's method; returns
    ``(t, d)`` arrays.
    """
    n = step_count(T, tau)
    t = np.arange(n + 1) * tau
    cv = np.array([c(ti) for ti in t], dtype=float) if callable(c) else np.full(n + 1, float(c))
    d = np.zeros(n + 1)
    for i in range(n):
        x = d[i]
        c_m = theta * cv[i + 1] + (1 - theta) * cv[i]
        for _ in range(50):
            d_m = theta * x + (1 - theta) * d[i]
            a, da = robin_coefficient(d_m, k)
            r = (x - d[i]) / tau - a * c_m
            x -= r / (1.0 / tau - da * theta * c_m)
            if abs(r) <= 1e-15 * max(1.0, abs(x) / tau):
                break
        d[i + 1] = x
    return t, d


def film_exact(t, k: KineticsParams):
    """Root of ``d/sh1 + sh2_inv d^2 / 2 = t``.

    This is the film for c = 1; for a prescribed c(t) pass the time
    integral of c in place of ``t``.
    """
    t = np.asarray(t, dtype=float)
    if k.sh2_inv == 0:
        return k.sh1 * t
    b = 1.0 / k.sh1
    return 2 * t / (b + np.sqrt(b * b + 2 * k.sh2_inv * t))
