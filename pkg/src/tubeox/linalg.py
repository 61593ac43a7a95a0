"""Sparse direct and Krylov solves with honest residual reporting."""

from __future__ import annotations

import glob
import logging
import os
import sys
from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SingularMatrixError, SolverError

log = logging.getLogger(__name__)

DEFAULT_ORDERING = "MMD_AT_PLUS_A"


@dataclass
class LinearSolveReport:
    method: str
    iterations: int
    residual: float
    converged: bool = True
    factor_nnz: int = 0
    note: str = ""


def relative_residual(A, x, b) -> float:
    r = np.linalg.norm(b - A @ x)
    nb = np.linalg.norm(b)
    return float(r / nb) if nb > 0 else float(r)


def _check_structure(A):
    A = sp.csr_matrix(A)
    if A.shape[0] != A.shape[1]:
        raise SolverError(f"matrix is not square: {A.shape}")
    A.eliminate_zeros()
    empty_rows = np.flatnonzero(np.diff(A.indptr) == 0)
    if len(empty_rows):
        raise SingularMatrixError(f"row {empty_rows[0]} is structurally zero", pivot=int(empty_rows[0]))
    colcount = np.bincount(A.indices, minlength=A.shape[1])
    empty_cols = np.flatnonzero(colcount == 0)
    if len(empty_cols):
        raise SingularMatrixError(f"column {empty_cols[0]} is structurally zero", pivot=int(empty_cols[0]))
    return A


def _locate_mkl():
    if os.environ.get("PYPARDISO_MKL_RT"):
        return
    for root in (sys.prefix, "/usr/local", "/usr"):
        hits = sorted(glob.glob(os.path.join(root, "lib", "libmkl_rt.so*")))
        if hits:
            os.environ["PYPARDISO_MKL_RT"] = hits[0]
            return


def _pardiso():
    _locate_mkl()
    try:
        import pypardiso
    except ImportError:
        return None
    return pypardiso


def default_backend() -> str:
    choice = os.environ.get("TUBEOX_LU_BACKEND")
    if choice:
        return choice
    return "pardiso" if _pardiso() is not None else "superlu"


class LUFactor:
    """Sparse LU factorization kept for repeated solves.

    Backends: ``pardiso`` (MKL PARDISO: nested-dissection ordering, weighted
    matching and pivot perturbation) and ``superlu`` (threshold partial
    pivoting with a minimum-degree column ordering). ``solve`` accepts one or
    several right-hand sides and applies a step of iterative refinement when
    the first residual is not small enough.
    """

    def __init__(self, A, backend: str | None = None, ordering: str = DEFAULT_ORDERING,
                 pivot_threshold: float = 0.1):
        A = _check_structure(A)
        self.backend = backend or default_backend()
        self._solver = None
        if self.backend == "pardiso":
            pypardiso = _pardiso()
            if pypardiso is None:
                raise SolverError("pypardiso is not available")
            self.A = sp.csr_matrix(A, dtype=float)
            self.A.sort_indices()
            self._solver = pypardiso.PyPardisoSolver()
            self._solver.set_iparm(8, 0)   # refinement is done here, against the true A
            try:
                self._solver.factorize(self.A)
            except Exception as exc:  # PyPardisoError
                raise SingularMatrixError(f"PARDISO factorization failed: {exc}") from None
            self.nnz = int(self._solver.get_iparm(18))
            self.perturbed = int(self._solver.get_iparm(14))
        elif self.backend == "superlu":
            self.A = A.tocsc()
            try:
                self.lu = spla.splu(self.A, permc_spec=ordering, diag_pivot_thresh=pivot_threshold,
                                    options=dict(SymmetricMode=False))
            except RuntimeError as exc:
                raise SingularMatrixError(f"LU factorization failed: {exc}") from None
            self.nnz = int(self.lu.L.nnz + self.lu.U.nnz)
            self.perturbed = 0
            d = np.abs(self.lu.U.diagonal())
            if d.min() <= 1e-14 * d.max():
                k = int(np.argmin(d))
                raise SingularMatrixError(f"numerically singular pivot {k}", pivot=k)
        else:
            raise ValueError(f"unknown LU backend {self.backend!r}")

    def _raw(self, b):
        if self.backend == "pardiso":
            return self._solver.solve(self.A, np.ascontiguousarray(b))
        return self.lu.solve(b)

    def solve(self, b, refine: bool = True):
        b = np.asarray(b, dtype=float)
        x = self._raw(b)
        if refine:
            r = b - self.A @ x
            if np.linalg.norm(r) > 1e-13 * max(np.linalg.norm(b), 1e-300):
                x = x + self._raw(r)
        return x

    def free(self):
        if self._solver is not None:
            self._solver.free_memory(everything=True)
            self._solver = None

    def __del__(self):
        try:
            self.free()
        except Exception:
            pass


def lu_solve(A, b, backend: str | None = None, ordering: str = DEFAULT_ORDERING, tol: float = 1e-10):
    """Direct solve. Raises :class:`SingularMatrixError` for singular systems
    and :class:`SolverError` if the recomputed relative residual exceeds ``tol``."""
    b = np.asarray(b, dtype=float)
    f = LUFactor(A, backend, ordering)
    x = f.solve(b)
    res = relative_residual(f.A, x, b)
    report = LinearSolveReport(f"lu/{f.backend}", 1, res, res <= tol, f.nnz)
    if not np.isfinite(res) or res > tol:
        if f.perturbed:
            raise SingularMatrixError(f"{f.perturbed} perturbed pivots; residual {res:.3e}")
        raise SolverError(f"LU residual {res:.3e} exceeds {tol:.1e}")
    return x, report


def ilu0(A):
    """Incomplete LU with the sparsity of ``A`` (no fill).

    Returns a ``LinearOperator`` applying ``(LU)^-1``. Plain Python loops:
    intended for moderate sizes.
    """
    A = sp.csr_matrix(A, copy=True)
    A.sort_indices()
    n = A.shape[0]
    indptr, indices, data = A.indptr, A.indices, A.data.astype(float)
    diag = np.empty(n, dtype=np.int64)
    for i in range(n):
        row = indices[indptr[i]:indptr[i + 1]]
        k = np.searchsorted(row, i)
        if k >= len(row) or row[k] != i:
            raise SingularMatrixError(f"ILU(0): missing diagonal in row {i}", pivot=i)
        diag[i] = indptr[i] + k
    for i in range(1, n):
        start, end = indptr[i], indptr[i + 1]
        pos = {int(indices[p]): p for p in range(start, end)}
        for p in range(start, end):
            k = indices[p]
            if k >= i:
                break
            piv = data[diag[k]]
            if piv == 0:
                raise SingularMatrixError(f"ILU(0): zero pivot {k}", pivot=int(k))
            data[p] /= piv
            lik = data[p]
            for q in range(diag[k] + 1, indptr[k + 1]):
                j = int(indices[q])
                if j in pos:
                    data[pos[j]] -= lik * data[q]
    LU = sp.csr_matrix((data, indices, indptr), shape=A.shape)
    L = sp.tril(LU, -1, format="csr") + sp.identity(n, format="csr")
    U = sp.triu(LU, 0, format="csr")
    if np.any(U.diagonal() == 0):
        raise SingularMatrixError("ILU(0): zero pivot", pivot=int(np.flatnonzero(U.diagonal() == 0)[0]))

    def apply(r):
        y = spla.spsolve_triangular(L, r, lower=True, unit_diagonal=True)
        return spla.spsolve_triangular(U, y, lower=False)

    return spla.LinearOperator(A.shape, matvec=apply, dtype=float)


def gmres_solve(A, b, M=None, tol: float = 1e-10, restart: int = 50, maxiter: int = 200,
                fallback_lu: bool = False):
    """Restarted GMRES. ``M`` may be ``"ilu0"``, a LinearOperator or None.

    Non-convergence is flagged in the report (never silent); with
    ``fallback_lu`` a direct solve is attempted instead.
    """
    A = _check_structure(A)
    b = np.asarray(b, dtype=float)
    if isinstance(M, str):
        if M != "ilu0":
            raise ValueError(f"unknown preconditioner {M!r}")
        M = ilu0(A)
    count = [0]

    def cb(_):
        count[0] += 1

    x, info = spla.gmres(A, b, M=M, rtol=tol, atol=0.0, restart=restart, maxiter=maxiter,
                         callback=cb, callback_type="pr_norm")
    res = relative_residual(A, x, b)
    converged = info == 0 and res <= tol * (1 + 1e-6)
    report = LinearSolveReport("gmres", count[0], res, converged)
    if not converged:
        report.note = f"gmres info={info}"
        log.warning("GMRES did not converge (info=%s, residual %.3e)", info, res)
        if fallback_lu:
            x, lu_report = lu_solve(A, b)
            lu_report.note = "fallback after GMRES failure"
            lu_report.iterations += count[0]
            return x, lu_report
    return x, report


def export_matrix_market(path, A, b=None):
    scipy.io.mmwrite(str(path), sp.csr_matrix(A))
    if b is not None:
        scipy.io.mmwrite(str(path) + ".rhs", np.asarray(b, dtype=float).reshape(-1, 1))
