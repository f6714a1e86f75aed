"""Compressed sparse row matrices and preconditioned conjugate gradients.

The SparseMatrix class keeps the CSR invariants explicit (sorted column
indices within each row, no duplicate entries) and exposes exactly the
operations the rest of the package relies on: matvec, matmat, transpose,
diagonal. Storage is delegated to scipy.sparse.

cg_solve accepts a SparseMatrix, a dense array, a scipy sparse matrix, or a
bare callable for the operator, and solves SPD systems with (by default)
Jacobi preconditioning. Solves with a zero right-hand side return the zero
vector immediately.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse as _sp


class SparseMatrix:
    """CSR matrix wrapper with sorted, duplicate-free storage."""

    def __init__(self, mat):
        mat = _sp.csr_matrix(mat)
        mat.sum_duplicates()
        mat.sort_indices()
        self._mat = mat

    @classmethod
    def from_coo(cls, rows, cols, values, shape):
        mat = _sp.coo_matrix((values, (rows, cols)), shape=shape)
        return cls(mat.tocsr())

    @property
    def shape(self):
        return self._mat.shape

    @property
    def nnz(self):
        return self._mat.nnz

    @property
    def indptr(self):
        return self._mat.indptr

    @property
    def indices(self):
        return self._mat.indices

    @property
    def data(self):
        return self._mat.data

    @property
    def T(self):
        return SparseMatrix(self._mat.T.tocsr())

    def matvec(self, x):
        return self._mat @ np.asarray(x)

    def __matmul__(self, other):
        if isinstance(other, SparseMatrix):
            return SparseMatrix(self._mat @ other._mat)
        other = np.asarray(other)
        return self._mat @ other

    def __rmatmul__(self, other):
        return np.asarray(other) @ self._mat

    def __mul__(self, scalar):
        return SparseMatrix(self._mat * float(scalar))

    __rmul__ = __mul__

    def __add__(self, other):
        if isinstance(other, SparseMatrix):
            return SparseMatrix(self._mat + other._mat)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, SparseMatrix):
            return SparseMatrix(self._mat - other._mat)
        return NotImplemented

    def diagonal(self):
        return self._mat.diagonal()

    def toarray(self):
        return self._mat.toarray()

    def scipy(self):
        """Underlying scipy CSR matrix (shared storage)."""
        return self._mat

    def max_abs(self):
        """Largest magnitude among stored entries (0.0 if empty)."""
        if self._mat.nnz == 0:
            return 0.0
        return float(np.max(np.abs(self._mat.data)))

    def __repr__(self):
        return f"SparseMatrix(shape={self.shape}, nnz={self.nnz})"


@dataclass
class CgReport:
    """Outcome of a conjugate gradient solve."""

    converged: bool
    iterations: int
    relative_residual: float
    preconditioner: str = "jacobi"


class CgError(RuntimeError):
    """Raised when cg_solve exhausts max_iter; carries the report."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


def _as_operator(a):
    """Normalize the operator argument to (matvec, diagonal-or-None, n)."""
    if callable(a) and not isinstance(a, (SparseMatrix, np.ndarray)):
        return a, None, None
    if isinstance(a, SparseMatrix):
        return a.matvec, a.diagonal(), a.shape[0]
    if _sp.issparse(a):
        return (lambda x: a @ x), a.diagonal(), a.shape[0]
    arr = np.asarray(a)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ValueError(f"expected a square operator, got shape {arr.shape}")
    return (lambda x: arr @ x), np.diagonal(arr).copy(), arr.shape[0]


def cg_solve(a, b, rel_tol=1e-12, max_iter=None, preconditioner="jacobi", x0=None):
    """Solve the SPD system a @ x = b by preconditioned conjugate gradients.

    Args:
        a: SparseMatrix, dense square array, scipy sparse matrix, or a
            callable implementing the matvec.
        b: right-hand side vector.
        rel_tol: convergence threshold on ||r|| / ||b||.
        max_iter: iteration cap; defaults to 10 * len(b).
        preconditioner: "jacobi" (default), None/"none", or a callable
            applying the preconditioner to a vector. Jacobi falls back to
            the identity when the operator exposes no diagonal.
        x0: optional initial guess.

    Returns:
        (x, CgReport). Raises CgError (with the report attached) when the
        iteration cap is reached without convergence.
    """
    b = np.asarray(b, dtype=float)
    matvec, diag, _ = _as_operator(a)
    n = b.shape[0]
    if max_iter is None:
        max_iter = 10 * n

    precond_name = preconditioner if isinstance(preconditioner, str) else "custom"
    if callable(preconditioner) and not isinstance(preconditioner, str):
        apply_m = preconditioner
    elif preconditioner == "jacobi" and diag is not None:
        if np.any(diag <= 0):
            raise ValueError("jacobi preconditioner needs a positive diagonal")
        inv_diag = 1.0 / diag
        apply_m = lambda r: inv_diag * r
    else:
        precond_name = "none"
        apply_m = lambda r: r

    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return np.zeros_like(b), CgReport(True, 0, 0.0, precond_name)

    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - matvec(x) if x0 is not None else b.copy()
    rel = float(np.linalg.norm(r)) / b_norm
    if rel <= rel_tol:
        return x, CgReport(True, 0, rel, precond_name)

    z = apply_m(r)
    p = z.copy()
    rz = float(r @ z)
    iterations = 0
    while iterations < max_iter:
        ap = matvec(p)
        pap = float(p @ ap)
        if pap <= 0:
            raise ValueError("operator is not positive definite on the Krylov space")
        alpha = rz / pap
        x = x + alpha * p
        r = r - alpha * ap
        iterations += 1
        rel = float(np.linalg.norm(r)) / b_norm
        if rel <= rel_tol:
            return x, CgReport(True, iterations, rel, precond_name)
        z = apply_m(r)
        rz_next = float(r @ z)
        p = z + (rz_next / rz) * p
        rz = rz_next

    report = CgReport(False, iterations, rel, precond_name)
    raise CgError(
        f"cg_solve did not reach rel_tol={rel_tol:g} in {max_iter} iterations "
        f"(relative residual {rel:.3e})",
        report,
    )
