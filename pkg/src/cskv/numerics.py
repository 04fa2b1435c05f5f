"""Dense float64 matrix kernels: matmul, thin SVD, QR, least squares.

Everything downstream (factor initialization, calibration, the inference
engine) goes through these wrappers instead of calling numpy directly, so
the validation rules live in one place: matrices are 2-D, finite, float64.
Compute precision is always 64-bit; storage precision (cache latents, file
format) is handled by the modules that persist data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Matrix = np.ndarray


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A factorization failed to converge or produced non-finite values."""


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> Matrix:
    """Validate and return a 2-D float64 matrix.

    Rejects non-2-D input, NaN/Inf entries, and (when given) shape
    mismatches against `rows`/`cols`.
    """
    m = np.asarray(data, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1) if rows in (None, 1) else m.reshape(-1, 1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={m.ndim}")
    if rows is not None and m.shape[0] != rows:
        raise ShapeError(f"expected {rows} rows, got {m.shape[0]}")
    if cols is not None and m.shape[1] != cols:
        raise ShapeError(f"expected {cols} cols, got {m.shape[1]}")
    if not np.all(np.isfinite(m)):
        raise NumericError("matrix contains NaN or Inf")
    return m


def matmul(a: Matrix, b: Matrix) -> Matrix:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise NumericError("matmul produced non-finite values")
    return out


@dataclass
class SvdResult:
    """Thin SVD of an m-by-n matrix: U (m,k), S (k,), Vt (k,n), k = min(m,n).

    S is non-increasing and non-negative; U columns and Vt rows are
    orthonormal to ~1e-8.
    """

    U: Matrix
    S: np.ndarray
    Vt: Matrix

    def truncate(self, rank: int) -> "SvdResult":
        """Keep the top `rank` singular triplets."""
        r = int(rank)
        return SvdResult(self.U[:, :r], self.S[:r], self.Vt[:r, :])

    def reconstruct(self) -> Matrix:
        return (self.U * self.S) @ self.Vt


def thin_svd(m: Matrix) -> SvdResult:
    """Thin SVD with singular values sorted non-increasing."""
    if m.size == 0:
        raise ShapeError("thin_svd: empty matrix")
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"SVD did not converge: {exc}") from exc
    return SvdResult(u, s, vt)


def qr_factor(m: Matrix) -> tuple[Matrix, Matrix]:
    """Reduced QR of a tall (rows >= cols) matrix.

    Rank-deficient input is allowed; R may then carry near-zero diagonal
    entries. Diagonal signs are normalized so R has non-negative diagonal,
    which makes the factorization unique for full-rank input.
    """
    if m.shape[0] < m.shape[1]:
        raise ShapeError(f"qr_factor: need rows >= cols, got {m.shape}")
    q, r = np.linalg.qr(m, mode="reduced")
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs, signs[:, None] * r


def solve_least_squares(a: Matrix, b: Matrix) -> Matrix:
    """Minimum-norm X minimizing ||aX - b||_F."""
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"lstsq: row counts differ, {a.shape} vs {b.shape}")
    x, _, _, _ = np.linalg.lstsq(a, b, rcond=None)
    return x


def frobenius_norm(m: Matrix) -> float:
    return float(np.linalg.norm(m))
