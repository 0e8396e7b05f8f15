"""Small dense linear algebra: pivoted LU log-determinant and inverse.

The flow's channel-mixing matrices are tiny (C x C with C below ~200),
so an unblocked partial-pivot LU in numpy is plenty and keeps the pivot
that triggered a singularity visible in the error message.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PIVOT_TOL = 1e-12


class SingularMatrixError(ValueError):
    """Matrix is singular (or numerically so) under the pivot tolerance."""


@dataclass(frozen=True)
class SquareMatrix:
    entries: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.entries, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"square matrix required, got shape {arr.shape}")
        object.__setattr__(self, "entries", arr)

    @property
    def dim(self) -> int:
        return self.entries.shape[0]


def _lu_factor(a: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """In-place Doolittle LU with partial pivoting; returns (LU, perm, sign)."""
    lu = a.astype(np.float64, copy=True)
    n = lu.shape[0]
    perm = np.arange(n)
    sign = 1.0
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if abs(lu[p, k]) <= PIVOT_TOL:
            raise SingularMatrixError(
                f"matrix singular within tolerance: pivot {k} has magnitude "
                f"{abs(lu[p, k]):.3e} <= {PIVOT_TOL:g}")
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            perm[[k, p]] = perm[[p, k]]
            sign = -sign
        lu[k + 1:, k] /= lu[k, k]
        lu[k + 1:, k + 1:] -= np.outer(lu[k + 1:, k], lu[k, k + 1:])
    return lu, perm, sign


def logdet_and_inverse(m: SquareMatrix) -> tuple[float, SquareMatrix]:
    """Return (log|det M|, M^{-1}) via one pivoted decomposition."""
    lu, perm, _sign = _lu_factor(m.entries)
    n = m.dim
    logdet = float(np.sum(np.log(np.abs(np.diag(lu)))))

    # Solve M X = I via L U X = P (two triangular substitutions,
    # vectorized over all right-hand-side columns at once).
    rhs = np.zeros((n, n))
    rhs[np.arange(n), perm] = 1.0  # the permutation matrix P
    y = rhs.copy()
    for k in range(1, n):
        y[k] -= lu[k, :k] @ y[:k]
    x = y
    for k in range(n - 1, -1, -1):
        x[k] = (x[k] - lu[k, k + 1:] @ x[k + 1:]) / lu[k, k]
    return logdet, SquareMatrix(x)


def det_sign(m: SquareMatrix) -> float:
    """Sign of det M (+1 or -1); raises if singular."""
    lu, _perm, sign = _lu_factor(m.entries)
    return float(sign * np.prod(np.sign(np.diag(lu))))
