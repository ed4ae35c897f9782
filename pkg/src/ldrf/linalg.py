"""Dense matrix kernels: SVD, truncated factorization, least squares.

Weights elsewhere in the package are stored as float32; everything here
promotes to float64 first so the factorization tolerances (1e-5 relative
reconstruction, 1e-6 orthonormality) hold with room to spare.  Outputs
are float64 and deterministic for a fixed input.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import InvalidArgumentError


class SvdResult(NamedTuple):
    u: np.ndarray   # (m, r), orthonormal columns
    s: np.ndarray   # (r,), non-negative, non-increasing; r = min(m, n)
    vt: np.ndarray  # (r, n), orthonormal rows


def _as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidArgumentError(f"{name} must be 2-D, got shape {a.shape}")
    if min(a.shape) < 1:
        raise InvalidArgumentError(f"{name} has a zero dimension: {a.shape}")
    if not np.isfinite(a).all():
        raise InvalidArgumentError(f"{name} contains NaN or Inf entries")
    return a


def svd(a) -> SvdResult:
    """Thin SVD with a deterministic sign convention.

    Signs are fixed so that the first nonzero entry of every column of U
    is positive (the matching row of Vt is flipped along with it), which
    makes repeated runs on the same input bit-identical and testable.
    """
    a = _as_matrix(a)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    for j in range(u.shape[1]):
        col = u[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-12)
        if nz.size and col[nz[0]] < 0:
            u[:, j] = -col
            vt[j, :] = -vt[j, :]
    return SvdResult(u, s, vt)


def truncated_factorize(res: SvdResult, z: int) -> tuple[np.ndarray, np.ndarray]:
    """Split a decomposition into Q = U[:, :z] and R = diag(S[:z]) Vt[:z].

    Q keeps orthonormal columns; the singular values are absorbed into R,
    so Q acts as an orthonormal projection onto the leading subspace.
    The Frobenius error of Q @ R against the original matrix equals the
    tail energy sqrt(sum of S[z:]**2).
    """
    r_max = len(res.s)
    if not 1 <= z <= r_max:
        raise InvalidArgumentError(f"rank z={z} outside [1, {r_max}]")
    q = res.u[:, :z].copy()
    r = res.s[:z, None] * res.vt[:z, :]
    return q, r


def lstsq(a, b) -> np.ndarray:
    """Minimum-norm least-squares solution of A X = B.

    X minimizes ||A X - B||_F; when A is rank-deficient the solution with
    the smallest norm is returned.
    """
    a = _as_matrix(a, "A")
    b = np.asarray(b, dtype=np.float64)
    squeeze = b.ndim == 1
    if squeeze:
        b = b[:, None]
    b = _as_matrix(b, "B")
    if a.shape[0] != b.shape[0]:
        raise InvalidArgumentError(
            f"row count mismatch: A has {a.shape[0]} rows, B has {b.shape[0]}"
        )
    x, _, _, _ = np.linalg.lstsq(a, b, rcond=None)
    return x[:, 0] if squeeze else x
