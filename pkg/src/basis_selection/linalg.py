"""Dense matrix helpers and a canonicalized SVD.

Matrices are plain float64 numpy arrays. ``svd`` wraps LAPACK and adds the
conventions the rest of the package relies on: numerically-zero singular
values are dropped, and each left singular vector is sign-normalized so the
factorization is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    pass


class SvdError(RuntimeError):
    pass


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-D float64 array, raising otherwise."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


@dataclass(frozen=True)
class SvdResult:
    u: np.ndarray  # n x r, orthonormal columns
    s: np.ndarray  # r, descending, strictly positive
    v: np.ndarray  # m x r, orthonormal columns

    @property
    def rank(self) -> int:
        return int(self.s.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.s) @ self.v.T


def zero_threshold(shape: tuple[int, int], s_max: float) -> float:
    return max(shape) * np.finfo(np.float64).eps * s_max


def svd(w) -> SvdResult:
    w = as_matrix(w, "svd input")
    try:
        u, s, vt = np.linalg.svd(w, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdError(f"SVD did not converge for {w.shape[0]}x{w.shape[1]} matrix") from exc

    if s.size == 0 or s[0] == 0.0:
        keep = 0
    else:
        keep = int(np.count_nonzero(s > zero_threshold(w.shape, s[0])))
    u, s, v = u[:, :keep], s[:keep], vt[:keep].T

    # sign convention: largest-magnitude entry of each u_i is nonnegative
    if keep:
        pivot = u[np.argmax(np.abs(u), axis=0), np.arange(keep)]
        flip = np.where(pivot < 0, -1.0, 1.0)
        u = u * flip
        v = v * flip
    return SvdResult(np.ascontiguousarray(u), s.copy(), np.ascontiguousarray(v))


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def frobenius_inner(a, b) -> float:
    """tr(a^T b), computed elementwise."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sum(a * b))
