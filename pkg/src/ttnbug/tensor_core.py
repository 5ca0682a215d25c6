"""
Dense tensor arithmetic shared by all integrators.

Tensors are plain complex ``numpy`` arrays. Matricizations use a
first-mode-fastest (Fortran) linearization of the co-modes, with the
remaining modes in ascending order.
"""

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DivergenceError(FloatingPointError):
    """Raised when an inner ODE solve produces non-finite values."""


def as_tensor(a) -> np.ndarray:
    """
    Convert `a` to a complex double precision array.
    """
    return np.asarray(a, dtype=complex)


def matricize(t, mode: int) -> np.ndarray:
    """
    Mode-`mode` matricization: rows indexed by `mode`, columns by the
    remaining modes in ascending order, first remaining mode fastest.
    """
    t = np.asarray(t)
    if not 0 <= mode < t.ndim:
        raise ValueError(f"mode {mode} out of range for tensor of order {t.ndim}")
    return np.moveaxis(t, mode, 0).reshape((t.shape[mode], -1), order="F")


def tensorize(m, mode: int, shape: Sequence[int]) -> np.ndarray:
    """
    Inverse of `matricize` for the given mode and target shape.
    """
    m = np.asarray(m)
    shape = tuple(int(s) for s in shape)
    if not 0 <= mode < len(shape):
        raise ValueError(f"mode {mode} out of range for shape {shape}")
    rest = shape[:mode] + shape[mode + 1:]
    if m.ndim != 2 or m.shape[0] != shape[mode] or m.shape[1] != int(np.prod(rest, dtype=int)):
        raise ValueError(f"matrix of shape {m.shape} incompatible with mode {mode} of {shape}")
    return np.moveaxis(m.reshape((shape[mode],) + rest, order="F"), 0, mode)


def mode_product(t, m, mode: int) -> np.ndarray:
    """
    Mode product ``t ×_mode m``: contracts the columns of `m` with axis `mode` of `t`.
    """
    t = np.asarray(t)
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[1] != t.shape[mode]:
        raise ValueError(f"cannot apply {m.shape} matrix to mode {mode} of tensor {t.shape}")
    return np.moveaxis(np.tensordot(m, t, axes=(1, mode)), 0, mode)


def multi_mode_product(t, matrices, modes=None) -> np.ndarray:
    """
    Apply several mode products; `None` entries are skipped.
    """
    if modes is None:
        modes = range(len(matrices))
    for m, i in zip(matrices, modes):
        if m is not None:
            t = mode_product(t, m, i)
    return t


def qr_orthonormal(m):
    """
    Reduced QR factorization with a non-negative real diagonal of R.

    Rank-deficient input is allowed; Householder QR still returns
    orthonormal columns in Q.
    """
    m = as_tensor(m)
    q, r = np.linalg.qr(m, mode="reduced")
    d = np.diagonal(r).copy()
    phase = np.ones_like(d)
    nz = np.abs(d) > 0
    phase[nz] = d[nz] / np.abs(d[nz])
    q = q * phase
    r = phase.conj()[:, None] * r
    return q, r


@dataclass(frozen=True)
class SVDTruncation:
    left: np.ndarray
    singular_values: np.ndarray
    right: np.ndarray
    kept_rank: int
    all_singular_values: np.ndarray
    clamped: bool = False

    @property
    def discarded_norm(self) -> float:
        return float(np.linalg.norm(self.all_singular_values[self.kept_rank:]))


def retained_rank(sigma, tolerance: float) -> int:
    """
    Smallest rank `r` such that the tail ``sqrt(sum_{k>r} sigma_k^2)`` is at most `tolerance`.
    """
    sigma = np.asarray(sigma, dtype=float)
    # tail[r] = norm of sigma[r:]
    tail = np.sqrt(np.cumsum((sigma**2)[::-1])[::-1])
    tail = np.append(tail, 0.0)
    return int(np.argmax(tail <= tolerance))


def svd_truncate(m, tolerance: float, max_rank: int = None, min_rank: int = 1,
                 relative: bool = False) -> SVDTruncation:
    """
    Truncated SVD keeping the smallest rank whose discarded tail norm is
    at most `tolerance` (absolute, or relative to the Frobenius norm if
    `relative`), clamped to ``[min_rank, max_rank]``.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be non-negative")
    m = as_tensor(m)
    u, sigma, vh = np.linalg.svd(m, full_matrices=False)
    tol = tolerance * np.linalg.norm(sigma) if relative else tolerance
    r = retained_rank(sigma, tol)
    clamped = False
    if max_rank is not None and r > max_rank:
        r, clamped = max_rank, True
    r = max(r, min_rank)
    r = min(r, len(sigma)) if len(sigma) else 0
    return SVDTruncation(u[:, :r], sigma[:r], vh[:r].conj().T, r, sigma, clamped)


def orthonormal_basis_union(u0, k1, rtol: float = 1e-12) -> np.ndarray:
    """
    Orthonormal basis of range(u0) + range(k1) whose first columns are `u0`.

    Directions of `k1` outside range(u0) whose singular values fall below
    ``rtol * ||k1||_2`` are dropped, so the result may have fewer than
    ``cols(u0) + cols(k1)`` columns.
    """
    u0 = as_tensor(u0)
    k1 = as_tensor(k1)
    if u0.shape[0] != k1.shape[0]:
        raise ValueError("row counts of u0 and k1 differ")
    r = u0.shape[1]
    if np.linalg.norm(u0.conj().T @ u0 - np.identity(r)) > 1e-8 * max(r, 1):
        raise ValueError("u0 must have orthonormal columns")
    if k1.shape[1] == 0 or r == u0.shape[0]:
        return u0.copy()
    scale = np.linalg.norm(k1, 2)
    if scale == 0:
        return u0.copy()
    w = k1 - u0 @ (u0.conj().T @ k1)
    # second Gram-Schmidt pass for numerical orthogonality
    w = w - u0 @ (u0.conj().T @ w)
    p, sigma, _ = np.linalg.svd(w, full_matrices=False)
    keep = int(np.count_nonzero(sigma > rtol * scale))
    keep = min(keep, u0.shape[0] - r)
    new = p[:, :keep]
    new = new - u0 @ (u0.conj().T @ new)
    new, _ = qr_orthonormal(new)
    return np.concatenate((u0, new), axis=1)


def rk4_solve(f: Callable, y0, t0: float, t1: float, substeps: int = 1):
    """
    Classical fourth-order Runge-Kutta for ``y' = f(t, y)`` with `substeps` uniform steps.
    """
    if substeps < 1:
        raise ValueError("substeps must be positive")
    h = (t1 - t0) / substeps
    y = as_tensor(y0)
    t = t0
    for _ in range(substeps):
        k1 = f(t, y)
        k2 = f(t + 0.5*h, y + 0.5*h*k1)
        k3 = f(t + 0.5*h, y + 0.5*h*k2)
        k4 = f(t + h, y + h*k3)
        y = y + (h / 6) * (k1 + 2*k2 + 2*k3 + k4)
        t = t0 + h * (_ + 1)
        if not np.all(np.isfinite(y)):
            raise DivergenceError("divergence: non-finite values in RK4 solve")
    return y


def crandn(size, rng: np.random.Generator) -> np.ndarray:
    """
    Standard complex normal samples.
    """
    return (rng.normal(size=size) + 1j*rng.normal(size=size)) / np.sqrt(2)


def random_orthonormal(n: int, r: int, rng: np.random.Generator) -> np.ndarray:
    """
    Random `n` x `r` matrix with orthonormal columns.
    """
    q, _ = qr_orthonormal(crandn((n, r), rng))
    return q
