"""
Parallel basis-update & Galerkin integrator for matrix differential
equations ``A' = F(A)``, together with the sequential rank-adaptive BUG
step used as a baseline.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .operators import SumOfProductsOperator
from .tensor_core import as_tensor, orthonormal_basis_union, rk4_solve, svd_truncate


@dataclass
class LowRankMatrix:
    """Factorized matrix ``U @ S @ V^*`` with orthonormal `U`, `V`."""
    U: np.ndarray
    S: np.ndarray
    V: np.ndarray

    def __post_init__(self):
        self.U = as_tensor(self.U)
        self.S = as_tensor(self.S)
        self.V = as_tensor(self.V)
        if self.S.shape != (self.U.shape[1], self.V.shape[1]):
            raise ValueError("inconsistent factor dimensions")

    @property
    def rank(self) -> int:
        return self.S.shape[0]

    @property
    def shape(self):
        return (self.U.shape[0], self.V.shape[0])

    def full(self) -> np.ndarray:
        return self.U @ self.S @ self.V.conj().T

    @classmethod
    def from_dense(cls, a, rank: int):
        u, s, vh = np.linalg.svd(as_tensor(a), full_matrices=False)
        return cls(u[:, :rank], np.diag(s[:rank]), vh[:rank].conj().T)


class MatrixField:
    """
    Right-hand side ``F`` of a matrix ODE.

    The default products evaluate `F` on dense ``m x n`` matrices;
    subclasses may override them with structured versions.
    """

    def __init__(self, func: Callable):
        self.func = func

    def __call__(self, a):
        return self.func(a)

    def k_rhs(self, k, v):
        """``F(K V^*) V``"""
        return self(k @ v.conj().T) @ v

    def l_rhs(self, l, u):
        """``F(U L^*)^* U``"""
        return self(u @ l.conj().T).conj().T @ u

    def galerkin(self, s, u, v):
        """``U^* F(U S V^*) V``"""
        return u.conj().T @ self(u @ s @ v.conj().T) @ v

    def sandwich(self, y: LowRankMatrix, left, right):
        """``left^* F(Y) right``"""
        return left.conj().T @ self(y.full()) @ right

    @classmethod
    def from_operator(cls, op: SumOfProductsOperator):
        return OperatorMatrixField(op)


class OperatorMatrixField(MatrixField):
    """
    Linear field ``F(A) = sum_k c_k M_k A N_k^T`` from a two-mode
    sum-of-products operator; products avoid forming ``m x n`` matrices.
    """

    def __init__(self, op: SumOfProductsOperator):
        if len(op.dims) != 2:
            raise ValueError("matrix field requires a two-mode operator")
        self.op = op
        m, n = op.dims
        self._pairs = [(c, t.get(0, np.identity(m, dtype=complex)), t.get(1, np.identity(n, dtype=complex)))
                       for c, t in zip(op.coeffs, op.terms)]
        super().__init__(op.apply)

    def k_rhs(self, k, v):
        return sum(c * (a @ k) @ (v.conj().T @ b.T @ v) for c, a, b in self._pairs)

    def l_rhs(self, l, u):
        # F(U L^*)^* U = sum conj(c) B^conj L U^* A^* U
        return sum(np.conj(c) * (b.conj() @ l) @ (u.conj().T @ a.conj().T @ u) for c, a, b in self._pairs)

    def galerkin(self, s, u, v):
        return sum(c * (u.conj().T @ a @ u) @ s @ (v.conj().T @ b.T @ v) for c, a, b in self._pairs)

    def sandwich(self, y, left, right):
        return sum(c * (left.conj().T @ a @ y.U) @ y.S @ (y.V.conj().T @ b.T @ right)
                   for c, a, b in self._pairs)


@dataclass
class StepReport:
    new_state: LowRankMatrix
    eta: float
    old_rank: int
    augmented_rank: int
    truncated_rank: int
    wall_times: Dict[str, float] = field(default_factory=dict)
    degenerate: bool = False
    rejected: bool = False
    retries: int = 0


def _timed(fn, *args):
    t = time.perf_counter()
    out = fn(*args)
    return out, time.perf_counter() - t


def k_step(y0: LowRankMatrix, f: MatrixField, t0: float, t1: float, substeps: int = 1):
    """
    Solve ``K' = F(K V0^*) V0`` with ``K(t0) = U0 S0``; returns ``K(t1)``.
    """
    v0 = y0.V
    return rk4_solve(lambda t, k: f.k_rhs(k, v0), y0.U @ y0.S, t0, t1, substeps)


def l_step(y0: LowRankMatrix, f: MatrixField, t0: float, t1: float, substeps: int = 1):
    """
    Solve ``L' = F(U0 L^*)^* U0`` with ``L(t0) = V0 S0^*``; returns ``L(t1)``.
    """
    u0 = y0.U
    return rk4_solve(lambda t, l: f.l_rhs(l, u0), y0.V @ y0.S.conj().T, t0, t1, substeps)


def s_step(y0: LowRankMatrix, f: MatrixField, t0: float, t1: float, substeps: int = 1):
    """
    Galerkin step in the old bases at rank r: ``S' = U0^* F(U0 S V0^*) V0``.
    """
    u0, v0 = y0.U, y0.V
    return rk4_solve(lambda t, s: f.galerkin(s, u0, v0), y0.S, t0, t1, substeps)


def coupling_blocks(y0: LowRankMatrix, f: MatrixField, u_hat, v_hat, h: float):
    """
    Off-diagonal blocks ``h Ũ^* F(Y0) V0`` and ``h U0^* F(Y0) Ṽ`` of the augmented coefficient matrix.
    """
    r_u = y0.U.shape[1]
    r_v = y0.V.shape[1]
    u_new = u_hat[:, r_u:]
    v_new = v_hat[:, r_v:]
    s_k = h * f.sandwich(y0, u_new, y0.V) if u_new.shape[1] else np.zeros((0, r_v), dtype=complex)
    s_l = h * f.sandwich(y0, y0.U, v_new) if v_new.shape[1] else np.zeros((r_u, 0), dtype=complex)
    return s_k, s_l


def assemble_augmented_S(s1, s_k, s_l) -> np.ndarray:
    """
    Block matrix ``[[S1, S_L], [S_K, 0]]``.
    """
    s1 = as_tensor(s1)
    s_k = as_tensor(s_k)
    s_l = as_tensor(s_l)
    if s_k.shape[1] != s1.shape[1] or s_l.shape[0] != s1.shape[0]:
        raise ValueError("block dimensions do not conform")
    zero = np.zeros((s_k.shape[0], s_l.shape[1]), dtype=complex)
    return np.block([[s1, s_l], [s_k, zero]])


def _truncate(u_hat, s_hat, v_hat, tolerance, max_rank, min_rank, relative):
    tr = svd_truncate(s_hat, tolerance, max_rank=max_rank, min_rank=min_rank, relative=relative)
    y1 = LowRankMatrix(u_hat @ tr.left, np.diag(tr.singular_values).astype(complex), v_hat @ tr.right)
    degenerate = bool(tr.all_singular_values.size == 0 or
                      (tr.all_singular_values[0] <= tolerance and tr.kept_rank == min_rank))
    return y1, degenerate


def _run(executor, jobs):
    if executor is None:
        return [_timed(fn, *args) for fn, *args in jobs]
    futures = [executor.submit(_timed, fn, *args) for fn, *args in jobs]
    return [fu.result() for fu in futures]


def parallel_step(y0: LowRankMatrix, f: MatrixField, t0: float, t1: float, tolerance: float,
                  substeps: int = 1, max_rank: Optional[int] = None, min_rank: int = 1,
                  relative: bool = False, executor: Optional[ThreadPoolExecutor] = None,
                  rtol_union: float = 1e-12) -> StepReport:
    """
    One step of the modified parallel BUG integrator.

    K-, L- and S-steps only read `y0`, so they are submitted to `executor`
    concurrently when one is given.
    """
    h = t1 - t0
    (k1, tk), (l1, tl), (s1, ts) = _run(executor, [
        (k_step, y0, f, t0, t1, substeps),
        (l_step, y0, f, t0, t1, substeps),
        (s_step, y0, f, t0, t1, substeps),
    ])
    t = time.perf_counter()
    u_hat = orthonormal_basis_union(y0.U, k1, rtol_union)
    v_hat = orthonormal_basis_union(y0.V, l1, rtol_union)
    s_k, s_l = coupling_blocks(y0, f, u_hat, v_hat, h)
    r = y0.rank
    u_new = u_hat[:, y0.U.shape[1]:]
    v_new = v_hat[:, y0.V.shape[1]:]
    eta = float(np.linalg.norm(f.sandwich(y0, u_new, v_new))) if u_new.shape[1] and v_new.shape[1] else 0.0
    s_hat = assemble_augmented_S(s1, s_k, s_l)
    y1, degenerate = _truncate(u_hat, s_hat, v_hat, tolerance, max_rank, min_rank, relative)
    ta = time.perf_counter() - t
    return StepReport(y1, eta, r, max(s_hat.shape), y1.rank,
                      {"K": tk, "L": tl, "S": ts, "augment_truncate": ta}, degenerate)


def rank_adaptive_step(y0: LowRankMatrix, f: MatrixField, t0: float, t1: float, tolerance: float,
                       substeps: int = 1, max_rank: Optional[int] = None, min_rank: int = 1,
                       relative: bool = False, executor: Optional[ThreadPoolExecutor] = None,
                       rtol_union: float = 1e-12) -> StepReport:
    """
    One step of the rank-adaptive BUG integrator: K- and L-steps as in
    `parallel_step`, then a Galerkin step in the augmented bases.
    """
    (k1, tk), (l1, tl) = _run(executor, [
        (k_step, y0, f, t0, t1, substeps),
        (l_step, y0, f, t0, t1, substeps),
    ])
    u_hat = orthonormal_basis_union(y0.U, k1, rtol_union)
    v_hat = orthonormal_basis_union(y0.V, l1, rtol_union)
    t = time.perf_counter()
    s_init = np.zeros((u_hat.shape[1], v_hat.shape[1]), dtype=complex)
    s_init[:y0.S.shape[0], :y0.S.shape[1]] = y0.S
    s_hat = rk4_solve(lambda tt, s: f.galerkin(s, u_hat, v_hat), s_init, t0, t1, substeps)
    ts = time.perf_counter() - t
    u_new = u_hat[:, y0.U.shape[1]:]
    v_new = v_hat[:, y0.V.shape[1]:]
    eta = float(np.linalg.norm(f.sandwich(y0, u_new, v_new))) if u_new.shape[1] and v_new.shape[1] else 0.0
    t = time.perf_counter()
    y1, degenerate = _truncate(u_hat, s_hat, v_hat, tolerance, max_rank, min_rank, relative)
    tt = time.perf_counter() - t
    return StepReport(y1, eta, y0.rank, max(s_hat.shape), y1.rank,
                      {"K": tk, "L": tl, "S": ts, "augment_truncate": tt}, degenerate)


def integrate(y0: LowRankMatrix, f: MatrixField, t0: float, t_end: float, h: float, tolerance: float,
              mode: str = "parallel", substeps: int = 1, max_rank: Optional[int] = None,
              reject: bool = False, c: float = 10.0, max_retries: int = 3, **kwargs):
    """
    Integrate from `t0` to `t_end` with uniform steps; returns the final
    state and the list of step reports.

    With `reject`, a step whose ``h * eta`` exceeds ``c * tolerance`` is
    repeated from the augmented bases with a zero-padded coefficient matrix.
    """
    step = {"parallel": parallel_step, "rank_adaptive": rank_adaptive_step}[mode]
    nsteps = int(round((t_end - t0) / h))
    y = y0
    reports = []
    for n in range(nsteps):
        ta, tb = t0 + n * h, t0 + (n + 1) * h
        start = y
        rep = step(start, f, ta, tb, tolerance, substeps, max_rank, **kwargs)
        retries = 0
        while reject and h * rep.eta > c * tolerance and retries < max_retries:
            start = _augmented_restart(start, f, ta, tb, substeps)
            rep = step(start, f, ta, tb, tolerance, substeps, max_rank, **kwargs)
            retries += 1
        rep.retries = retries
        rep.rejected = retries > 0
        y = rep.new_state
        reports.append(rep)
    return y, reports


def _augmented_restart(y0: LowRankMatrix, f: MatrixField, t0, t1, substeps):
    u_hat = orthonormal_basis_union(y0.U, k_step(y0, f, t0, t1, substeps))
    v_hat = orthonormal_basis_union(y0.V, l_step(y0, f, t0, t1, substeps))
    s = np.zeros((u_hat.shape[1], v_hat.shape[1]), dtype=complex)
    s[:y0.S.shape[0], :y0.S.shape[1]] = y0.S
    return LowRankMatrix(u_hat, s, v_hat)
