"""
Parallel BUG integrator for tensor ODEs in Tucker format, plus the
rank-adaptive BUG baseline with a sequential rank-2r core update.
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from .operators import SumOfProductsOperator
from .tensor_core import (as_tensor, matricize, mode_product, multi_mode_product,
                          orthonormal_basis_union, qr_orthonormal, rk4_solve,
                          svd_truncate, tensorize)

DENSE_GUARD = 2**24


@dataclass
class TuckerTensor:
    """``core ×_1 U_1 ... ×_d U_d`` with orthonormal bases."""
    core: np.ndarray
    bases: List[np.ndarray]

    def __post_init__(self):
        self.core = as_tensor(self.core)
        self.bases = [as_tensor(u) for u in self.bases]
        if self.core.ndim != len(self.bases):
            raise ValueError("core order and number of bases differ")
        for i, u in enumerate(self.bases):
            if u.shape[1] != self.core.shape[i]:
                raise ValueError(f"basis {i} has {u.shape[1]} columns, core has {self.core.shape[i]}")

    @property
    def ranks(self):
        return tuple(self.core.shape)

    @property
    def dims(self):
        return tuple(u.shape[0] for u in self.bases)

    def full(self) -> np.ndarray:
        if int(np.prod(self.dims, dtype=int)) > DENSE_GUARD:
            raise MemoryError("full tensor exceeds dense guard")
        return multi_mode_product(self.core, self.bases)


class TensorField:
    """
    Right-hand side ``F`` of a tensor ODE.

    Either a dense callable (fallback, guarded by size) or a
    sum-of-products operator, for which projected evaluations
    ``F(C ×_l A_l) ×_j B_j^*`` never form full tensors.
    """

    def __init__(self, func: Optional[Callable] = None, operator: Optional[SumOfProductsOperator] = None):
        if (func is None) == (operator is None):
            raise ValueError("provide exactly one of func or operator")
        self.func = func
        self.operator = operator

    @classmethod
    def from_operator(cls, op: SumOfProductsOperator):
        return cls(operator=op)

    def __call__(self, y):
        if self.operator is not None:
            return self.operator.apply(y)
        return as_tensor(self.func(y))

    def project(self, core, in_bases: Sequence, out_bases: Sequence) -> np.ndarray:
        """
        ``F(core ×_l in_l) ×_j out_j^*``; a `None` out-basis keeps the full mode.
        """
        core = as_tensor(core)
        d = core.ndim
        if self.operator is not None:
            op = self.operator
            out = None
            for c, term in zip(op.coeffs, op.terms):
                z = core
                for j in range(d):
                    a, b, m = in_bases[j], out_bases[j], term.get(j)
                    if m is None:
                        if b is None:
                            mat = a
                        else:
                            mat = b.conj().T @ a
                    else:
                        mat = m @ a
                        if b is not None:
                            mat = b.conj().T @ mat
                    z = mode_product(z, mat, j)
                out = c * z if out is None else out + c * z
            if out is None:
                shape = [a.shape[0] if b is None else b.shape[1] for a, b in zip(in_bases, out_bases)]
                return np.zeros(shape, dtype=complex)
            return out
        dims = tuple(a.shape[0] for a in in_bases)
        if int(np.prod(dims, dtype=int)) > DENSE_GUARD:
            raise MemoryError("dense field evaluation exceeds guard")
        full = self(multi_mode_product(core, in_bases))
        return multi_mode_product(full, [None if b is None else b.conj().T for b in out_bases])


@dataclass
class TuckerStepReport:
    old_ranks: tuple
    augmented_ranks: tuple
    new_ranks: tuple
    eta: float
    wall_times: Dict[str, float] = field(default_factory=dict)
    augmented_core: Optional[np.ndarray] = None
    c1: Optional[np.ndarray] = None
    coupling: Optional[list] = None


def _frame(core, i):
    """QR of ``Mat_i(C)^T``: returns ``Ten_i(Q^T)`` and ``S_i`` with ``Mat_i(C) = S_i Q^T``."""
    q, r = qr_orthonormal(matricize(core, i).T)
    shape = list(core.shape)
    shape[i] = q.shape[1]
    return tensorize(q.T, i, shape), r.T


def ki_step(y0: TuckerTensor, f: TensorField, i: int, t0: float, t1: float, substeps: int = 1,
            rtol_union: float = 1e-12):
    """
    K_i-step on mode `i` (0-based); returns ``K_i(t1)`` and the augmented basis.
    """
    g, s = _frame(y0.core, i)
    ins = list(y0.bases)
    outs = list(y0.bases)
    outs[i] = None
    gmat = matricize(g, i)

    def rhs(t, k):
        ins[i] = k
        # F_i(K V^*) V, with V^* = Mat_i(g ×_{j≠i} U_j) having orthonormal rows
        return matricize(f.project(g, ins, outs), i) @ gmat.conj().T

    k1 = rk4_solve(rhs, y0.bases[i] @ s, t0, t1, substeps)
    return k1, orthonormal_basis_union(y0.bases[i], k1, rtol_union)


def coupling_core(y0: TuckerTensor, f: TensorField, i: int, u_new, h: float) -> np.ndarray:
    """
    ``h F(Y0) ×_{j≠i} U_j^* ×_i Ũ_i^*`` (zero extent in mode `i` if nothing was added).
    """
    if u_new.shape[1] == 0:
        shape = list(y0.core.shape)
        shape[i] = 0
        return np.zeros(shape, dtype=complex)
    outs = list(y0.bases)
    outs[i] = u_new
    return h * f.project(y0.core, y0.bases, outs)


def c_step(y0: TuckerTensor, f: TensorField, t0: float, t1: float, substeps: int = 1) -> np.ndarray:
    """
    Galerkin core update at the old ranks.
    """
    bases = y0.bases
    return rk4_solve(lambda t, c: f.project(c, bases, bases), y0.core, t0, t1, substeps)


def assemble_augmented_core(c1, blocks: Sequence) -> np.ndarray:
    """
    Embed `c1` in the all-old block and each ``blocks[i]`` in the block
    that is new in mode `i` only; every other block is zero.
    """
    c1 = as_tensor(c1)
    d = c1.ndim
    if len(blocks) != d:
        raise ValueError("need one coupling block per mode")
    r = c1.shape
    extra = []
    for i, b in enumerate(blocks):
        b = as_tensor(b)
        expected = r[:i] + r[i + 1:]
        if b.ndim != d or b.shape[:i] + b.shape[i + 1:] != expected:
            raise ValueError(f"coupling block {i} of shape {b.shape} does not conform to {r}")
        extra.append(b.shape[i])
    out = np.zeros(tuple(ri + ei for ri, ei in zip(r, extra)), dtype=complex)
    out[tuple(slice(0, ri) for ri in r)] = c1
    for i, b in enumerate(blocks):
        idx = [slice(0, rj) for rj in r]
        idx[i] = slice(r[i], r[i] + extra[i])
        out[tuple(idx)] = b
    return out


def truncate_tucker(c_hat, u_hats: Sequence, tolerance: float, max_rank: Optional[int] = None,
                    min_rank: int = 1, relative: bool = False):
    """
    Per-mode SVD truncation of the augmented core; returns the truncated
    Tucker tensor and the list of ``P_i`` factors.
    """
    c_hat = as_tensor(c_hat)
    ps = []
    for i in range(c_hat.ndim):
        tr = svd_truncate(matricize(c_hat, i), tolerance, max_rank=max_rank, min_rank=min_rank, relative=relative)
        ps.append(tr.left)
    core = multi_mode_product(c_hat, [p.conj().T for p in ps])
    return TuckerTensor(core, [u @ p for u, p in zip(u_hats, ps)]), ps


def _submit(executor, jobs):
    def timed(fn, *args):
        t = time.perf_counter()
        return fn(*args), time.perf_counter() - t
    if executor is None:
        return [timed(fn, *args) for fn, *args in jobs]
    futures = [executor.submit(timed, fn, *args) for fn, *args in jobs]
    return [fu.result() for fu in futures]


def _eta(y0, f, u_news):
    """Norm of the block of F(Y0) that is new in at least two modes."""
    d = len(u_news)
    total = 0.0
    for mask in range(1 << d):
        new_modes = [i for i in range(d) if mask >> i & 1]
        if len(new_modes) < 2 or any(u_news[i].shape[1] == 0 for i in new_modes):
            continue
        outs = [u_news[i] if i in new_modes else y0.bases[i] for i in range(d)]
        total += np.linalg.norm(f.project(y0.core, y0.bases, outs))**2
    return float(np.sqrt(total))


def parallel_tucker_step(y0: TuckerTensor, f: TensorField, t0: float, t1: float, tolerance: float,
                         substeps: int = 1, max_rank: Optional[int] = None, min_rank: int = 1,
                         relative: bool = False, executor: Optional[ThreadPoolExecutor] = None,
                         rtol_union: float = 1e-12):
    """
    One step of the parallel Tucker integrator: all K_i-steps and the
    C-step run on the old factors, followed by augmentation and truncation.
    """
    h = t1 - t0
    d = y0.core.ndim
    jobs = [(ki_step, y0, f, i, t0, t1, substeps, rtol_union) for i in range(d)]
    jobs.append((c_step, y0, f, t0, t1, substeps))
    results = _submit(executor, jobs)
    times = {f"K{i}": results[i][1] for i in range(d)}
    times["C"] = results[d][1]
    c1 = results[d][0]
    u_hats = [results[i][0][1] for i in range(d)]
    t = time.perf_counter()
    u_news = [u_hats[i][:, y0.core.shape[i]:] for i in range(d)]
    blocks = [coupling_core(y0, f, i, u_news[i], h) for i in range(d)]
    c_hat = assemble_augmented_core(c1, blocks)
    y1, _ = truncate_tucker(c_hat, u_hats, tolerance, max_rank, min_rank, relative)
    times["augment_truncate"] = time.perf_counter() - t
    rep = TuckerStepReport(y0.ranks, c_hat.shape, y1.ranks, _eta(y0, f, u_news), times, c_hat, c1, blocks)
    return y1, rep


def rank_adaptive_tucker_step(y0: TuckerTensor, f: TensorField, t0: float, t1: float, tolerance: float,
                              substeps: int = 1, max_rank: Optional[int] = None, min_rank: int = 1,
                              relative: bool = False, executor: Optional[ThreadPoolExecutor] = None,
                              rtol_union: float = 1e-12):
    """
    One rank-adaptive BUG step: K_i-steps, then a Galerkin core update in
    the augmented bases starting from the zero-padded old core.
    """
    d = y0.core.ndim
    results = _submit(executor, [(ki_step, y0, f, i, t0, t1, substeps, rtol_union) for i in range(d)])
    times = {f"K{i}": results[i][1] for i in range(d)}
    u_hats = [res[0][1] for res in results]
    t = time.perf_counter()
    c_init = np.zeros(tuple(u.shape[1] for u in u_hats), dtype=complex)
    c_init[tuple(slice(0, r) for r in y0.ranks)] = y0.core
    c_hat = rk4_solve(lambda tt, c: f.project(c, u_hats, u_hats), c_init, t0, t1, substeps)
    times["C"] = time.perf_counter() - t
    t = time.perf_counter()
    y1, _ = truncate_tucker(c_hat, u_hats, tolerance, max_rank, min_rank, relative)
    times["truncate"] = time.perf_counter() - t
    u_news = [u_hats[i][:, y0.core.shape[i]:] for i in range(d)]
    rep = TuckerStepReport(y0.ranks, c_hat.shape, y1.ranks, _eta(y0, f, u_news), times, c_hat)
    return y1, rep


def integrate(y0: TuckerTensor, f: TensorField, t0: float, t_end: float, h: float, tolerance: float,
              mode: str = "parallel", substeps: int = 1, **kwargs):
    """
    Uniform-step time integration; returns the final state and step reports.
    """
    step = {"parallel": parallel_tucker_step, "rank_adaptive": rank_adaptive_tucker_step}[mode]
    nsteps = int(round((t_end - t0) / h))
    y = y0
    reports = []
    for n in range(nsteps):
        y, rep = step(y, f, t0 + n * h, t0 + (n + 1) * h, tolerance, substeps, **kwargs)
        reports.append(rep)
    return y, reports
