"""
Parallel BUG step for tree tensor networks, the rank-adaptive BUG
baseline, rank truncation and step rejection.

The field is a `SumOfProductsOperator` ``F`` (for Schrödinger dynamics
pass ``-1j * H``). All reduced quantities come from `Reduction`.
"""

import time
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Optional

import numpy as np

from .operators import SumOfProductsOperator
from .tensor_core import (matricize, mode_product, orthonormal_basis_union,
                          rk4_solve, svd_truncate, tensorize)
from .ttn import (Leaf, Path, Reduction, TreeTensorNetwork, embedding,
                  node_average, orthonormalize, postorder)
from .tucker import assemble_augmented_core


class RankGrowthError(RuntimeError):
    """Raised when rejected steps exhaust the retry budget."""


@dataclass
class StepConfig:
    tolerance: float
    h: Optional[float] = None
    c: float = 10.0
    max_rank: Optional[int] = None
    min_rank: int = 1
    substeps: int = 1
    mode: str = "parallel"
    reject: bool = False
    max_retries: int = 3
    relative: bool = False
    rtol_union: float = 1e-12
    allow_mary_rejection: bool = False

    def __post_init__(self):
        if self.tolerance < 0:
            raise ValueError("tolerance must be non-negative")
        if self.h is not None and self.h <= 0:
            raise ValueError("time step must be positive")
        if self.c <= 0:
            raise ValueError("rejection factor must be positive")
        if self.mode not in ("parallel", "rank_adaptive"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.substeps < 1:
            raise ValueError("substeps must be positive")


@dataclass
class TTNStepReport:
    old_ranks: Dict[Path, int]
    augmented_ranks: Dict[Path, int]
    new_ranks: Dict[Path, int]
    eta: Dict[Path, float]
    rejected: bool = False
    reasons: List[str] = field(default_factory=list)
    retries: int = 0
    wall_times: Dict[str, float] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)


@dataclass
class Augmented:
    """Output of the augmentation: the augmented network and its parts."""
    network: TreeTensorNetwork
    retry_network: TreeTensorNetwork
    eta: Dict[Path, float]
    couplings: Dict[Path, list]
    c_bar: Dict[Path, np.ndarray]


# --- subflows ---------------------------------------------------------------

def phi_leaf(red: Reduction, path: Path, t0: float, t1: float, substeps: int = 1,
             rtol_union: float = 1e-12) -> np.ndarray:
    """
    Leaf subflow: evolve the reduced leaf data ``Y_l`` (``r x n``) and
    return the prefix-preserving union basis ``(U_l^0, Y_l(t1)^T)``.
    """
    f = red.leaf_field(path)
    y1 = rk4_solve(lambda t, y: f(y), red.init[path], t0, t1, substeps)
    return orthonormal_basis_union(red.x.tensors[path], y1.T, rtol_union)


def psi_connect(red: Reduction, path: Path, t0: float, t1: float, substeps: int = 1) -> np.ndarray:
    """
    Connecting-tensor subflow: Galerkin ODE in the old child bases,
    started from the reduced initial connecting tensor.
    """
    f = red.galerkin_field(path)
    return rk4_solve(lambda t, c: f(c), red.init[path], t0, t1, substeps)


def _pad(c, shape):
    out = np.zeros(shape, dtype=complex)
    out[tuple(slice(0, s) for s in c.shape)] = c
    return out


def _run(executor, jobs):
    """Run ``(key, fn, args)`` jobs; results in job order with wall times."""
    def timed(fn, args):
        t = time.perf_counter()
        return fn(*args), time.perf_counter() - t
    if executor is None:
        out = [timed(fn, args) for _, fn, args in jobs]
    else:
        futures = [executor.submit(timed, fn, args) for _, fn, args in jobs]
        out = [fu.result() for fu in futures]
    return {key: res for (key, _, _), res in zip(jobs, out)}


def _eta(red, path, cred, new_avgs, new_counts):
    """Norm of the reduced field at `path` over all blocks with two or more new modes."""
    m = len(new_counts)
    total = 0.0
    for size in range(2, m + 1):
        for subset in combinations(range(m), size):
            if any(new_counts[j] == 0 for j in subset):
                continue
            block = None
            for term in red.env[path]:
                if term.k is None or any(term.k not in new_avgs[j] for j in subset):
                    continue
                z = mode_product(cred, term.e, 0)
                for j in range(m):
                    a = new_avgs[j][term.k] if j in subset else red.avg[path + (j,)].get(term.k)
                    if a is not None:
                        z = mode_product(z, a, j + 1)
                block = z if block is None else block + z
            if block is not None:
                total += np.linalg.norm(block)**2
    return float(np.sqrt(total))


def augment(y0: TreeTensorNetwork, red: Reduction, u_hats: Dict[Path, np.ndarray], h: float,
            c_bars: Optional[Dict[Path, np.ndarray]] = None, galerkin=None, executor=None,
            rtol_union: float = 1e-12) -> Augmented:
    """
    Bottom-up augmentation.

    With `c_bars` (parallel mode) each connecting tensor is assembled from
    ``C̄_tau^1`` and the coupling blocks; every block with two or more new
    modes is zero. With `galerkin` (rank-adaptive mode) the node is
    instead evolved in the augmented child bases, level by level.
    Non-root nodes then get the basis ``Q̂`` spanning the old and new
    connecting tensors, first columns equal to the old ones.
    """
    tree = y0.tree
    op = red.op
    nodes = postorder(tree)
    hat: Dict[Path, np.ndarray] = {}
    retry: Dict[Path, np.ndarray] = {}
    mixed: Dict[Path, Dict[int, np.ndarray]] = {}   # Û^* H_k U^0
    aug_avg: Dict[Path, Dict[int, np.ndarray]] = {}  # Û^* H_k Û (rank-adaptive only)
    etas, couplings, assembled = {}, {}, {}

    for path, sub in nodes:
        if isinstance(sub, Leaf):
            u0, uh = y0.tensors[path], u_hats[path]
            hat[path] = retry[path] = uh
            mixed[path] = {k: uh.conj().T @ (op.terms[k][sub.id] @ u0)
                           for k in range(op.nterms) if red.acts_in(k, path)}
            if galerkin is not None:
                aug_avg[path] = {k: uh.conj().T @ (op.terms[k][sub.id] @ uh)
                                 for k in range(op.nterms) if red.acts_in(k, path)}

    depth = lambda p: len(p)
    internal = [(p, s) for p, s in nodes if not isinstance(s, Leaf)]
    for level in sorted({depth(p) for p, _ in internal}, reverse=True):
        layer = [(p, s) for p, s in internal if depth(p) == level]
        if galerkin is not None:
            res = _run(executor, [(p, galerkin, (p, aug_avg, {q: hat[q] for q in hat}))
                                  for p, _ in layer])
        for path, sub in layer:
            m = len(sub.children)
            kids = [path + (i,) for i in range(m)]
            r0 = [y0.rank(q) for q in kids]
            rh = [hat[q].shape[1] if isinstance(sub.children[i], Leaf) else hat[q].shape[0]
                  for i, q in enumerate(kids)]
            cred = red.init[path]
            new_avgs = [{k: a[r0[i]:, :] for k, a in mixed[q].items()} for i, q in enumerate(kids)]
            new_counts = [rh[i] - r0[i] for i in range(m)]
            blocks = []
            for i in range(m):
                shape = list(cred.shape)
                shape[i + 1] = new_counts[i]
                blk = np.zeros(shape, dtype=complex)
                if new_counts[i] > 0:
                    for term in red.env[path]:
                        if term.k is None or term.k not in new_avgs[i]:
                            continue
                        z = mode_product(cred, term.e, 0)
                        for j in range(m):
                            a = new_avgs[j][term.k] if j == i else red.avg[kids[j]].get(term.k)
                            if a is not None:
                                z = mode_product(z, a, j + 1)
                        blk = blk + h * z
                blocks.append(blk)
            couplings[path] = blocks
            etas[path] = _eta(red, path, cred, new_avgs, new_counts)
            if galerkin is None:
                zero0 = np.zeros((0,) + c_bars[path].shape[1:], dtype=complex)
                c_hat = assemble_augmented_core(c_bars[path], [zero0] + blocks)
            else:
                c_hat = res[path][0]
            assembled[path] = c_hat
            c0 = y0.tensors[path]
            c0pad = _pad(c0, (c0.shape[0],) + tuple(rh))
            if path == ():
                hat[path] = c_hat
                retry[path] = c0pad
                continue
            q = orthonormal_basis_union(matricize(c0pad, 0).T, matricize(c_hat, 0).T, rtol_union)
            t_hat = tensorize(q.T, 0, (q.shape[1],) + tuple(rh))
            hat[path] = retry[path] = t_hat
            mixed[path] = {}
            for k in range(op.nterms):
                if not red.acts_in(k, path):
                    continue
                mats = [mixed[kids[j]].get(k, embedding(rh[j], r0[j])) for j in range(m)]
                mixed[path][k] = node_average(t_hat, c0, mats)
            if galerkin is not None:
                aug_avg[path] = {k: node_average(t_hat, t_hat, [aug_avg[q].get(k) for q in kids])
                                 for k in range(op.nterms) if red.acts_in(k, path)}

    return Augmented(TreeTensorNetwork(tree, hat), TreeTensorNetwork(tree, retry), etas,
                     couplings, assembled)


# --- truncation -------------------------------------------------------------

def truncate_ttn(x: TreeTensorNetwork, tolerance: float, min_rank: int = 1,
                 max_rank: Optional[int] = None, relative: bool = False,
                 assume_orthonormal: bool = False) -> TreeTensorNetwork:
    """
    Root-to-leaves truncation: at every internal node each child mode is
    cut by a tail-norm SVD of its matricization, the kept left singular
    vectors are pushed into the child, and the result is orthonormalized.
    With `relative`, the tolerance is scaled by the norm of the root tensor.
    """
    if not assume_orthonormal:
        x = orthonormalize(x)
    t = dict(x.tensors)
    tol = tolerance * np.linalg.norm(t[()]) if relative else tolerance

    def rec(path, sub):
        c = t[path]
        for i, child in enumerate(sub.children):
            tr = svd_truncate(matricize(c, i + 1), tol, max_rank=max_rank, min_rank=min_rank)
            p = tr.left
            c = mode_product(c, p.conj().T, i + 1)
            cp = path + (i,)
            if isinstance(child, Leaf):
                t[cp] = t[cp] @ p
            else:
                t[cp] = mode_product(t[cp], p.T, 0)
        t[path] = c
        for i, child in enumerate(sub.children):
            if not isinstance(child, Leaf):
                rec(path + (i,), child)

    if not isinstance(x.tree, Leaf):
        rec((), x.tree)
    return orthonormalize(TreeTensorNetwork(x.tree, t))


def truncation_bound(x: TreeTensorNetwork, tolerance: float) -> float:
    """``(||C_root|| (d - 1) + 1) * tolerance`` with `d` the number of nodes, leaves included."""
    d = len(postorder(x.tree))
    return (np.linalg.norm(x.tensors[()]) * (d - 1) + 1) * tolerance


# --- rejection --------------------------------------------------------------

def rejection_check(y0: TreeTensorNetwork, y1: TreeTensorNetwork, eta: Dict[Path, float], h: float,
                    tolerance: float, c: float = 10.0, max_rank: Optional[int] = None,
                    allow_mary: bool = False):
    """
    Returns ``(reasons, notes)``; the step is rejected when `reasons` is
    non-empty. Rank saturation (a non-root node reaching twice its old
    rank) is downgraded to a note when the node sits at `max_rank`.
    The threshold test ``h * eta > c * tolerance`` is strict.
    """
    if not allow_mary:
        for _, sub in postorder(y0.tree):
            if not isinstance(sub, Leaf) and len(sub.children) > 2:
                raise ValueError("step rejection on non-binary trees needs allow_mary=True")
    reasons, notes = [], []
    old, new = y0.ranks(), y1.ranks()
    for p, r in old.items():
        if p == () or new[p] != 2 * r:
            continue
        if max_rank is not None and new[p] >= max_rank:
            notes.append(f"rank saturation at {p} capped by max_rank")
        elif "rank-saturation" not in reasons:
            reasons.append("rank-saturation")
    if any(h * e > c * tolerance for e in eta.values()):
        reasons.append("eta-threshold")
    return reasons, notes


# --- steps ------------------------------------------------------------------

def _single_step(y0, op, t0, t1, cfg: StepConfig, executor):
    h = t1 - t0
    times = {}
    t = time.perf_counter()
    red = Reduction(y0, op)
    times["reduce"] = time.perf_counter() - t
    nodes = postorder(y0.tree)
    jobs = [(p, phi_leaf, (red, p, t0, t1, cfg.substeps, cfg.rtol_union))
            for p, s in nodes if isinstance(s, Leaf)]
    if cfg.mode == "parallel":
        jobs += [(p, psi_connect, (red, p, t0, t1, cfg.substeps))
                 for p, s in nodes if not isinstance(s, Leaf)]
    res = _run(executor, jobs)
    for p, s in nodes:
        if p in res:
            times[("phi" if isinstance(s, Leaf) else "psi") + str(p)] = res[p][1]
    u_hats = {p: res[p][0] for p, s in nodes if isinstance(s, Leaf)}
    t = time.perf_counter()
    if cfg.mode == "parallel":
        c_bars = {p: res[p][0] for p, s in nodes if not isinstance(s, Leaf)}
        aug = augment(y0, red, u_hats, h, c_bars=c_bars, executor=executor, rtol_union=cfg.rtol_union)
    else:
        def galerkin(path, aug_avg, hat):
            sub = red.subtrees[path]
            kids = [path + (i,) for i in range(len(sub.children))]
            rh = [hat[q].shape[1] if isinstance(red.subtrees[q], Leaf) else hat[q].shape[0] for q in kids]
            cred = red.init[path]
            f = red.galerkin_field(path, avg=aug_avg)
            return rk4_solve(lambda tt, c: f(c), _pad(cred, (cred.shape[0],) + tuple(rh)), t0, t1, cfg.substeps)
        aug = augment(y0, red, u_hats, h, galerkin=galerkin, executor=executor, rtol_union=cfg.rtol_union)
    times["augment"] = time.perf_counter() - t
    t = time.perf_counter()
    y1 = truncate_ttn(aug.network, cfg.tolerance, cfg.min_rank, cfg.max_rank, cfg.relative,
                      assume_orthonormal=True)
    times["truncate"] = time.perf_counter() - t
    rep = TTNStepReport(y0.ranks(), aug.network.ranks(), y1.ranks(), aug.eta, wall_times=times)
    return y1, rep, aug


def ttn_step(y0: TreeTensorNetwork, op: SumOfProductsOperator, t0: float, t1: float,
             config: StepConfig, executor=None):
    """
    One step in the configured mode, with optional step rejection: a
    rejected step is repeated from the augmented network (which
    represents the same tensor) up to `max_retries` times.
    """
    start = y0
    reasons_all = []
    for attempt in range(config.max_retries + 1):
        y1, rep, aug = _single_step(start, op, t0, t1, config, executor)
        if not config.reject:
            return y1, rep
        reasons, notes = rejection_check(start, y1, rep.eta, t1 - t0, config.tolerance, config.c,
                                         config.max_rank, config.allow_mary_rejection)
        rep.notes += notes
        for n in notes:
            warnings.warn(n)
        if not reasons:
            rep.retries = attempt
            rep.rejected = attempt > 0
            rep.reasons = reasons_all
            rep.old_ranks = y0.ranks()
            return y1, rep
        reasons_all += [r for r in reasons if r not in reasons_all]
        start = aug.retry_network
    raise RankGrowthError(f"rank growth insufficient after {config.max_retries} retries ({', '.join(reasons_all)})")


def parallel_ttn_step(y0, op, t0, t1, config: StepConfig, executor=None):
    """Parallel TTN BUG step: all leaf and connecting-tensor subflows use only old data."""
    if config.mode != "parallel":
        config = StepConfig(**{**config.__dict__, "mode": "parallel"})
    return ttn_step(y0, op, t0, t1, config, executor)


def rank_adaptive_ttn_step(y0, op, t0, t1, config: StepConfig, executor=None):
    """Rank-adaptive TTN BUG step: Galerkin updates in the augmented bases, leaves to root."""
    if config.mode != "rank_adaptive":
        config = StepConfig(**{**config.__dict__, "mode": "rank_adaptive"})
    return ttn_step(y0, op, t0, t1, config, executor)


def integrate(y0: TreeTensorNetwork, op: SumOfProductsOperator, t0: float, t_end: float,
              config: StepConfig, executor=None, callback=None):
    """
    Steps of size ``config.h`` from `t0` to `t_end`, the last one shortened
    if needed; `callback` receives ``(t, state, report)`` after every step.
    """
    if config.h is None:
        raise ValueError("config.h must be set")
    times = time_grid(t0, t_end, config.h)
    y = y0
    reports = []
    for ta, tb in zip(times[:-1], times[1:]):
        y, rep = ttn_step(y, op, ta, tb, config, executor)
        reports.append(rep)
        if callback is not None:
            callback(tb, y, rep)
    return y, reports


def time_grid(t0: float, t_end: float, h: float) -> np.ndarray:
    """Uniform grid with spacing `h`, ending exactly at `t_end`."""
    if not t_end > t0 or h <= 0:
        raise ValueError("need t_end > t0 and h > 0")
    n = int(np.ceil((t_end - t0) / h - 1e-9))
    return np.append(t0 + h * np.arange(n), t_end)
