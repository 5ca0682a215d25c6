from itertools import product

import numpy as np
import pytest

from ttnbug import lowrank_matrix as lm
from ttnbug import tucker as tk
from ttnbug.tensor_core import crandn, matricize, random_orthonormal, rk4_solve
from conftest import SEEDS, normalized_generator, random_operator


def random_tucker(dims, ranks, rng):
    return tk.TuckerTensor(crandn(ranks, rng), [random_orthonormal(n, r, rng) for n, r in zip(dims, ranks)])


def test_validation(rng):
    with pytest.raises(ValueError):
        tk.TuckerTensor(crandn((2, 2), rng), [random_orthonormal(4, 2, rng)])
    with pytest.raises(ValueError):
        tk.TuckerTensor(crandn((2, 3), rng), [random_orthonormal(4, 2, rng)] * 2)
    with pytest.raises(ValueError):
        tk.TensorField()


def test_project_operator_matches_dense(rng):
    dims, ranks = (4, 3, 5), (2, 2, 3)
    op = random_operator(dims, 4, rng)
    y = random_tucker(dims, ranks, rng)
    outs = [random_orthonormal(n, 2, rng) for n in dims]
    outs[1] = None
    a = tk.TensorField.from_operator(op).project(y.core, y.bases, outs)
    b = tk.TensorField(func=op.apply).project(y.core, y.bases, outs)
    assert np.allclose(a, b)


@pytest.mark.parametrize("seed", SEEDS)
def test_assembled_core_selectors(seed):
    rng = np.random.default_rng(seed)
    dims, ranks = (5, 4, 4), (2, 2, 1)
    y0 = random_tucker(dims, ranks, rng)
    op = random_operator(dims, 3, rng)
    _, rep = tk.parallel_tucker_step(y0, tk.TensorField.from_operator(op), 0, 0.05, 1e-8)
    c_hat, c1, blocks = rep.augmented_core, rep.c1, rep.coupling
    r = y0.ranks
    assert np.array_equal(c_hat[tuple(slice(0, k) for k in r)], c1)
    for i, b in enumerate(blocks):
        idx = [slice(0, k) for k in r]
        idx[i] = slice(r[i], None)
        assert np.array_equal(c_hat[tuple(idx)], b)
    # every block that is new in two or more modes is exactly zero
    for new in product([False, True], repeat=3):
        if sum(new) >= 2:
            idx = tuple(slice(k, None) if n else slice(0, k) for k, n in zip(r, new))
            assert not np.any(c_hat[idx])
    assert all(a <= 2 * b for a, b in zip(rep.new_ranks, r))


def test_assemble_rejects_bad_blocks(rng):
    with pytest.raises(ValueError):
        tk.assemble_augmented_core(np.zeros((2, 2)), [np.zeros((1, 3)), np.zeros((2, 0))])


@pytest.mark.parametrize("seed", SEEDS[:5])
def test_truncation_error_bound(seed):
    rng = np.random.default_rng(seed)
    c = crandn((4, 4, 4), rng) * 10.0 ** -rng.uniform(0, 3, size=(4, 4, 4))
    us = [random_orthonormal(6, 4, rng) for _ in range(3)]
    tol = 1e-2
    y, ps = tk.truncate_tucker(c, us, tol)
    full = tk.TuckerTensor(c, us).full()
    assert np.linalg.norm(full - y.full()) <= np.sqrt(3) * tol
    for u in y.bases:
        assert np.allclose(u.conj().T @ u, np.identity(u.shape[1]))


def test_matches_matrix_integrator_for_two_modes(rng):
    op = random_operator((6, 5), 4, rng)
    y0 = lm.LowRankMatrix(random_orthonormal(6, 2, rng), crandn((2, 2), rng), random_orthonormal(5, 2, rng))
    f = tk.TensorField.from_operator(op)
    t0 = tk.TuckerTensor(y0.S, [y0.U, y0.V.conj()])
    pairs = [(lm.parallel_step, tk.parallel_tucker_step), (lm.rank_adaptive_step, tk.rank_adaptive_tucker_step)]
    for ms, ts in pairs:
        a = ms(y0, lm.OperatorMatrixField(op), 0, 0.05, 1e-6, substeps=2).new_state.full()
        b, _ = ts(t0, f, 0, 0.05, 1e-6, substeps=2)
        assert np.linalg.norm(a - b.full()) < 1e-10


def test_full_rank_reproduces_rk4(rng):
    dims = (3, 2, 3)
    op = random_operator(dims, 3, rng, scale=0.3)
    y0 = random_tucker(dims, dims, rng)
    ref = rk4_solve(lambda t, y: op.apply(y), y0.full(), 0, 0.1, 2)
    for step in (tk.parallel_tucker_step, tk.rank_adaptive_tucker_step):
        y1, _ = step(y0, tk.TensorField.from_operator(op), 0, 0.1, 0.0, substeps=2)
        assert np.linalg.norm(y1.full() - ref) < 1e-12


@pytest.mark.parametrize("seed", SEEDS[:5])
def test_c_step_norm_conservation(seed):
    rng = np.random.default_rng(seed)
    dims = (3, 4, 2)
    op = normalized_generator(dims, 4, rng)
    y0 = random_tucker(dims, (2, 2, 2), rng)
    c1 = tk.c_step(y0, tk.TensorField.from_operator(op), 0, 1e-2, substeps=4)
    assert abs(np.linalg.norm(c1) - np.linalg.norm(y0.core)) <= 1e-10


def test_zero_field_and_integrate(rng):
    dims = (4, 3, 3)
    y0 = random_tucker(dims, (2, 2, 2), rng)
    f = tk.TensorField(func=lambda y: np.zeros_like(y))
    y1, reps = tk.integrate(y0, f, 0, 0.3, 0.1, 1e-12)
    assert len(reps) == 3
    assert np.allclose(y1.full(), y0.full(), atol=1e-13)
    assert reps[0].eta == 0.0
    assert matricize(y1.core, 0).shape[0] == 2
