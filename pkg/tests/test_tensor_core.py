import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ttnbug.tensor_core import (DivergenceError, matricize, mode_product, multi_mode_product,
                                orthonormal_basis_union, qr_orthonormal, retained_rank, rk4_solve,
                                svd_truncate, tensorize, crandn, random_orthonormal)

shapes = st.lists(st.integers(1, 4), min_size=1, max_size=4)


@settings(max_examples=40, deadline=None)
@given(shapes, st.data())
def test_matricize_tensorize_roundtrip(shape, data):
    mode = data.draw(st.integers(0, len(shape) - 1))
    t = np.arange(np.prod(shape), dtype=float).reshape(shape)
    m = matricize(t, mode)
    assert m.shape == (shape[mode], t.size // shape[mode])
    assert np.array_equal(tensorize(m, mode, shape), t)


def test_matricize_column_order_is_first_mode_fastest():
    t = np.random.default_rng(0).normal(size=(2, 3, 4))
    m = matricize(t, 1)
    # explicit index map: column = i0 + 2 * i2
    for i0 in range(2):
        for i1 in range(3):
            for i2 in range(4):
                assert m[i1, i0 + 2 * i2] == t[i0, i1, i2]


def test_mode_product_matches_einsum(rng):
    t = crandn((3, 4, 5), rng)
    a = crandn((6, 4), rng)
    assert np.allclose(mode_product(t, a, 1), np.einsum("ijk,mj->imk", t, a))
    b = crandn((2, 5), rng)
    assert np.allclose(multi_mode_product(t, [None, a, b]), np.einsum("ijk,mj,nk->imn", t, a, b))


def test_mode_product_shape_error(rng):
    with pytest.raises(ValueError):
        mode_product(crandn((3, 4), rng), crandn((2, 5), rng), 1)


@pytest.mark.parametrize("seed", range(10))
def test_svd_truncate_tail_and_minimality(seed):
    rng = np.random.default_rng(seed)
    m = crandn((8, 6), rng) @ np.diag(10.0 ** -np.arange(6)) @ crandn((6, 6), rng)
    tol = 10.0 ** -rng.uniform(1, 5)
    tr = svd_truncate(m, tol)
    assert np.linalg.norm(m - tr.left @ np.diag(tr.singular_values) @ tr.right.conj().T) <= tol * (1 + 1e-10)
    s = tr.all_singular_values
    if tr.kept_rank > 1:
        assert np.linalg.norm(s[tr.kept_rank - 1:]) > tol


def test_svd_truncate_clamps_and_relative(rng):
    m = crandn((5, 5), rng)
    tr = svd_truncate(m, 0.0, max_rank=2)
    assert tr.kept_rank == 2 and tr.clamped
    assert svd_truncate(np.zeros((3, 3)), 1.0, min_rank=1).kept_rank == 1
    s = np.linalg.svd(m, compute_uv=False)
    rel = svd_truncate(m, 0.5, relative=True)
    assert rel.kept_rank == retained_rank(s, 0.5 * np.linalg.norm(s))
    with pytest.raises(ValueError):
        svd_truncate(m, -1.0)


def test_retained_rank_values():
    assert retained_rank([3.0, 2.0, 1.0], 0.0) == 3
    assert retained_rank([3.0, 2.0, 1.0], 1.0) == 2
    assert retained_rank([3.0, 2.0, 1.0], np.sqrt(5.0)) == 1
    assert retained_rank([3.0, 2.0, 1.0], 10.0) == 0


@pytest.mark.parametrize("seed", range(10))
def test_basis_union_prefix_and_span(seed):
    rng = np.random.default_rng(seed)
    u0 = random_orthonormal(9, 3, rng)
    k1 = crandn((9, 3), rng)
    u = orthonormal_basis_union(u0, k1)
    assert np.array_equal(u[:, :3], u0)
    assert u.shape[1] <= 6
    assert np.linalg.norm(u.conj().T @ u - np.identity(u.shape[1])) < 1e-12
    assert np.linalg.norm(k1 - u @ (u.conj().T @ k1)) < 1e-10


def test_basis_union_drops_dependent_directions(rng):
    u0 = random_orthonormal(6, 2, rng)
    k1 = u0 @ crandn((2, 2), rng)
    assert orthonormal_basis_union(u0, k1).shape[1] == 2
    with pytest.raises(ValueError):
        orthonormal_basis_union(crandn((6, 2), rng), k1)


def test_qr_orthonormal_reconstructs(rng):
    a = crandn((7, 3), rng)
    q, r = qr_orthonormal(a)
    assert np.allclose(q @ r, a)
    assert np.allclose(q.conj().T @ q, np.identity(3))


def test_rk4_fourth_order():
    lam = -1.0 + 2.0j
    errs = [abs(rk4_solve(lambda t, y: lam * y, np.array([1.0 + 0j]), 0, 1, n)[0] - np.exp(lam))
            for n in (10, 20)]
    assert 14 < errs[0] / errs[1] < 18


def test_rk4_time_dependent():
    y = rk4_solve(lambda t, y: np.array([np.cos(t)]), np.array([0.0]), 0, 1, 50)
    assert abs(y[0] - np.sin(1.0)) < 1e-9


def test_rk4_divergence():
    with pytest.raises(DivergenceError), np.errstate(all="ignore"):
        rk4_solve(lambda t, y: y * 1e200, np.array([1e200]), 0, 1, 2)
