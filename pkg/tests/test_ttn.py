import numpy as np
import pytest

from ttnbug.ttn import (Leaf, Node, Reduction, TreeTensorNetwork, balanced_binary_tree, contract_full,
                        dense_subtree_tensor, gram_matrices, gram_orthonormality_check, is_subtree,
                        leaf_dims, leaf_ids, literal_reduction, load_ttn, orthonormalize, postorder,
                        prolongate, random_ttn, reduce_problem, restrict, save_ttn, subtree,
                        subtree_basis, subtree_frame, tree_from_nested, tree_to_nested)
from ttnbug.tensor_core import crandn, matricize
from conftest import SEEDS, random_operator


def test_tree_validation():
    with pytest.raises(ValueError):
        Node((Leaf(0, 2),))
    with pytest.raises(ValueError):
        Node((Leaf(0, 2), Leaf(0, 3)))
    with pytest.raises(ValueError):
        Leaf(0, 0)


def test_tree_helpers():
    tree = tree_from_nested([[0, 1], [2, [3, 4]]], [2, 3, 2, 2, 4])
    assert leaf_ids(tree) == [0, 1, 2, 3, 4]
    assert leaf_dims(tree) == [2, 3, 2, 2, 4]
    assert tree_to_nested(tree) == [[0, 1], [2, [3, 4]]]
    assert subtree(tree, (1, 1)) == tree_from_nested([3, 4], [2, 3, 2, 2, 4])
    assert is_subtree(subtree(tree, (1,)), tree)
    assert not is_subtree(Leaf(7, 2), tree)
    paths = [p for p, _ in postorder(tree)]
    assert paths[-1] == () and paths.index((1, 1)) < paths.index((1,))
    b = balanced_binary_tree([2] * 6)
    assert leaf_ids(b) == list(range(6))


def test_contract_full_explicit_oracle(rng):
    tree = tree_from_nested([[0, 2], 1], [2, 3, 4])
    x = random_ttn(tree, 2, rng, orthonormal=False)
    u0, u2, u1 = x.tensors[(0, 0)], x.tensors[(0, 1)], x.tensors[(1,)]
    c_in, c_root = x.tensors[(0,)], x.tensors[()]
    # explicit sums: X[i0, i1, i2] = sum C_root[0, r, c] C_in[r, a, b] U0[i0, a] U2[i2, b] U1[i1, c]
    full = np.zeros((2, 3, 4), dtype=complex)
    for i0 in range(2):
        for i1 in range(3):
            for i2 in range(4):
                s = 0
                for r in range(c_in.shape[0]):
                    for a in range(c_in.shape[1]):
                        for b in range(c_in.shape[2]):
                            for c in range(u1.shape[1]):
                                s += c_root[0, r, c] * c_in[r, a, b] * u0[i0, a] * u2[i2, b] * u1[i1, c]
                full[i0, i1, i2] = s
    assert np.allclose(contract_full(x), full)


@pytest.mark.parametrize("seed", SEEDS)
def test_orthonormalize_preserves_tensor(seed):
    rng = np.random.default_rng(seed)
    tree = balanced_binary_tree([2, 3, 2, 2, 3])
    x = random_ttn(tree, 3, rng, orthonormal=False)
    y = orthonormalize(x)
    assert np.allclose(contract_full(x), contract_full(y))
    assert max(gram_orthonormality_check(y).values()) < 1e-12
    assert np.isclose(y.norm(), np.linalg.norm(contract_full(x)))


def test_gram_matches_dense(rng):
    x = random_ttn(balanced_binary_tree([2, 2, 3, 2]), 2, rng, orthonormal=False)
    for p, g in gram_matrices(x).items():
        u = subtree_basis(x, p)
        assert np.allclose(g, u.conj().T @ u)


def test_network_validation(rng):
    tree = balanced_binary_tree([2, 2])
    x = random_ttn(tree, 2, rng)
    bad = dict(x.tensors)
    bad[(0,)] = crandn((3, 2), rng)
    with pytest.raises(ValueError):
        TreeTensorNetwork(tree, bad)
    bad = dict(x.tensors)
    bad[()] = crandn((2, 2, 2), rng)
    with pytest.raises(ValueError):
        TreeTensorNetwork(tree, bad)
    assert x.ranks()[()] == 1


def test_serialization_roundtrip(tmp_path, rng):
    x = random_ttn(tree_from_nested([[0, 1, 2], [3, 4]], [2, 3, 2, 2, 3]), 2, rng)
    save_ttn(tmp_path / "x.npz", x)
    y = load_ttn(tmp_path / "x.npz")
    assert y.tree == x.tree
    for p in x.tensors:
        assert np.array_equal(x.tensors[p], y.tensors[p])


def test_frame_restrict_prolongate(rng):
    c = crandn((1, 2, 3), rng)
    bases = [np.linalg.qr(crandn((4, 2), rng))[0], np.linalg.qr(crandn((5, 3), rng))[0]]
    fr = subtree_frame(c, 1, bases)
    y = crandn((fr.effective_rank, 4), rng)
    z = prolongate(y, fr)
    assert z.shape == (1, 4, 5)
    assert np.allclose(restrict(z, fr, (4,)), y)
    # reconstruction: Mat_1(C) = R^T Mat_1(G)
    assert np.allclose(matricize(c, 1), fr.r.T @ matricize(fr.g, 1))


@pytest.mark.parametrize("seed", SEEDS[:5])
def test_reduction_matches_literal_composition(seed):
    rng = np.random.default_rng(seed)
    tree = tree_from_nested([[0, [1, 2]], [3, 4]], [2, 3, 2, 2, 3])
    x = random_ttn(tree, 3, rng)
    op = random_operator(x.dims, 6, rng)
    dense = op.to_dense()
    red = Reduction(x, op)
    for path, _ in postorder(tree):
        f_lit, init_lit = literal_reduction(x, dense, path)
        prob = reduce_problem(x, op, path, red)
        assert np.allclose(dense_subtree_tensor(x, path, red.init[path]), init_lit, atol=1e-12)
        z = crandn(init_lit.shape, rng)
        assert np.linalg.norm(f_lit(z) - prob.field(z)) < 1e-10 * max(1, np.linalg.norm(f_lit(z)))


def test_root_galerkin_field_is_projected_field(rng):
    tree = balanced_binary_tree([2, 3, 2])
    x = random_ttn(tree, 2, rng)
    op = random_operator(x.dims, 3, rng)
    red = Reduction(x, op)
    c = crandn(x.tensors[()].shape, rng)
    fc = red.galerkin_field(())(c)
    # dense oracle: P F(Y) with P the projector onto span(U_0) ⊗ span(U_1)
    u0, u1 = subtree_basis(x, (0,)), subtree_basis(x, (1,))
    y = u0 @ c[0] @ u1.T
    fy = op.apply(y.reshape(x.dims, order="F")).reshape(y.shape, order="F")
    assert np.allclose(u0 @ fc[0] @ u1.T, u0 @ (u0.conj().T @ fy @ u1.conj()) @ u1.T)


def test_random_ttn_rank_caps(rng):
    x = random_ttn(balanced_binary_tree([2, 2, 2, 2]), 8, rng)
    assert x.rank((0, 0)) == 2 and x.rank((0,)) == 4 and x.rank(()) == 1
