"""
Tree tensor networks: tree values, the network container, full
contraction, orthonormalization, and reduced problems for subtrees.

A node is addressed by its path from the root: the root is ``()`` and
child ``i`` of ``p`` is ``p + (i,)``. A leaf stores its basis ``U``
(``n x r``); an internal node stores its connecting tensor ``C`` of
shape ``(r, r_1, ..., r_m)``. The root rank is 1.

Dense subtree tensors order their leaves depth-first, first leaf fastest.
"""

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .operators import SumOfProductsOperator
from .tensor_core import (as_tensor, matricize, mode_product, qr_orthonormal,
                          tensorize)

__all__ = ["Leaf", "Node", "Tree", "TreeTensorNetwork", "SumOfProductsOperator",
           "contract_full", "orthonormalize", "gram_orthonormality_check",
           "subtree_frame", "prolongate", "restrict", "reduce_problem",
           "Reduction", "save_ttn", "load_ttn"]

DENSE_GUARD = 2**24


@dataclass(frozen=True)
class Leaf:
    id: int
    dim: int

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("leaf dimension must be positive")


@dataclass(frozen=True)
class Node:
    children: tuple

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if len(self.children) < 2:
            raise ValueError("an internal node needs at least two children")
        seen = set()
        for c in self.children:
            ids = set(leaf_ids(c))
            if seen & ids:
                raise ValueError(f"leaf ids {sorted(seen & ids)} appear in more than one subtree")
            seen |= ids


Tree = Union[Leaf, Node]
Path = Tuple[int, ...]


def leaf_ids(tree: Tree) -> List[int]:
    """Leaf ids in depth-first order."""
    if isinstance(tree, Leaf):
        return [tree.id]
    return [l for c in tree.children for l in leaf_ids(c)]


def leaf_dims(tree: Tree) -> List[int]:
    if isinstance(tree, Leaf):
        return [tree.dim]
    return [n for c in tree.children for n in leaf_dims(c)]


def subtree(tree: Tree, path: Path) -> Tree:
    for i in path:
        tree = tree.children[i]
    return tree


def postorder(tree: Tree, path: Path = ()) -> List[Tuple[Path, Tree]]:
    """All (path, subtree) pairs, children before parents."""
    out = []
    if isinstance(tree, Node):
        for i, c in enumerate(tree.children):
            out += postorder(c, path + (i,))
    out.append((path, tree))
    return out


def is_subtree(sigma: Tree, tau: Tree) -> bool:
    """Partial order: True if `sigma` is a subtree of `tau` (or equal)."""
    if sigma == tau:
        return True
    return isinstance(tau, Node) and any(is_subtree(sigma, c) for c in tau.children)


def balanced_binary_tree(dims: Sequence[int], offset: int = 0) -> Tree:
    """Balanced binary tree over leaves ``offset, offset+1, ...``; the left half gets the smaller share."""
    d = len(dims)
    if d == 1:
        return Leaf(offset, int(dims[0]))
    k = d // 2
    return Node((balanced_binary_tree(dims[:k], offset), balanced_binary_tree(dims[k:], offset + k)))


def tree_from_nested(nested, dims: Sequence[int]) -> Tree:
    """Build a tree from nested lists of leaf ids, e.g. ``[[0, 1], [2, 3]]``."""
    if isinstance(nested, (int, np.integer)):
        return Leaf(int(nested), int(dims[int(nested)]))
    return Node(tuple(tree_from_nested(c, dims) for c in nested))


def tree_to_nested(tree: Tree):
    if isinstance(tree, Leaf):
        return tree.id
    return [tree_to_nested(c) for c in tree.children]


def kron_over_subtree(tree: Tree, factors: Dict[int, np.ndarray]) -> np.ndarray:
    """Dense Kronecker product of leaf factors in subtree order (identity where absent)."""
    m = np.ones((1, 1), dtype=complex)
    for l, n in zip(leaf_ids(tree), leaf_dims(tree)):
        m = np.kron(factors.get(l, np.identity(n)), m)
    return m


@dataclass
class TreeTensorNetwork:
    tree: Tree
    tensors: Dict[Path, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.tensors = {tuple(p): as_tensor(t) for p, t in self.tensors.items()}
        self.validate()

    def validate(self):
        for path, sub in postorder(self.tree):
            if path not in self.tensors:
                raise ValueError(f"missing tensor at node {path}")
            t = self.tensors[path]
            if isinstance(sub, Leaf):
                if t.ndim != 2 or t.shape[0] != sub.dim:
                    raise ValueError(f"leaf {path} basis has shape {t.shape}, expected ({sub.dim}, r)")
                continue
            if t.ndim != len(sub.children) + 1:
                raise ValueError(f"node {path} tensor has order {t.ndim}, expected {len(sub.children) + 1}")
            for i in range(len(sub.children)):
                if t.shape[i + 1] != self.rank(path + (i,)):
                    raise ValueError(f"rank mismatch on edge {path + (i,)}")
        if isinstance(self.tree, Node) and self.tensors[()].shape[0] != 1:
            raise ValueError("root rank must be 1")

    def rank(self, path: Path) -> int:
        t = self.tensors[path]
        return t.shape[1] if isinstance(subtree(self.tree, path), Leaf) else t.shape[0]

    def ranks(self) -> Dict[Path, int]:
        return {p: self.rank(p) for p, _ in postorder(self.tree)}

    def copy(self) -> "TreeTensorNetwork":
        return TreeTensorNetwork(self.tree, {p: t.copy() for p, t in self.tensors.items()})

    def norm(self) -> float:
        """Norm, assuming orthonormal form."""
        return float(np.linalg.norm(self.tensors[()]))

    def full(self) -> np.ndarray:
        return contract_full(self)

    @property
    def dims(self):
        ids = leaf_ids(self.tree)
        ns = leaf_dims(self.tree)
        return tuple(n for _, n in sorted(zip(ids, ns)))


def subtree_basis(x: TreeTensorNetwork, path: Path = ()) -> np.ndarray:
    """Dense ``U_tau = Mat_0(X_tau)^T`` of the subtree at `path` (``N_tau x r_tau``)."""
    sub = subtree(x.tree, path)
    if isinstance(sub, Leaf):
        return x.tensors[path]
    n = int(np.prod(leaf_dims(sub), dtype=int))
    if n > DENSE_GUARD:
        raise MemoryError(f"dense subtree of size {n} exceeds guard 2^24")
    t = x.tensors[path]
    for i in range(len(sub.children)):
        t = mode_product(t, subtree_basis(x, path + (i,)), i + 1)
    return matricize(t, 0).T


def contract_full(x: TreeTensorNetwork) -> np.ndarray:
    """
    Dense tensor represented by `x`, with axes ordered by leaf id.
    """
    if isinstance(x.tree, Leaf):
        return x.tensors[()][:, 0].copy()
    u = subtree_basis(x, ())
    dims = leaf_dims(x.tree)
    t = u[:, 0].reshape(dims, order="F")
    return np.transpose(t, np.argsort(leaf_ids(x.tree)))


def orthonormalize(x: TreeTensorNetwork) -> TreeTensorNetwork:
    """
    Root-orthonormal form by QR factorizations from the leaves up; the
    triangular factors are absorbed by the parents.
    """
    out = dict(x.tensors)

    def rec(path, sub):
        if isinstance(sub, Leaf):
            q, r = qr_orthonormal(out[path])
            out[path] = q
            return r
        c = out[path]
        for i, child in enumerate(sub.children):
            c = mode_product(c, rec(path + (i,), child), i + 1)
        if path == ():
            out[path] = c
            return None
        q, r = qr_orthonormal(matricize(c, 0).T)
        shape = (q.shape[1],) + c.shape[1:]
        out[path] = tensorize(q.T, 0, shape)
        return r

    rec((), x.tree)
    return TreeTensorNetwork(x.tree, out)


def gram_matrices(x: TreeTensorNetwork) -> Dict[Path, np.ndarray]:
    """``U_tau^* U_tau`` for every node by the Gram recursion (no dense bases)."""
    grams = {}
    for path, sub in postorder(x.tree):
        t = x.tensors[path]
        if isinstance(sub, Leaf):
            grams[path] = t.conj().T @ t
            continue
        z = t
        for i in range(len(sub.children)):
            z = mode_product(z, grams[path + (i,)], i + 1)
        grams[path] = matricize(t, 0).conj() @ matricize(z, 0).T
    return grams


def gram_orthonormality_check(x: TreeTensorNetwork) -> Dict[Path, float]:
    """Residual ``||U_tau^* U_tau - I||_F`` for every non-root node."""
    return {p: float(np.linalg.norm(g - np.identity(g.shape[0])))
            for p, g in gram_matrices(x).items() if p != ()}


# --- frames, prolongation and restriction -----------------------------------

@dataclass
class SubtreeFrame:
    """
    Frame for child `i` of a node: ``Mat_i(C)^T = Q R`` and the tensor
    ``G = Ten_i(Q^T)``. Sibling bases are kept as given (dense only in
    the oracle routines below).
    """
    child: int
    q: np.ndarray
    r: np.ndarray
    g: np.ndarray
    sibling_bases: Optional[List[np.ndarray]] = None

    @property
    def effective_rank(self) -> int:
        return self.q.shape[1]


def subtree_frame(c, i: int, child_bases=None) -> SubtreeFrame:
    """
    Frame of child `i` (1-based mode of `c`). ``R`` is square when
    ``r_i`` does not exceed the product of the other dimensions.
    """
    c = as_tensor(c)
    if not 1 <= i < c.ndim:
        raise ValueError(f"child mode {i} out of range")
    q, r = qr_orthonormal(matricize(c, i).T)
    shape = list(c.shape)
    shape[i] = q.shape[1]
    return SubtreeFrame(i, q, r, tensorize(q.T, i, shape), child_bases)


def _frame_vstar(frame: SubtreeFrame) -> np.ndarray:
    i = frame.child
    g = frame.g
    for j, u in enumerate(frame.sibling_bases):
        if j + 1 != i:
            g = mode_product(g, u, j + 1)
    return matricize(g, i)


def prolongate(y, frame: SubtreeFrame) -> np.ndarray:
    """
    ``Ten_i(Mat_0(Y)^T V^*)``; `y` is a child-space tensor whose mode 0 has
    the frame rank, and the result is a dense parent-space tensor.
    """
    y = as_tensor(y)
    vstar = _frame_vstar(frame)
    if y.shape[0] != vstar.shape[0]:
        raise ValueError(f"child tensor mode 0 has size {y.shape[0]}, frame rank is {vstar.shape[0]}")
    m = matricize(y, 0).T @ vstar
    shape = [frame.g.shape[0]] + [u.shape[0] for u in frame.sibling_bases]
    shape[frame.child] = m.shape[0]
    return tensorize(m, frame.child, shape)


def restrict(z, frame: SubtreeFrame, child_shape: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    ``Ten_0(V^T Mat_i(Z)^T)``. `child_shape` gives the trailing shape of
    the child space (defaults to a single flattened mode).
    """
    z = as_tensor(z)
    vstar = _frame_vstar(frame)
    mi = matricize(z, frame.child)
    if mi.shape[1] != vstar.shape[1]:
        raise ValueError("parent tensor does not match frame")
    m = vstar.conj() @ mi.T
    shape = (m.shape[0],) + (tuple(child_shape) if child_shape is not None else (m.shape[1],))
    return tensorize(m, 0, shape)


# --- term-wise reduction ----------------------------------------------------

def _term_support(op: SumOfProductsOperator):
    return [frozenset(l for l, m in t.items()) for t in op.terms]


def node_average(bra, ket, child_mats: Sequence[Optional[np.ndarray]]) -> np.ndarray:
    """
    ``conj(Mat_0(bra)) Mat_0(ket ×_j A_j)^T``: the recursion for
    ``U_bra^* H U_ket`` at an internal node; `None` means identity.
    """
    z = ket
    for j, a in enumerate(child_mats):
        if a is not None:
            z = mode_product(z, a, j + 1)
    return matricize(bra, 0).conj() @ matricize(z, 0).T


def embedding(rows: int, cols: int) -> np.ndarray:
    """``(I, 0)^T``: embeds an old basis into a prefix-preserving augmented one."""
    return np.eye(rows, cols, dtype=complex)


@dataclass
class EnvTerm:
    """One channel of a reduced field: ``Y ×_0 E`` times the term's factors inside the subtree (`k` None: none)."""
    e: np.ndarray
    k: Optional[int]


class Reduction:
    """
    Reduced fields and initial data for every subtree of an orthonormal
    TTN and a sum-of-products field ``F(Y) = sum_k c_k (⊗_l M_kl) Y``.

    Built once per step and read-only afterwards:

    * ``avg[path][k]``: ``U^* H_k U`` on the subtree (absent when the term
      does not act inside, where it is the identity);
    * ``env[path]``: channels ``(E, k)`` with
      ``F_tau(Y) = sum Y ×_0 E ×_j H_kj``;
    * ``init[path]``: reduced initial connecting tensor (leaf: ``Y_l^0``, ``r x n``).
    """

    def __init__(self, x: TreeTensorNetwork, op: SumOfProductsOperator):
        self.x = x
        self.op = op
        self.tree = x.tree
        self.support = _term_support(op)
        self.subtrees = {p: s for p, s in postorder(self.tree)}
        self.leafsets = {p: frozenset(leaf_ids(s)) for p, s in self.subtrees.items()}
        self.avg: Dict[Path, Dict[int, np.ndarray]] = {}
        self.env: Dict[Path, List[EnvTerm]] = {}
        self.init: Dict[Path, np.ndarray] = {}
        self.frames: Dict[Path, SubtreeFrame] = {}
        self._averages()
        self._environments()

    def acts_in(self, k: int, path: Path) -> bool:
        return bool(self.support[k] & self.leafsets[path])

    def child_mats(self, avg, path, k):
        sub = self.subtrees[path]
        return [avg[path + (j,)].get(k) for j in range(len(sub.children))]

    def _averages(self):
        x = self.x
        for path, sub in postorder(self.tree):
            t = x.tensors[path]
            a = {}
            for k in range(len(self.op.terms)):
                if not self.acts_in(k, path):
                    continue
                if isinstance(sub, Leaf):
                    a[k] = t.conj().T @ self.op.terms[k][sub.id] @ t
                else:
                    a[k] = node_average(t, t, self.child_mats(self.avg, path, k))
            self.avg[path] = a

    def _environments(self):
        op = self.op
        root = ()
        if isinstance(self.tree, Leaf):
            self.env[root] = [EnvTerm(np.array([[c]]), k) for k, c in enumerate(op.coeffs)]
            self.init[root] = self.x.tensors[root].T
            return
        self.env[root] = [EnvTerm(np.array([[c]], dtype=complex), k) for k, c in enumerate(op.coeffs)]
        self.init[root] = self.x.tensors[root]
        for path, sub in reversed(postorder(self.tree)):
            if isinstance(sub, Leaf):
                continue
            # frames come from the reduced data, whose mode 0 carries the parent's R
            c = self.init[path]
            for i in range(len(sub.children)):
                cp = path + (i,)
                fr = subtree_frame(c, i + 1)
                self.frames[cp] = fr
                self.env[cp] = self._child_env(path, i, fr.g)
                rt = fr.r
                if isinstance(self.subtrees[cp], Leaf):
                    self.init[cp] = rt @ self.x.tensors[cp].T
                else:
                    self.init[cp] = mode_product(self.x.tensors[cp], rt, 0)

    def _child_env(self, path, i, g):
        cp = path + (i,)
        merged = None
        out = []
        gi = matricize(g, i + 1).conj()
        for term in self.env[path]:
            z = mode_product(g, term.e, 0)
            if term.k is not None:
                for j, a in enumerate(self.child_mats(self.avg, path, term.k)):
                    if j != i and a is not None:
                        z = mode_product(z, a, j + 1)
            e = gi @ matricize(z, i + 1).T
            if term.k is not None and self.acts_in(term.k, cp):
                out.append(EnvTerm(e, term.k))
            else:
                merged = e if merged is None else merged + e
        if merged is not None:
            out.insert(0, EnvTerm(merged, None))
        return out

    # reduced fields

    def leaf_field(self, path: Path):
        """``Y -> sum E Y M^T`` on the reduced leaf space (``r x n`` matrices)."""
        lid = self.subtrees[path].id
        chans = [(t.e, None if t.k is None else self.op.terms[t.k][lid].T) for t in self.env[path]]

        def f(y):
            out = None
            for e, mt in chans:
                z = e @ y
                if mt is not None:
                    z = z @ mt
                out = z if out is None else out + z
            return np.zeros_like(y) if out is None else out
        return f

    def galerkin_field(self, path: Path, avg=None):
        """
        ``C -> sum C ×_0 E ×_j A_kj`` with child averages `avg` (old
        averages by default, i.e. the Galerkin field in the old bases).
        """
        avg = self.avg if avg is None else avg
        chans = []
        for t in self.env[path]:
            mats = [None] * len(self.subtrees[path].children) if t.k is None else self.child_mats(avg, path, t.k)
            chans.append((t.e, mats))

        def f(c):
            out = None
            for e, mats in chans:
                z = mode_product(c, e, 0)
                for j, a in enumerate(mats):
                    if a is not None:
                        z = mode_product(z, a, j + 1)
                out = z if out is None else out + z
            return np.zeros_like(c) if out is None else out
        return f

    def dense_field(self, path: Path):
        """
        Reduced field on the dense subtree space ``C^{r x N_1 x ... x N_m}``
        (leaf: ``C^{r x n}``); oracle use only.
        """
        sub = self.subtrees[path]
        kids = [sub] if isinstance(sub, Leaf) else list(sub.children)
        chans = []
        for t in self.env[path]:
            mats = [None if t.k is None or not (self.support[t.k] & frozenset(leaf_ids(c)))
                    else kron_over_subtree(c, self.op.terms[t.k]) for c in kids]
            chans.append((t.e, mats))

        def f(y):
            out = None
            for e, mats in chans:
                z = mode_product(y, e, 0)
                for j, a in enumerate(mats):
                    if a is not None:
                        z = mode_product(z, a, j + 1)
                out = z if out is None else out + z
            return np.zeros_like(y) if out is None else out
        return f


@dataclass
class ReducedProblem:
    path: Path
    field: object
    initial: np.ndarray
    frame: Optional[SubtreeFrame]


def reduce_problem(x: TreeTensorNetwork, op: SumOfProductsOperator, path: Path,
                   reduction: Optional[Reduction] = None) -> ReducedProblem:
    """
    Reduced field and initial data for the subtree at `path` (term-wise).
    The field acts on dense subtree-space tensors; see `Reduction` for the
    factorized forms used by the integrators.
    """
    red = reduction if reduction is not None else Reduction(x, op)
    return ReducedProblem(path, red.dense_field(path), red.init[path], red.frames.get(path))


def dense_subtree_tensor(x: TreeTensorNetwork, path: Path, core=None) -> np.ndarray:
    """``core ×_j U_j`` over the children of `path` (dense; leaf: returns `core`)."""
    sub = subtree(x.tree, path)
    core = x.tensors[path] if core is None else core
    if isinstance(sub, Leaf):
        return core
    for i in range(len(sub.children)):
        core = mode_product(core, subtree_basis(x, path + (i,)), i + 1)
    return core


def literal_reduction(x: TreeTensorNetwork, dense_op: np.ndarray, path: Path):
    """
    Oracle: reduced field at `path` as the literal composition
    ``π† ∘ F ∘ π`` down the chain of ancestors, with `dense_op` acting on
    first-mode-fastest vectorizations in leaf-id order. Returns
    ``(field, initial)`` on dense subtree spaces.
    """
    tree = x.tree
    ids = leaf_ids(tree)
    dims = leaf_dims(tree)
    n = int(np.prod(dims, dtype=int))
    # permutation from depth-first vectorization to id-ordered vectorization
    idx = np.arange(n).reshape(dims, order="F")
    idx = np.transpose(idx, np.argsort(ids)).reshape(-1, order="F")
    p = np.zeros((n, n))
    p[np.arange(n), idx] = 1.0
    h_dfs = p.T @ dense_op @ p

    def root_field(z):
        shape = z.shape
        return (h_dfs @ z.reshape(-1, order="F")).reshape(shape, order="F")

    if isinstance(tree, Leaf):
        return root_field, x.tensors[()].T

    # root space C^{1 x N_1 x ... x N_m}; vectorization is depth-first
    field = root_field
    y0 = dense_subtree_tensor(x, ())
    cur = ()
    for i in path:
        sub = subtree(tree, cur)
        bases = [subtree_basis(x, cur + (j,)) for j in range(len(sub.children))]
        # connecting tensor of the current reduced data, recovered from its dense form
        c = y0
        for j, u in enumerate(bases):
            c = mode_product(c, u.conj().T, j + 1)
        fr = subtree_frame(c, i + 1, bases)
        child = sub.children[i]
        child_shape = [child.dim] if isinstance(child, Leaf) else \
            [int(np.prod(leaf_dims(g), dtype=int)) for g in child.children]

        def make(parent_field, fr=fr, child_shape=child_shape):
            def g(y):
                flat = y.reshape((y.shape[0], -1), order="F")
                return restrict(parent_field(prolongate(flat, fr)), fr, child_shape)
            return g
        field = make(field)
        y0 = restrict(y0, fr, child_shape)
        cur = cur + (i,)
    return field, y0


# --- serialization ----------------------------------------------------------

def _tree_json(tree: Tree):
    if isinstance(tree, Leaf):
        return {"leaf": tree.id, "dim": tree.dim}
    return {"children": [_tree_json(c) for c in tree.children]}


def _tree_from_json(d) -> Tree:
    if "leaf" in d:
        return Leaf(int(d["leaf"]), int(d["dim"]))
    return Node(tuple(_tree_from_json(c) for c in d["children"]))


def _path_key(path: Path) -> str:
    return "node" + "".join(f"_{i}" for i in path)


def save_ttn(file, x: TreeTensorNetwork):
    """
    Write `x` to an ``.npz`` archive: entry ``tree`` holds the JSON tree
    description, entry ``node_i_j...`` the tensor at path ``(i, j, ...)``.
    """
    arrays = {_path_key(p): t for p, t in x.tensors.items()}
    np.savez(file, tree=np.array(json.dumps(_tree_json(x.tree))), **arrays)


def load_ttn(file) -> TreeTensorNetwork:
    with np.load(file) as z:
        tree = _tree_from_json(json.loads(str(z["tree"])))
        tensors = {p: z[_path_key(p)] for p, _ in postorder(tree)}
    return TreeTensorNetwork(tree, tensors)


def random_ttn(tree: Tree, rank, rng: np.random.Generator, orthonormal: bool = True) -> TreeTensorNetwork:
    """
    Random TTN with edge rank `rank` (int or callable ``path -> int``),
    capped by the dimensions below each edge.
    """
    from .tensor_core import crandn
    rk = rank if callable(rank) else (lambda p: rank)
    caps = {}
    for path, sub in postorder(tree):
        full = int(np.prod(leaf_dims(sub), dtype=int))
        caps[path] = 1 if path == () else min(rk(path), full)
    tensors = {}
    for path, sub in postorder(tree):
        if isinstance(sub, Leaf):
            tensors[path] = crandn((sub.dim, caps[path]), rng)
        else:
            shape = (caps[path],) + tuple(caps[path + (i,)] for i in range(len(sub.children)))
            tensors[path] = crandn(shape, rng)
    x = TreeTensorNetwork(tree, tensors)
    return orthonormalize(x) if orthonormal else x
