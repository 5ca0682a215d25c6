"""
Test problems: a long-range Ising chain and a 1D radiative-transfer
planesource problem with uncertain scattering, each with a dense
reference solver.
"""

from dataclasses import dataclass
from itertools import product
from typing import Optional

import numpy as np
from scipy.linalg import eigh
from scipy.sparse import csr_matrix, identity, kron
from scipy.sparse.linalg import expm_multiply

from .operators import SumOfProductsOperator
from .tensor_core import crandn, tensorize
from .ttn import (Leaf, Tree, TreeTensorNetwork, balanced_binary_tree,
                  contract_full, leaf_dims, leaf_ids, postorder, tree_from_nested)

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
N_EXCITED = np.array([[1, 0], [0, 0]], dtype=complex)


# --- Ising chain ------------------------------------------------------------

@dataclass(frozen=True)
class IsingParams:
    d: int
    omega: float = 1.0
    delta: float = 1.0
    v: float = 1.0
    alpha: float = 1.0
    ordered_pairs: bool = False

    def __post_init__(self):
        if self.d < 2:
            raise ValueError("need at least two particles")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")


def ising_hamiltonian(p: IsingParams) -> SumOfProductsOperator:
    """
    ``H = Ω Σ σx_k + Δ Σ n_k + Σ_{k<h} β_kh n_k n_h`` with
    ``β_kh = V / |k-h|^α``; with `ordered_pairs` every pair counts twice,
    as in a sum over ``k != h``.
    """
    op = SumOfProductsOperator((2,) * p.d)
    for k in range(p.d):
        op.add_term({k: SIGMA_X}, p.omega)
    for k in range(p.d):
        op.add_term({k: N_EXCITED}, p.delta)
    mult = 2.0 if p.ordered_pairs else 1.0
    for k in range(p.d):
        for h in range(k + 1, p.d):
            op.add_term({k: N_EXCITED, h: N_EXCITED}, mult * p.v / abs(k - h)**p.alpha)
    return op


def ising_operator(p: IsingParams) -> SumOfProductsOperator:
    """Schrödinger field ``F(Y) = -i H Y``."""
    return ising_hamiltonian(p).scaled(-1j)


def exact_evolve(p: IsingParams, psi0, t: float) -> np.ndarray:
    """``exp(-iHt) psi0`` by a Hermitian eigendecomposition of the dense Hamiltonian."""
    if p.d > 14:
        raise MemoryError("exact evolution limited to 14 particles")
    psi0 = np.asarray(psi0, dtype=complex)
    h = ising_hamiltonian(p).to_dense()
    w, v = eigh(h)
    vec = psi0.reshape(-1, order="F")
    out = v @ (np.exp(-1j * w * t) * (v.conj().T @ vec))
    return out.reshape(psi0.shape, order="F")


def _slot_positions(child_ranks, r):
    """`r` distinct index tuples, starting with the diagonal."""
    diag = [(j,) * len(child_ranks) for j in range(min(child_ranks))]
    rest = [t for t in product(*[range(c) for c in child_ranks]) if t not in diag]
    slots = (diag + rest)[:r]
    if len(slots) < r:
        raise ValueError("padding rank exceeds the product of child ranks")
    return slots


def product_state(tree: Tree, vectors, rank: int = 1, pad: float = 0.0, generic: bool = True,
                  seed: int = 0) -> TreeTensorNetwork:
    """
    Orthonormal TTN of the product state ``⊗ vectors[l]``, scaled to unit
    norm and padded to edge rank `rank` (capped by the dimensions below
    each edge).

    Extra directions complete the existing ones to orthonormal sets: at
    random (seeded) if `generic`, otherwise with unit vectors and unused
    index slots. The root gets a perturbation of relative size `pad` in
    its extra slots, so padded directions carry singular values of order
    `pad` (zero by default: the same tensor).

    Generic completions matter: with exactly aligned unit slots the
    reduction frames of the padded directions are degenerate and the
    parallel step cannot couple them.
    """
    rng = np.random.default_rng(seed)
    caps = {}
    for path, sub in postorder(tree):
        caps[path] = 1 if path == () else min(rank, int(np.prod(leaf_dims(sub), dtype=int)))
    tensors = {}
    for path, sub in postorder(tree):
        if isinstance(sub, Leaf):
            v = np.asarray(vectors[sub.id], dtype=complex).reshape(-1, 1)
            v = v / np.linalg.norm(v)
            extra = crandn((sub.dim, sub.dim), rng) if generic else np.identity(sub.dim, dtype=complex)
            # columns after the first are orthogonal to v
            q, _ = np.linalg.qr(np.hstack([v, extra]))
            q[:, 0] = v[:, 0]
            tensors[path] = q[:, :caps[path]]
            continue
        kids = [caps[path + (i,)] for i in range(len(sub.children))]
        c = np.zeros((caps[path],) + tuple(kids), dtype=complex)
        if path == ():
            c[(0,) * c.ndim] = 1.0
            if pad:
                z = crandn(c.shape, rng) if generic else np.zeros(c.shape, dtype=complex)
                if not generic:
                    for slot in _slot_positions(kids, min(kids)):
                        z[(0,) + slot] = 1.0
                z[(0,) * c.ndim] = 0.0
                c = c + pad * z / max(np.linalg.norm(z), 1e-300)
        elif generic:
            m = np.zeros((int(np.prod(kids)), caps[path]), dtype=complex)
            m[0, 0] = 1.0
            m[:, 1:] = crandn((m.shape[0], caps[path] - 1), rng)
            q, _ = np.linalg.qr(m)
            q[:, 0] = m[:, 0]
            c = tensorize(q.T, 0, c.shape)
        else:
            for j, slot in enumerate(_slot_positions(kids, caps[path])):
                c[(j,) + slot] = 1.0
        tensors[path] = c
    return TreeTensorNetwork(tree, tensors)


def all_up_state(tree: Tree, rank: int = 2, pad: float = 0.0, generic: bool = True,
                 seed: int = 0) -> TreeTensorNetwork:
    """All spins in ``e_1``, padded to edge rank `rank`."""
    e1 = np.array([1.0, 0.0])
    return product_state(tree, {l: e1 for l in leaf_ids(tree)}, rank, pad, generic, seed)


def ising_tree(d: int) -> Tree:
    return balanced_binary_tree([2] * d)


# --- sudden rank growth -----------------------------------------------------

def pair_flip_operator(d: int = 4, gamma: float = 1.0, eps: float = 0.01,
                       pair=(0, 1)) -> SumOfProductsOperator:
    """
    ``-i (gamma * X_a X_b + eps * sum_l X_l)`` on `d` qubits.

    Started from a product of ``e_1`` states, the pair term flips both
    spins at once. That direction is new in two modes simultaneously, so
    a step from rank 1 cannot see it and only the weak single-site terms
    enlarge the bases. Useful for exercising step rejection.
    """
    op = SumOfProductsOperator((2,) * d)
    op.add_term({pair[0]: SIGMA_X, pair[1]: SIGMA_X}, -1j * gamma)
    for l in range(d):
        op.add_term({l: SIGMA_X}, -1j * eps)
    return op


# --- planesource ------------------------------------------------------------

@dataclass(frozen=True)
class PlanesourceParams:
    n_x: int = 50
    n_mu: int = 20
    n_xi: int = 10
    n_eta: int = 10
    sigma_0: float = 5.0
    sigma_xi: float = 4.0
    sigma_eta: float = 1.0
    delta: float = 0.03**2
    x_extent: float = 3.0
    cfl: float = 0.1
    floor: float = 1e-4
    periodic: bool = False

    def __post_init__(self):
        for name in ("n_x", "n_mu", "n_xi", "n_eta"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be at least 2")
        if self.delta <= 0:
            raise ValueError("delta must be positive")

    @property
    def dx(self) -> float:
        return 2 * self.x_extent / self.n_x

    @property
    def h(self) -> float:
        return self.cfl * self.dx

    @property
    def x(self) -> np.ndarray:
        return -self.x_extent + self.dx * (np.arange(self.n_x) + 0.5)

    @property
    def dims(self):
        return (self.n_x, self.n_mu, self.n_xi, self.n_eta)


def pn_flux_matrix(n: int) -> np.ndarray:
    """
    ``μ`` in the orthonormal Legendre basis: tridiagonal with
    ``A[l, l+1] = (l+1) / sqrt((2l+1)(2l+3))``.
    """
    l = np.arange(n - 1)
    off = (l + 1) / np.sqrt((2 * l + 1) * (2 * l + 3))
    return np.diag(off, 1) + np.diag(off, -1)


def flux_splitting(a):
    """``A = A+ + A-`` with ``A±`` the positive and negative spectral parts."""
    w, v = np.linalg.eigh(a)
    return (v * np.maximum(w, 0)) @ v.T, (v * np.minimum(w, 0)) @ v.T


def difference_matrices(n: int, dx: float, periodic: bool = False):
    """
    Backward and forward differences ``(D-, D+)``; at the ends the ghost
    cell copies the boundary cell, or wraps around if `periodic`.
    """
    e = np.identity(n)
    back = np.roll(e, -1, axis=1) if periodic else np.vstack([e[:1], e[:-1]])
    fwd = np.roll(e, 1, axis=1) if periodic else np.vstack([e[1:], e[-1:]])
    return (e - back) / dx, (fwd - e) / dx


def gauss_legendre(n: int):
    """Nodes and probability weights for a uniform variable on [-1, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return x, w / 2


def planesource_operator(p: PlanesourceParams) -> SumOfProductsOperator:
    """
    Upwind P_N transport plus isotropic scattering with
    ``σ_s(ξ, η) = σ_0 + ξ σ_ξ + η σ_η``. Leaves: 0 space, 1 moments,
    2 ξ nodes, 3 η nodes.
    """
    dm, dp = difference_matrices(p.n_x, p.dx, p.periodic)
    ap, am = flux_splitting(pn_flux_matrix(p.n_mu))
    g = np.zeros((p.n_mu, p.n_mu))
    g[0, 0] = 1.0
    g -= np.identity(p.n_mu)
    xi, _ = gauss_legendre(p.n_xi)
    eta, _ = gauss_legendre(p.n_eta)
    op = SumOfProductsOperator(p.dims)
    op.add_term({0: dm, 1: ap}, -1.0)
    op.add_term({0: dp, 1: am}, -1.0)
    op.add_term({1: g}, p.sigma_0)
    op.add_term({1: g, 2: np.diag(xi)}, p.sigma_xi)
    op.add_term({1: g, 3: np.diag(eta)}, p.sigma_eta)
    return op


def planesource_tree(p: PlanesourceParams) -> Tree:
    return tree_from_nested([[0, 1], [2, 3]], p.dims)


def initial_profile(p: PlanesourceParams) -> np.ndarray:
    """Gaussian density with a floor, sampled at cell centres."""
    g = np.exp(-p.x**2 / (2 * p.delta)) / np.sqrt(2 * np.pi * p.delta)
    return np.maximum(p.floor, g)


def planesource_initial(p: PlanesourceParams, rank: int = 1, pad: float = 0.0,
                        generic: bool = True, seed: int = 0) -> TreeTensorNetwork:
    """
    Isotropic initial data: only the zeroth moment ``u_0 = sqrt(2) f`` is
    nonzero, constant in ξ and η. Returned orthonormal, with the norm in
    the root.
    """
    f = initial_profile(p)
    vecs = {0: f, 1: np.eye(p.n_mu)[0], 2: np.ones(p.n_xi), 3: np.ones(p.n_eta)}
    x = product_state(planesource_tree(p), vecs, rank, pad, generic, seed)
    scale = np.sqrt(2) * np.linalg.norm(f) * np.sqrt(p.n_xi * p.n_eta)
    x.tensors[()] = x.tensors[()] * scale
    return x


def scalar_flux(y: TreeTensorNetwork, p: PlanesourceParams) -> np.ndarray:
    """``ρ(x, ξ, η) = sqrt(2) u_0`` on the collocation grid."""
    tensors = dict(y.tensors)
    path = next(q for q, s in postorder(y.tree) if isinstance(s, Leaf) and s.id == 1)
    tensors[path] = tensors[path][:1]
    tree = _replace_dim(y.tree, 1, 1)
    rho = contract_full(TreeTensorNetwork(tree, tensors))[:, 0]
    return np.sqrt(2) * rho


def _replace_dim(tree, lid, n):
    if isinstance(tree, Leaf):
        return Leaf(tree.id, n) if tree.id == lid else tree
    from .ttn import Node
    return Node(tuple(_replace_dim(c, lid, n) for c in tree.children))


def flux_stats_from_grid(rho, p: PlanesourceParams):
    """Mean and variance over (ξ, η) of a scalar flux array of shape ``(n_x, n_xi, n_eta)``."""
    _, wx = gauss_legendre(p.n_xi)
    _, we = gauss_legendre(p.n_eta)
    w = np.outer(wx, we)
    mean = np.einsum("xab,ab->x", rho, w)
    second = np.einsum("xab,ab->x", np.abs(rho)**2, w)
    return mean.real, np.maximum(second - np.abs(mean)**2, 0.0)


def scalar_flux_stats(y: TreeTensorNetwork, p: PlanesourceParams):
    """Expected value and variance of the scalar flux per cell (tensorized Gauss-Legendre)."""
    if y.dims != p.dims:
        raise ValueError(f"network dims {y.dims} do not match planesource layout {p.dims}")
    return flux_stats_from_grid(scalar_flux(y, p), p)


def collocation_reference(p: PlanesourceParams, t_end: float, n_xi: Optional[int] = None,
                          n_eta: Optional[int] = None):
    """
    Reference flux statistics: the deterministic (x, moment) system is
    solved exactly with ``expm_multiply`` at every collocation node pair.
    Returns ``(mean, variance, rho)`` with ``rho`` of shape ``(n_x, n_xi, n_eta)``.
    """
    q = PlanesourceParams(**{**p.__dict__, "n_xi": n_xi or p.n_xi, "n_eta": n_eta or p.n_eta})
    dm, dp = difference_matrices(q.n_x, q.dx, q.periodic)
    ap, am = flux_splitting(pn_flux_matrix(q.n_mu))
    g = np.zeros((q.n_mu, q.n_mu))
    g[0, 0] = 1.0
    g -= np.identity(q.n_mu)
    transport = -(kron(csr_matrix(ap), csr_matrix(dm)) + kron(csr_matrix(am), csr_matrix(dp)))
    scatter = kron(csr_matrix(g), identity(q.n_x))
    u0 = np.zeros((q.n_x, q.n_mu))
    u0[:, 0] = np.sqrt(2) * initial_profile(q)
    u0 = u0.reshape(-1, order="F")
    xi, _ = gauss_legendre(q.n_xi)
    eta, _ = gauss_legendre(q.n_eta)
    rho = np.zeros((q.n_x, q.n_xi, q.n_eta))
    for a, b in product(range(q.n_xi), range(q.n_eta)):
        sigma = q.sigma_0 + xi[a] * q.sigma_xi + eta[b] * q.sigma_eta
        u = expm_multiply(((transport + sigma * scatter) * t_end).tocsr(), u0)
        rho[:, a, b] = np.sqrt(2) * u[:q.n_x]
    mean, var = flux_stats_from_grid(rho, q)
    return mean, var, rho


def mass(rho_mean, p: PlanesourceParams) -> float:
    return float(np.sum(rho_mean) * p.dx)
