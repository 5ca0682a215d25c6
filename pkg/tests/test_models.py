import numpy as np
import pytest
from scipy.linalg import expm, sqrtm
from scipy.special import eval_legendre, roots_legendre

from ttnbug import models
from ttnbug.ttn import contract_full, gram_orthonormality_check, leaf_ids
from ttnbug.ttn_integrator import StepConfig, integrate

X = np.array([[0, 1], [1, 0]])
N = np.diag([1.0, 0.0])
I2 = np.identity(2)


def test_ising_two_sites_kronecker():
    p = models.IsingParams(2, omega=0.7, delta=1.3, v=0.4, alpha=1.0)
    h = models.ising_hamiltonian(p)
    assert h.nterms == 5
    expect = (0.7 * (np.kron(X, I2) + np.kron(I2, X)) + 1.3 * (np.kron(N, I2) + np.kron(I2, N))
              + 0.4 * np.kron(N, N))
    assert np.allclose(h.to_dense(), expect)


@pytest.mark.parametrize("ordered", [False, True])
def test_ising_matches_bitwise_construction(ordered):
    d, om, de, v, al = 4, 0.3, 0.8, 1.1, 1.5
    p = models.IsingParams(d, om, de, v, al, ordered_pairs=ordered)
    mult = 2.0 if ordered else 1.0
    dim = 2 ** d
    h = np.zeros((dim, dim))
    # basis index: bit k (least significant first) is 0 for the excited state e_1
    for s in range(dim):
        occ = [((s >> k) & 1) == 0 for k in range(d)]
        h[s, s] += de * sum(occ)
        for k in range(d):
            for j in range(k + 1, d):
                if occ[k] and occ[j]:
                    h[s, s] += mult * v / (j - k) ** al
            h[s ^ (1 << k), s] += om
    assert np.allclose(models.ising_hamiltonian(p).to_dense(), h)


def test_exact_evolve_matches_expm(rng):
    p = models.IsingParams(3)
    psi = rng.normal(size=(2, 2, 2)) + 0j
    ref = expm(-1j * models.ising_hamiltonian(p).to_dense() * 0.7) @ psi.reshape(-1, order="F")
    assert np.allclose(models.exact_evolve(p, psi, 0.7).reshape(-1, order="F"), ref)
    with pytest.raises(MemoryError):
        models.exact_evolve(models.IsingParams(15), None, 1.0)


def test_ising_params_validation():
    with pytest.raises(ValueError):
        models.IsingParams(1)


@pytest.mark.parametrize("pad", [0.0, 1e-8])
def test_all_up_state(pad):
    tree = models.ising_tree(5)
    y = models.all_up_state(tree, rank=2, pad=pad)
    assert max(gram_orthonormality_check(y).values()) < 1e-12
    psi = np.zeros((2,) * 5, dtype=complex)
    psi[(0,) * 5] = 1.0
    assert abs(np.linalg.norm(contract_full(y) - psi) - pad) < 1e-12
    assert all(r == 2 for p, r in y.ranks().items() if p != ())


def test_product_state_exact_slots():
    y = models.all_up_state(models.ising_tree(4), rank=2, generic=False)
    psi = np.zeros((2,) * 4)
    psi[(0,) * 4] = 1
    assert np.allclose(contract_full(y), psi)


def test_pair_flip_operator():
    op = models.pair_flip_operator(3, gamma=2.0, eps=0.5, pair=(0, 2))
    # first mode fastest: the dense factor order is (mode 2, mode 1, mode 0)
    site = lambda k: np.kron(np.kron(X if k == 2 else I2, X if k == 1 else I2), X if k == 0 else I2)
    h = 2.0 * np.kron(X, np.kron(I2, X)) + 0.5 * sum(site(k) for k in range(3))
    assert np.allclose(op.to_dense(), -1j * h)


# --- planesource --------------------------------------------------------------

def test_flux_matrix_from_quadrature():
    n = 6
    mu, w = roots_legendre(20)
    p = np.array([np.sqrt((2 * l + 1) / 2) * eval_legendre(l, mu) for l in range(n)])
    a = (p * mu * w) @ p.T
    assert np.allclose(models.pn_flux_matrix(n), a)
    # eigenvalues are the Gauss nodes of order n
    assert np.allclose(np.sort(np.linalg.eigvalsh(a)), np.sort(roots_legendre(n)[0]))


def test_flux_splitting_parts():
    a = models.pn_flux_matrix(5)
    ap, am = models.flux_splitting(a)
    absa = np.real(sqrtm(a @ a))
    assert np.allclose(ap, (a + absa) / 2) and np.allclose(am, (a - absa) / 2)
    assert np.all(np.linalg.eigvalsh(ap) > -1e-12) and np.all(np.linalg.eigvalsh(am) < 1e-12)


def loop_operator(p):
    """Semi-discrete planesource right-hand side built entry by entry."""
    a = models.pn_flux_matrix(p.n_mu)
    absa = np.real(sqrtm(a @ a))
    ap, am = (a + absa) / 2, (a - absa) / 2
    xi, _ = roots_legendre(p.n_xi)
    et, _ = roots_legendre(p.n_eta)
    dims = p.dims
    idx = lambda i, l, s, t: i + dims[0] * (l + dims[1] * (s + dims[2] * t))
    n = int(np.prod(dims))
    m = np.zeros((n, n))
    for s in range(p.n_xi):
        for t in range(p.n_eta):
            sig = p.sigma_0 + xi[s] * p.sigma_xi + et[t] * p.sigma_eta
            for i in range(p.n_x):
                left = (i - 1) % p.n_x if p.periodic else max(i - 1, 0)
                right = (i + 1) % p.n_x if p.periodic else min(i + 1, p.n_x - 1)
                for l in range(p.n_mu):
                    row = idx(i, l, s, t)
                    for k in range(p.n_mu):
                        m[row, idx(i, k, s, t)] -= ap[l, k] / p.dx
                        m[row, idx(left, k, s, t)] += ap[l, k] / p.dx
                        m[row, idx(right, k, s, t)] -= am[l, k] / p.dx
                        m[row, idx(i, k, s, t)] += am[l, k] / p.dx
                    if l > 0:
                        m[row, row] -= sig
    return m


@pytest.mark.parametrize("periodic", [False, True])
def test_planesource_operator_matches_loops(periodic):
    p = models.PlanesourceParams(n_x=5, n_mu=3, n_xi=2, n_eta=3, periodic=periodic)
    assert np.allclose(models.planesource_operator(p).to_dense(), loop_operator(p))


def test_periodic_mass_conservation(rng):
    p = models.PlanesourceParams(n_x=8, n_mu=4, n_xi=2, n_eta=2, periodic=True)
    op = models.planesource_operator(p)
    z = op.apply(rng.normal(size=p.dims) + 0j)
    assert np.abs(z[:, 0].sum(axis=0)).max() < 1e-12
    # and along a low-rank trajectory
    y0 = models.planesource_initial(p, rank=2, pad=1e-12)
    y, _ = integrate(y0, op, 0, 0.5, StepConfig(1e-10, h=p.h * 2, mode="rank_adaptive"))
    m0 = models.mass(models.scalar_flux_stats(y0, p)[0], p)
    m1 = models.mass(models.scalar_flux_stats(y, p)[0], p)
    assert abs(m1 - m0) < 1e-8 * m0


def test_initial_scalar_flux_and_stats():
    p = models.PlanesourceParams(n_x=10, n_mu=3, n_xi=2, n_eta=2)
    y0 = models.planesource_initial(p)
    rho = models.scalar_flux(y0, p)
    f = models.initial_profile(p)
    assert np.allclose(rho, 2 * f[:, None, None] * np.ones((1, 2, 2)))
    mean, var = models.scalar_flux_stats(y0, p)
    assert np.allclose(mean, 2 * f) and np.all(var < 1e-20)
    _, w = models.gauss_legendre(4)
    assert np.isclose(w.sum(), 1.0)
    assert leaf_ids(models.planesource_tree(p)) == [0, 1, 2, 3]


def test_deterministic_scattering_has_zero_variance():
    p = models.PlanesourceParams(n_x=20, n_mu=6, n_xi=3, n_eta=3, sigma_xi=0.0, sigma_eta=0.0)
    _, var, _ = models.collocation_reference(p, 0.5)
    assert var.max() <= 1e-10
    y, _ = integrate(models.planesource_initial(p, rank=2, pad=1e-12), models.planesource_operator(p),
                     0, 0.5, StepConfig(1e-6, h=p.h))
    assert models.scalar_flux_stats(y, p)[1].max() <= 1e-10


def test_reference_insensitive_to_domain_doubling():
    small = models.PlanesourceParams(n_x=30, n_mu=6, n_xi=2, n_eta=2)
    big = models.PlanesourceParams(n_x=60, n_mu=6, n_xi=2, n_eta=2, x_extent=6.0)
    a, _, _ = models.collocation_reference(small, 1.0)
    b, _, _ = models.collocation_reference(big, 1.0)
    inner = np.abs(small.x) < 1.5
    assert np.allclose(a[inner], b[15:45][inner], rtol=1e-6, atol=1e-8)


def test_reference_mass_decreases_only_through_boundary():
    p = models.PlanesourceParams(n_x=30, n_mu=6, n_xi=2, n_eta=2)
    m0 = 2 * models.initial_profile(p).sum() * p.dx
    mean, _, _ = models.collocation_reference(p, 1.0)
    assert abs(models.mass(mean, p) - m0) < 1e-3 * m0


def test_params_validation():
    with pytest.raises(ValueError):
        models.PlanesourceParams(n_x=1)
    with pytest.raises(ValueError):
        models.PlanesourceParams(delta=0)
    p = models.PlanesourceParams()
    assert np.isclose(p.h, 0.1 * p.dx) and p.x.shape == (50,)
