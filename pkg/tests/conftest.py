import numpy as np
import pytest

from ttnbug.operators import SumOfProductsOperator
from ttnbug.tensor_core import crandn

SEEDS = list(range(10))


def random_operator(dims, nterms, rng, max_support=2, hermitian=False, scale=1.0):
    """Random sum-of-products operator; Hermitian factors and real coefficients if asked."""
    op = SumOfProductsOperator(dims)
    for _ in range(nterms):
        k = int(rng.integers(1, min(max_support, len(dims)) + 1))
        modes = rng.choice(len(dims), size=k, replace=False)
        factors = {}
        for l in modes:
            m = crandn((dims[l], dims[l]), rng)
            factors[int(l)] = (m + m.conj().T) / 2 if hermitian else m
        op.add_term(factors, scale * (rng.normal() if hermitian else rng.normal() + 1j * rng.normal()))
    return op


def normalized_generator(dims, nterms, rng):
    """``-i H`` with H a random Hermitian sum of products scaled to unit spectral norm."""
    h = random_operator(dims, nterms, rng, hermitian=True)
    nrm = np.linalg.norm(h.to_dense(), 2)
    return h.scaled(-1j / nrm)


def dense_rk4(op, y0, t0, t1, substeps):
    from ttnbug.tensor_core import rk4_solve
    return rk4_solve(lambda t, y: op.apply(y), y0, t0, t1, substeps)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
