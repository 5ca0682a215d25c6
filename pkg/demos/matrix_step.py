"""
One parallel BUG step for a low-rank matrix ODE, taken apart.

The K-, L- and S-steps read only the old factors. Their results are glued
into an augmented coefficient matrix with an exactly zero new/new block,
then truncated.
"""
import numpy as np
from scipy.linalg import expm

from ttnbug import lowrank_matrix as lm
from ttnbug.operators import SumOfProductsOperator
from ttnbug.tensor_core import crandn, orthonormal_basis_union, random_orthonormal

rng = np.random.default_rng(7)

#%% problem: Y' = A Y + Y B^T + c P Y Q^T
m, n, r = 40, 30, 3
a = crandn((m, m), rng) / np.sqrt(m)
b = crandn((n, n), rng) / np.sqrt(n)
op = SumOfProductsOperator((m, n), [{0: a}, {1: b}, {0: crandn((m, m), rng) / m, 1: crandn((n, n), rng) / n}])
f = lm.OperatorMatrixField(op)
y0 = lm.LowRankMatrix(random_orthonormal(m, r, rng), np.diag([1.0, 0.1, 0.01]).astype(complex),
                      random_orthonormal(n, r, rng))
h = 0.05

#%% the three independent subflows
k1 = lm.k_step(y0, f, 0, h)
l1 = lm.l_step(y0, f, 0, h)
s1 = lm.s_step(y0, f, 0, h)
u_hat = orthonormal_basis_union(y0.U, k1)
v_hat = orthonormal_basis_union(y0.V, l1)
s_k, s_l = lm.coupling_blocks(y0, f, u_hat, v_hat, h)
s_hat = lm.assemble_augmented_S(s1, s_k, s_l)
print("augmented sizes:", u_hat.shape[1], v_hat.shape[1])
print("new/new block is zero:", not np.any(s_hat[r:, r:]))

#%% compare against the exact flow
rep = lm.parallel_step(y0, f, 0, h, tolerance=1e-10)
exact = (expm(h * op.to_dense()) @ y0.full().reshape(-1, order="F")).reshape(m, n, order="F")
print(f"rank {r} -> {rep.truncated_rank}, eta = {rep.eta:.2e}")
print(f"one-step error: {np.linalg.norm(rep.new_state.full() - exact):.2e}")
