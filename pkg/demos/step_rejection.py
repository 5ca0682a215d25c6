"""
Sudden rank growth: a pair interaction that flips two spins at once is
invisible to a step started at rank 1, because the new direction is new
in two modes. The eta estimate flags it and the step is redone in the
enlarged bases.
"""
import numpy as np
from scipy.linalg import expm

from ttnbug import models
from ttnbug.ttn import balanced_binary_tree, contract_full
from ttnbug.ttn_integrator import StepConfig, integrate

tree = balanced_binary_tree([2] * 4)
y0 = models.product_state(tree, [np.array([1.0, 0.0])] * 4)
op = models.pair_flip_operator(4, gamma=1.0, eps=0.01)
t_end, h = 0.5, 0.05
ref = (expm(op.to_dense() * t_end) @ contract_full(y0).reshape(-1, order="F")).reshape((2,) * 4, order="F")

for reject in (False, True):
    y, reps = integrate(y0, op, 0, t_end, StepConfig(1e-6, h=h, reject=reject))
    err = np.linalg.norm(contract_full(y) - ref)
    print(f"rejection {'on ' if reject else 'off'}: error {err:.2e}, final ranks {reps[-1].new_ranks}")
    if reject:
        print("  first step:", reps[0].reasons, "retries", reps[0].retries)
