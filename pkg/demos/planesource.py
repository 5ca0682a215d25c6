"""
Planesource radiative transfer with uncertain scattering: expected scalar
flux and its variance from the parallel integrator, next to the
collocation reference.
"""
import numpy as np

from ttnbug import models
from ttnbug.ttn_integrator import StepConfig, integrate

p = models.PlanesourceParams()          # 50 cells, 20 moments, 10 x 10 nodes
t_end = 2.0

#%% reference: one deterministic solve per (xi, eta) node
ref_mean, ref_var, _ = models.collocation_reference(p, t_end)

#%% low-rank run
y0 = models.planesource_initial(p, rank=2, pad=1e-12)
trace = []
y, reps = integrate(y0, models.planesource_operator(p), 0, t_end, StepConfig(1e-4, h=p.h),
                    callback=lambda t, y, rep: trace.append((round(float(t), 2), rep.new_ranks[(0,)], rep.new_ranks[(1,)])))
mean, var = models.scalar_flux_stats(y, p)

print(f"relative L2 error of E[rho]: {np.linalg.norm(mean - ref_mean) / np.linalg.norm(ref_mean):.4f}")
print(f"mass: low rank {models.mass(mean, p):.5f}, reference {models.mass(ref_mean, p):.5f}")
print("ranks (space-moment, uncertainty) every 50 steps:", trace[::50])
print(f"{'x':>7} {'E[rho]':>9} {'ref':>9} {'Var':>9} {'ref':>9}")
for i in range(0, p.n_x, 5):
    print(f"{p.x[i]:7.2f} {mean[i]:9.4f} {ref_mean[i]:9.4f} {var[i]:9.2e} {ref_var[i]:9.2e}")
