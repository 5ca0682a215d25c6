"""
Long-range Ising chain on a binary tree: error against exact
diagonalization as the step size shrinks, for the parallel and the
rank-adaptive integrators, and the same sweep with padded initial data.
"""
import json
import sys
from pathlib import Path

from ttnbug import harness

cfg = json.loads((Path(__file__).parents[1] / "configs" / "ising_convergence.json").read_text())
out = sys.argv[1] if len(sys.argv) > 1 else None

#%% convergence
rows, slopes = harness.run_convergence({**cfg, "output": out})
print(f"{'integrator':>14} {'h':>8} {'error':>10}")
for row in rows:
    print(f"{row['integrator']:>14} {row['h']:8.4f} {row['error']:10.3e}")
for s in slopes:
    print(f"{s['integrator']}: log-log slope {s['slope']:.2f}")

#%% tiny singular values in the initial data do not hurt
_, summary = harness.run_robustness({**cfg, "mode": "parallel", "output": out})
for s in summary:
    print(f"pad {s['pad']:7.0e}: slope {s['slope']:.2f}, worst ratio to unpadded {s['max_ratio_to_unpadded']:.3f}")
