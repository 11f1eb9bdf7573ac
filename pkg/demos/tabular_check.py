"""Tabular sanity check: both sub-GANs of the decoupled model should recover
the data tables exactly when every density is a free parameter.

    python demos/tabular_check.py [problems]
"""
import sys

import numpy as np

from sganlab.objectives import gan_value_at_optimum, jsd, optimal_discriminator
from sganlab.tabular import TabularGANProblem, train_tabular

n = int(sys.argv[1]) if len(sys.argv) > 1 else 5
print(f"{'seed':>4} {'tv_y':>9} {'tv_x':>9} {'value_y':>9} {'value_x':>9}  converged")
for seed in range(n):
    res = train_tabular(TabularGANProblem.random(4, 4, seed=seed))
    print(f"{seed:>4} {res.tv_y:9.2e} {res.tv_x:9.2e} {res.value_y:9.4f} {res.value_x:9.4f}  {res.converged}")
print(f"target value -2 log 2 = {-2 * np.log(2):.4f}")

# at the optimal discriminator the value is the JSD shifted by -log 4
p, q = np.array([0.5, 0.3, 0.2, 0.0]), np.array([0.1, 0.1, 0.4, 0.4])
print("D* =", np.round(optimal_discriminator(p, q), 4))
print(f"value {gan_value_at_optimum(p, q):.6f} = 2*jsd - log 4 = {2 * jsd(p, q) - np.log(4):.6f}")
