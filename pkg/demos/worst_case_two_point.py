"""
Worst-case reweighting of a two-point loss
==========================================

Two samples with losses 0 and 1, equal weights, and a chi-square ball
(k = 2) of radius 0.08. The adversary moves 0.2 of mass onto the bad sample.
"""

import numpy as np

from crdro import DivergenceSpec, dual_min, primal_worst_case

spec = DivergenceSpec.cressie_read(k=2.0, rho=0.08)
losses = np.array([0.0, 1.0])
p0 = np.array([0.5, 0.5])

worst = primal_worst_case(spec, losses, p0)
print("worst-case distribution:", worst.q)        # [0.3 0.7]
print("worst-case expected loss:", worst.value)   # 0.7

# the same number from the two-variable dual problem
value, z = dual_min(spec, losses, p0)
print(f"dual minimum {value:.8f} at lambda={z.lam:.4f}, eta={z.eta:.4f}")

# a larger ball lets the adversary put more weight on the bad sample
for rho in (0.02, 0.08, 0.32, 0.5):
    print(rho, primal_worst_case(spec.with_rho(rho), losses, p0).value)
