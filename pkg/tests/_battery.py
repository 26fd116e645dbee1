"""Random small instances shared by the oracle and acceptance tests."""

import numpy as np

from crdro.divergence import DivergenceSpec

CR_ORDERS = (2.0, 1.5, 1.25)
CVAR_LEVELS = (0.1, 0.3, 0.5)


def battery(count: int, seed: int = 2024, families=("cr", "cvar")):
    """Yield (spec, losses, p0, B) with N <= 8, losses in [0, B], rho in [0.01, 5]."""
    r = np.random.default_rng(seed)
    for i in range(count):
        fam = families[i % len(families)]
        rho = float(r.uniform(0.01, 5.0))
        if fam == "cr":
            spec = DivergenceSpec.cressie_read(CR_ORDERS[(i // len(families)) % 3], rho)
        else:
            spec = DivergenceSpec.smoothed_cvar(CVAR_LEVELS[(i // len(families)) % 3], rho)
        n = int(r.integers(2, 9))
        B = float(r.uniform(0.5, 5.0))
        losses = r.uniform(0.0, B, n)
        p0 = r.dirichlet(np.ones(n)) if i % 3 else np.full(n, 1.0 / n)
        yield spec, losses, p0, B
