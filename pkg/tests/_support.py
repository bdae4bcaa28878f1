"""Shared instance generators for the solver tests and the acceptance script."""
import numpy as np

from potalign.ot_solvers import exact_pot_lp


def random_instance(rng, max_n=8, min_n=1):
    n, m = rng.integers(min_n, max_n + 1, size=2)
    C = rng.uniform(0.0, 1.0, size=(n, m))
    p = rng.uniform(0.1, 1.0, size=n)
    q = rng.uniform(0.1, 1.0, size=m)
    p /= p.sum()
    q /= q.sum() * rng.uniform(0.8, 1.25)
    s = rng.uniform(0.0, min(p.sum(), q.sum()))
    return C, p, q, s


def separated_instance(rng, max_n=5, margin=0.1, max_tries=10_000):
    """Random instance whose LP optimum is unique with reduced-cost margin >= ``margin``."""
    for _ in range(max_tries):
        C, p, q, s = random_instance(rng, max_n, min_n=2)
        lp = exact_pot_lp(C, p, q, s)
        if lp.info["min_reduced_cost"] >= margin and np.min(p) > 0.05 and np.min(q) > 0.05:
            return C, p, q, s, lp
    raise RuntimeError("no separated instance found")
