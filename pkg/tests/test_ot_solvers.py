import numpy as np
import pytest
from scipy.optimize import linprog

from potalign import tensor_core as tc
from potalign.errors import ContractError, InfeasibleError
from potalign.ot_solvers import (SolverConfig, exact_pot_lp, partial_ot, partial_ot_dummy, plan_diagnostics,
                                 sinkhorn)

from _support import random_instance, separated_instance

SWAP = np.array([[0.0, 1.0], [1.0, 0.0]])
HALF = np.array([0.5, 0.5])


def test_sinkhorn_zero_cost_gives_product():
    P = sinkhorn(np.zeros((2, 2)), HALF, HALF, SolverConfig(epsilon=0.3)).plan
    np.testing.assert_allclose(P, 0.25, atol=1e-12)


def test_sinkhorn_single_cell():
    np.testing.assert_allclose(sinkhorn(np.zeros((1, 1)), [1.0], [1.0]).plan, [[1.0]])


def test_sinkhorn_small_eps_matches_lp():
    P = sinkhorn(SWAP, HALF, HALF, SolverConfig(epsilon=1e-3)).plan
    np.testing.assert_allclose(np.diag(P), 0.5, atol=1e-3)
    assert P[0, 1] < 1e-3 and P[1, 0] < 1e-3


def test_sinkhorn_rejects_unequal_sums():
    with pytest.raises(ContractError):
        sinkhorn(SWAP, HALF, [0.5, 0.6])


def test_sinkhorn_flags_nonconvergence():
    rng = np.random.default_rng(0)
    C, p = rng.uniform(size=(4, 4)), rng.dirichlet(np.ones(4))
    plan = sinkhorn(C, p, p[::-1], SolverConfig(epsilon=1e-2, max_iterations=1))
    assert not plan.converged and plan.iterations_used == 1


def test_partial_half_mass_toy():
    P = partial_ot(SWAP, HALF, HALF, SolverConfig(epsilon=1e-3, mass=0.5)).plan
    np.testing.assert_allclose(P, np.diag([0.25, 0.25]), atol=1e-3)


def test_partial_zero_mass():
    plan = partial_ot(SWAP, HALF, HALF, SolverConfig(mass=0.0))
    assert plan.converged and not plan.plan.any()
    d = plan_diagnostics(plan, HALF, HALF, 0.0)
    assert d["mass_error"] == 0.0 and d["entropy"] == 0.0


def test_partial_mass_out_of_range():
    with pytest.raises(InfeasibleError):
        partial_ot(SWAP, HALF, HALF, SolverConfig(mass=1.5))
    with pytest.raises(ContractError):
        partial_ot(SWAP, HALF, HALF, SolverConfig(mass=-0.1))


def test_exact_examples():
    lp = exact_pot_lp(SWAP, HALF, HALF, 1.0)
    np.testing.assert_allclose(lp.plan, np.diag([0.5, 0.5]), atol=1e-12)
    assert lp.info["objective"] == pytest.approx(0.0, abs=1e-12)
    zero = exact_pot_lp(SWAP, HALF, HALF, 0.0)
    assert not zero.plan.any() and zero.info["objective"] == 0.0
    one = exact_pot_lp(np.ones((1, 1)), [1.0], [1.0], 1.0)
    np.testing.assert_allclose(one.plan, [[1.0]])
    assert one.info["objective"] == pytest.approx(1.0)


def test_exact_limits():
    with pytest.raises(ContractError):
        exact_pot_lp(np.zeros((7, 2)), np.ones(7), np.ones(2), 1.0)
    with pytest.raises(InfeasibleError):
        exact_pot_lp(SWAP, HALF, HALF, 2.0)


def test_exact_deterministic():
    rng = np.random.default_rng(0)
    C, p, q, s = random_instance(rng, 5)
    a, b = exact_pot_lp(C, p, q, s), exact_pot_lp(C, p, q, s)
    np.testing.assert_array_equal(a.plan, b.plan)


@pytest.mark.parametrize("seed", range(40))
def test_exact_lp_matches_scipy(seed):
    rng = np.random.default_rng(1000 + seed)
    C, p, q, s = random_instance(rng, 6)
    n, m = C.shape
    A_ub = np.vstack([np.kron(np.eye(n), np.ones(m)), np.kron(np.ones(n), np.eye(m))])
    ref = linprog(C.ravel(), A_ub=A_ub, b_ub=np.concatenate([p, q]), A_eq=np.ones((1, n * m)),
                  b_eq=[s], bounds=(0, None), method="highs")
    lp = exact_pot_lp(C, p, q, s)
    assert lp.info["objective"] == pytest.approx(ref.fun, abs=1e-10)
    d = plan_diagnostics(lp, p, q, s)
    assert d["row_violation"] < 1e-12 and d["col_violation"] < 1e-12 and d["mass_error"] < 1e-12


def test_lp_objective_monotone_in_mass():
    rng = np.random.default_rng(4)
    for _ in range(20):
        C, p, q, _ = random_instance(rng, 5)
        cap = min(p.sum(), q.sum())
        objs = [exact_pot_lp(C, p, q, s).info["objective"] for s in np.linspace(0, cap, 7)]
        assert np.all(np.diff(objs) >= -1e-12)


def test_feasibility_fuzz():
    rng = np.random.default_rng(2024)
    checked = 0
    for _ in range(500):
        C, p, q, s = random_instance(rng)
        eps = float(rng.choice([0.5, 0.1, 0.05, 0.01]))
        plan = partial_ot(C, p, q, SolverConfig(epsilon=eps, mass=s))
        if not plan.converged:
            continue
        d = plan_diagnostics(plan, p, q, s)
        assert d["row_violation"] <= 1e-9 and d["col_violation"] <= 1e-9 and d["mass_error"] <= 1e-9
        checked += 1
    assert checked >= 450


def test_entries_strictly_positive():
    rng = np.random.default_rng(9)
    C, p, q, s = random_instance(rng, 6, min_n=3)
    assert np.all(partial_ot(C, p, q, SolverConfig(epsilon=0.02, mass=s)).plan > 0)


def test_full_mass_reduces_to_sinkhorn():
    rng = np.random.default_rng(11)
    for _ in range(30):
        n, m = rng.integers(1, 7, size=2)
        C = rng.uniform(size=(n, m))
        p, q = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(m))
        cfg = SolverConfig(epsilon=0.1, mass=1.0)
        np.testing.assert_allclose(partial_ot(C, p, q, cfg).plan, sinkhorn(C, p, q, cfg).plan, atol=1e-6)


def test_annealing_approaches_lp():
    rng = np.random.default_rng(21)
    for _ in range(5):
        C, p, q, s, lp = separated_instance(rng)
        costs = [partial_ot(C, p, q, SolverConfig(epsilon=e, mass=s)).cost(C) for e in (0.5, 0.1, 0.02, 0.004)]
        assert np.all(np.diff(costs) <= 1e-12)
        assert costs[-1] - lp.info["objective"] < 1e-2


def test_dummy_route_agrees_on_separated_instances():
    rng = np.random.default_rng(33)
    C, p, q, s, _ = separated_instance(rng)
    cfg = SolverConfig(epsilon=0.004, mass=s)
    np.testing.assert_allclose(partial_ot(C, p, q, cfg).plan, partial_ot_dummy(C, p, q, cfg).plan, atol=1e-6)


def test_product_coupling_entropy():
    d = plan_diagnostics(np.full((2, 2), 0.25), HALF, HALF, 1.0)
    assert d["entropy"] == pytest.approx(np.log(4.0), abs=1e-12)


@pytest.mark.parametrize("partial", [True, False])
def test_unrolled_gradient_matches_fd(partial):
    rng = np.random.default_rng(3)
    C0 = rng.uniform(size=(3, 4))
    p, q = np.full(3, 1 / 3), np.full(4, 1 / 4)
    W = rng.normal(size=(3, 4))
    cfg = SolverConfig(epsilon=0.2, mass=0.7, tolerance=1e-13, backward_cap=5000)
    solve = partial_ot if partial else sinkhorn

    def f(P):
        return tc.sum(tc.mul(solve(P["C"], p, q, cfg).value, W))

    assert tc.finite_diff_check(f, {"C": C0}, step=1e-6) < 1e-6


def test_constant_plan_flag_blocks_gradient():
    tape = tc.Tape()
    C = tape.param("C", np.random.default_rng(0).uniform(size=(2, 2)))
    plan = partial_ot(C, HALF, HALF, SolverConfig(differentiate=False))
    g = tape.backward(tc.sum(tc.add(tc.mul(plan.value, 1.0), tc.scale(tc.sum(C), 0.0))))
    np.testing.assert_array_equal(g["C"], 0.0)


def test_no_early_stop_with_active_slack_rows():
    # feasible plan with stale corrections: the stop rule must not accept it
    C = np.array([[0.82425, 0.25584], [0.38414, 0.05021], [0.743, 0.5634]])
    p = np.array([0.31274925, 0.28047875, 0.406772])
    q = np.array([0.62860632, 0.53119641])
    s = 0.6998774180352199
    lp = exact_pot_lp(C, p, q, s)
    plan = partial_ot(C, p, q, SolverConfig(epsilon=0.004, mass=s))
    assert plan.converged
    np.testing.assert_allclose(plan.plan, lp.plan, atol=1e-6)
