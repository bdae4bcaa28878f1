import numpy as np
import pytest

from potalign import tensor_core as tc
from potalign.errors import ContractError, DomainError
from potalign.ground_metrics import GroundMetric
from potalign.losses import (LossBreakdown, contrastive_loss, identity_plan, kl_divergence, mpot_loss,
                             reconstruction_loss, total_loss)
from potalign.ot_solvers import SolverConfig, exact_pot_lp, partial_ot


def test_identity_plan():
    np.testing.assert_array_equal(identity_plan(3), np.diag([1 / 3] * 3))
    np.testing.assert_array_equal(identity_plan(2), np.diag([0.5, 0.5]))
    with pytest.raises(ContractError):
        identity_plan(1)


def test_kl_examples():
    ph = identity_plan(2)
    assert kl_divergence(ph, ph) == pytest.approx(0.0, abs=1e-15)
    assert kl_divergence(ph, np.full((2, 2), 0.25)) == pytest.approx(np.log(2), abs=1e-12)
    assert kl_divergence(ph, np.array([[0.4, 0.1], [0.1, 0.4]])) == pytest.approx(np.log(1.25), abs=1e-12)


def test_kl_rejects_zero_diagonal():
    with pytest.raises(DomainError):
        kl_divergence(identity_plan(2), np.array([[0.0, 0.5], [0.5, 0.0]]))


def test_kl_nonnegative_on_subprobability_plans():
    rng = np.random.default_rng(0)
    for b in (2, 3, 5):
        for _ in range(20):
            pi = rng.uniform(size=(b, b))
            pi *= rng.uniform(0.2, 1.0) / pi.sum()
            assert kl_divergence(identity_plan(b), pi) >= 0.0


def _pairs(b, d=4, spread=10.0, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(b, d)) * spread


def test_identical_inputs_give_equal_terms():
    x = _pairs(3)
    _, kvs, kvt, _, _ = mpot_loss(x, x, x, GroundMetric.identity(4), SolverConfig(mass=1.0))
    assert float(kvs) == float(kvt)


def test_matched_tight_pairs_loss_vanishes():
    x = _pairs(4)
    metric = GroundMetric.identity(4)
    loss, *_ = mpot_loss(x, x + 1e-3, x - 1e-3, metric, SolverConfig(mass=1.0, epsilon=0.01))
    assert float(loss) < 1e-6
    C = np.linalg.norm(x[:, None] - x[None] - 1e-3, axis=-1)
    np.testing.assert_allclose(exact_pot_lp(C, np.full(4, .25), np.full(4, .25), 1.0).plan, identity_plan(4),
                               atol=1e-12)


def test_shifted_pairing_costs_more():
    x = _pairs(4, spread=1.0)
    metric = GroundMetric.identity(4)
    cfg = SolverConfig()
    matched, *_ = mpot_loss(x, x, x, metric, cfg)
    shifted, *_ = mpot_loss(x, np.roll(x, 1, axis=0), x, metric, cfg)
    assert float(shifted) > float(matched)


def test_mpot_permutation_equivariant():
    rng = np.random.default_rng(2)
    v, s, t = (rng.normal(size=(5, 3)) for _ in range(3))
    perm = rng.permutation(5)
    metric = GroundMetric.identity(3)
    a, *_ = mpot_loss(v, s, t, metric)
    b, *_ = mpot_loss(v[perm], s[perm], t[perm], metric)
    assert float(a) == pytest.approx(float(b), abs=1e-10)


def test_mpot_gradient_b3():
    rng = np.random.default_rng(4)
    s, t = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    cfg = SolverConfig(tolerance=1e-12, backward_cap=5000, epsilon=0.2)

    def f(P):
        return mpot_loss(P["v"], s, t, GroundMetric.mahalanobis(P["M"]), cfg)[0]

    assert tc.finite_diff_check(f, {"v": rng.normal(size=(3, 4)), "M": np.eye(4) * 1.5}) < 1e-4


def test_partial_mass_shuns_mispaired_columns():
    rng = np.random.default_rng(6)
    b = 6
    v = rng.normal(size=(b, 3)) * 5
    text = v + 0.01 * rng.normal(size=v.shape)
    bad = [1, 4]
    text[bad] = rng.normal(size=(2, 3)) * 5 + 40.0  # far from every volume
    marg = np.full(b, 1 / b)
    C = np.linalg.norm(v[:, None] - text[None], axis=-1)
    partial = partial_ot(C, marg, marg, SolverConfig(mass=0.6, epsilon=0.5)).plan[:, bad].sum()
    full = partial_ot(C, marg, marg, SolverConfig(mass=1.0, epsilon=0.5)).plan[:, bad].sum()
    assert partial < full


def test_contrastive_examples():
    e = np.eye(2)
    assert float(contrastive_loss(e, e, 1.0)) == pytest.approx(-np.log(np.e / (np.e + 1)), abs=1e-12)
    same = np.ones((4, 3))
    assert float(contrastive_loss(same, same)) == pytest.approx(np.log(4), abs=1e-12)
    x = _pairs(4, spread=1.0, seed=3)
    assert float(contrastive_loss(x, x, 0.01)) < 1e-3


def test_contrastive_scale_invariant():
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    assert float(contrastive_loss(a, b)) == pytest.approx(float(contrastive_loss(3 * a, b)), rel=1e-14)


def test_contrastive_rejects_bad_args():
    with pytest.raises(ContractError):
        contrastive_loss(np.eye(2), np.eye(2), 0.0)
    with pytest.raises(DomainError):
        contrastive_loss(np.zeros((2, 2)), np.eye(2))


def test_reconstruction_examples():
    x = np.random.default_rng(0).uniform(size=(2, 3, 3, 3))
    assert float(reconstruction_loss(x, x)) == 0.0
    assert float(reconstruction_loss(np.full((1, 4), 3.0), np.zeros((1, 4)))) == pytest.approx(6.0)
    d = np.random.default_rng(1).normal(size=x.shape)
    assert float(reconstruction_loss(x, x + 2 * d)) == pytest.approx(2 * float(reconstruction_loss(x, x + d)))


def test_reconstruction_zero_gradient_at_match():
    tape = tc.Tape()
    xh = tape.param("xh", np.ones((1, 4)))
    g = tape.backward(reconstruction_loss(np.ones((1, 4)), xh))["xh"]
    np.testing.assert_array_equal(g, 0.0)


def test_total_loss():
    assert total_loss(LossBreakdown()) == 0.0
    assert total_loss(LossBreakdown(0.7, 0.3)) == pytest.approx(1.0)
    with pytest.raises(DomainError):
        total_loss(LossBreakdown(np.inf, 0.0))


def test_total_gradient_is_sum_of_parts():
    x = np.random.default_rng(2).normal(size=(3, 4))
    y = np.random.default_rng(3).normal(size=(3, 4))

    def parts(P):
        return (contrastive_loss(P["x"], y), contrastive_loss(y, P["x"], 0.5), reconstruction_loss(y, P["x"]))

    def grad(f):
        tape = tc.Tape()
        return tape.backward(f({"x": tape.param("x", x)}))["x"]

    whole = grad(lambda P: total_loss(LossBreakdown(*parts(P))))
    split = sum(grad(lambda P, k=k: parts(P)[k]) for k in range(3))
    np.testing.assert_allclose(whole, split, atol=1e-12)
    assert tc.finite_diff_check(lambda P: total_loss(LossBreakdown(*parts(P))), {"x": x}) < 1e-6
