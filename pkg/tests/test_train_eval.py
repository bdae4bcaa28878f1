import numpy as np
import pytest

from potalign.errors import ContractError, DivergenceError
from potalign.ot_solvers import SolverConfig
from potalign.psat import ModelConfig
from potalign.synth import WorldConfig, generate_world
from potalign.train_eval import (METRIC_COLUMNS, TrainConfig, initial_params, metrics_csv, mispair_mass,
                                 modality_gap, retrieval_eval, train)


def tiny(**kw):
    model = ModelConfig(side=4, width=8, n_queries=2, hidden=8, out_dim=6)
    world = WorldConfig(n_subjects=16, side=4, embed_dim=6, misalignment_rate=kw.pop("rho", 0.0))
    kw.setdefault("optimizer", "adam")
    cfg = TrainConfig(model=model, epochs=kw.pop("epochs", 2), batch_size=4, lr=1e-3,
                      solver=SolverConfig(tolerance=1e-7), **kw)
    return cfg, generate_world(world)


def test_retrieval_identity_and_ties():
    x = np.random.default_rng(0).normal(size=(6, 3))
    assert retrieval_eval(x, x, "euclidean")[1] == 1.0
    dup = np.zeros((3, 2))
    assert retrieval_eval(dup, dup, "euclidean", ks=(1,))[1] == pytest.approx(1 / 3)
    with pytest.raises(ContractError):
        retrieval_eval(np.zeros((4, 2)), np.zeros((4, 2)), ks=(5,))


def test_retrieval_on_separable_clusters():
    rng = np.random.default_rng(1)
    centres = np.array([[10.0, 0.0], [-10.0, 0.0]])
    labels = np.repeat([0, 1], 10)
    q = centres[labels] + rng.normal(size=(20, 2))
    t = centres[labels] + rng.normal(size=(20, 2))
    assert retrieval_eval(q, t, "euclidean")[5] >= 0.5 * 5 / 10


def test_modality_gap_examples():
    a = np.random.default_rng(2).normal(size=(5, 3))
    assert modality_gap(a, a) == 0.0
    assert modality_gap(np.tile([1.0, 0.0], (4, 1)), np.tile([0.0, 1.0], (4, 1))) == pytest.approx(np.sqrt(2))


def test_zero_epochs_leaves_params():
    cfg, ds = tiny(epochs=0)
    res = train(cfg, ds)
    assert res.history == [] and res.steps == 0
    for k, v in initial_params(cfg).items():
        np.testing.assert_array_equal(res.params[k], v)


def test_training_is_deterministic():
    cfg, ds = tiny()
    a, b = train(cfg, ds), train(cfg, ds)
    assert metrics_csv(a.history) == metrics_csv(b.history)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_metric_stays_psd_and_metrics_in_range():
    cfg, ds = tiny(epochs=3, rho=0.25)
    res = train(cfg, ds)
    assert min(res.min_eigenvalues) >= -1e-10
    for r in res.history:
        assert all(0.0 <= getattr(r, c) <= 1.0 for c in ("top1_s", "top5_s", "top1_t", "top5_t"))
        assert r.mispair_mass >= 0.0


def test_mpot_loss_descends_on_small_task():
    cfg, ds = tiny(epochs=8, reconstruction=False)
    res = train(cfg, ds)
    assert res.history[-1].total < res.history[0].total


def test_contrastive_and_sgd_paths_run():
    cfg, ds = tiny(loss="contrastive")
    assert len(train(cfg, ds).history) == 2
    cfg, ds = tiny(optimizer="sgd")
    assert len(train(cfg, ds).history) == 2


def test_divergence_detected():
    cfg, ds = tiny()
    params = initial_params(cfg)
    params["enc.W"] = params["enc.W"] * 1e300
    with pytest.raises((DivergenceError, ArithmeticError)):
        train(cfg, ds, params=params)


def test_mispair_mass_reacts_to_budget():
    cfg, ds = tiny(rho=0.5, epochs=1)
    res = train(cfg, ds)
    low = mispair_mass(res.params, ds, cfg, mass=0.5)
    high = mispair_mass(res.params, ds, cfg, mass=1.0)
    assert low < high


def test_metrics_csv_header():
    cfg, ds = tiny(epochs=1)
    text = metrics_csv(train(cfg, ds).history, ["hello"])
    lines = text.splitlines()
    assert lines[0] == "# hello" and lines[1] == ",".join(METRIC_COLUMNS) and len(lines) == 3


def test_config_checks():
    with pytest.raises(ContractError):
        TrainConfig(lr=0.0)
    with pytest.raises(ContractError):
        TrainConfig(batch_size=1)
    with pytest.raises(ContractError):
        TrainConfig(loss="mse")
