"""Desk-scale end-to-end checks. Run with CHRONOWEFT_SLOW=1."""

import numpy as np
import pytest

from chronoweft import harness, metrics
from chronoweft import transformer as tf
from chronoweft.observe import ObservationSpec, apply_observation

pytestmark = pytest.mark.slow

SPROTT_POOL = [f"sprott_{k}" for k in range(6)]


@pytest.fixture(scope="module")
def desk_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    plan = harness.ExperimentPlan(
        name="desk", train_systems=SPROTT_POOL, held_out=["lorenz"], profile="desk",
        lengths=[200], sparsities=[0.5, 0.9], noise_levels=[0.0], realizations=50,
        include_stochastic=True, output_dir=str(out),
    )
    build = harness.build_dataset(plan)
    params, log = harness.train_on_plan(plan, build)
    _, summary = harness.run_reconstruction_sweep(plan, params)
    return plan, params, log, summary


def _row(summary, system, sparsity):
    return summary[(summary.system == system) & (summary.sparsity == sparsity)].iloc[0]


def _fully_observed(plan, system, length=200):
    window = harness.target_trajectory(plan, system).window(0, length)
    return window, apply_observation(window, ObservationSpec(0.0))


def test_training_loss_goes_down(desk_run):
    _, _, log, _ = desk_run
    assert log.epoch_losses[4] < log.epoch_losses[0]


def test_fully_observed_pool_system_is_copied(desk_run):
    plan, params, *_ = desk_run
    window, sparse = _fully_observed(plan, "sprott_0")
    assert sparse.mask.all()
    assert metrics.mse(tf.reconstruct(sparse, params), window) < 1e-3


def test_fully_observed_input_comes_back_unchanged(desk_run):
    plan, params, *_ = desk_run
    window, sparse = _fully_observed(plan, "lorenz")
    recon = tf.reconstruct(sparse, params)
    assert np.max(np.abs(recon.data - window.data)) < 0.1


def test_zero_shot_lorenz_beats_interpolation(desk_run):
    *_, summary = desk_run
    half = _row(summary, "lorenz", 0.5)
    assert half.mse_median < half.baseline_mse
    assert half.mse_median < _row(summary, "lorenz", 0.9).mse_median


def test_stochastic_signal_is_not_reconstructed(desk_run):
    *_, summary = desk_run
    assert _row(summary, "stochastic", 0.5).mse_median >= 2 * _row(summary, "lorenz", 0.5).mse_median


def climate_plan(tmp_path, **overrides):
    values = dict(name="climate", stages=["climate"], climate_target="lorenz", reservoir="lorenz",
                  climate_train_length=20_000, horizon=10_000, output_dir=str(tmp_path))
    values.update(overrides)
    return harness.ExperimentPlan(**values)


def test_reservoir_climate_on_clean_lorenz(tmp_path):
    plan = climate_plan(tmp_path)
    inputs = harness.climate_inputs(plan)
    cfg = harness.reservoir_config(plan, seed=harness.derive_seed(plan.seed, "reservoir"))
    report = harness.climate_score(plan, inputs, cfg).report
    assert report.rmse < report.metadata["persistence_rmse"]
    assert report.dv < report.metadata["surrogate_dv"]


def test_larger_reservoir_lowers_dv(tmp_path):
    plan = climate_plan(tmp_path, stages=["reservoir_grid"], reservoir_train_lengths=[20_000],
                        reservoir_sizes=[100, 300])
    frame = harness.run_reservoir_grid(plan)
    dv = frame.set_index("size").dv
    assert dv[300] < dv[100]


def test_ground_truth_segments_beat_reconstructed_ones(desk_run, tmp_path):
    _, params, *_ = desk_run
    plan = climate_plan(tmp_path, climate_sparsity=0.8)
    cfg = harness.reservoir_config(plan, seed=harness.derive_seed(plan.seed, "reservoir"))
    clean = harness.climate_score(plan, harness.climate_inputs(plan), cfg).report
    recon = harness.climate_score(plan, harness.climate_inputs(plan, params), cfg).report
    assert clean.dv < recon.dv
