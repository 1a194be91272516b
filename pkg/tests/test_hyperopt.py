import math

import numpy as np
import pytest

from chronoweft import hyperopt
from chronoweft.errors import ConfigError, SearchExhaustedError, ValidationError
from chronoweft.hyperopt import Categorical, Continuous, Integer, SearchSpace


def quadratic(config):
    return 1.0 + (config["x"] - 0.3) ** 2


LINE = SearchSpace({"x": Continuous(-1.0, 1.0)})


def test_single_choice_categorical():
    assert hyperopt.sample(SearchSpace({"n": Categorical((4,))}), seed=3) == {"n": 4}


def test_same_seed_same_config():
    space = hyperopt.reservoir_space()
    assert hyperopt.sample(space, 17) == hyperopt.sample(space, 17)
    assert hyperopt.sample(space, 17) != hyperopt.sample(space, 18)


def test_samples_stay_in_range():
    space = hyperopt.transformer_space()
    for seed in range(50):
        cfg = hyperopt.sample(space, seed)
        assert 1 <= cfg["blocks"] <= 4
        assert 1e-4 <= cfg["lr"] <= 1e-2
        assert cfg["heads"] in (1, 2, 4)


def test_log_uniform_is_flat_in_exponent():
    space = SearchSpace({"v": Continuous(1e-6, 1e-2, log=True)})
    exponents = np.array([math.log10(hyperopt.sample(space, s)["v"]) for s in range(10_000)])
    counts, _ = np.histogram(exponents, bins=8, range=(-6, -2))
    # 1250 expected per bucket, sd about 33
    assert np.all(np.abs(counts - 1250) < 150)


def test_parameter_validation():
    with pytest.raises(ConfigError):
        Continuous(0.0, 1.0, log=True)
    with pytest.raises(ConfigError):
        Integer(5, 1)
    with pytest.raises(ConfigError):
        Categorical(())


def test_space_from_mapping():
    space = SearchSpace.from_mapping({
        "lr": {"kind": "continuous", "low": 1e-4, "high": 1e-2, "log": True},
        "blocks": {"kind": "integer", "low": 1, "high": 4},
        "heads": {"kind": "categorical", "choices": [1, 2]},
    })
    assert space.params["lr"] == Continuous(1e-4, 1e-2, True)
    assert space.params["blocks"] == Integer(1, 4)
    with pytest.raises(ConfigError):
        SearchSpace.from_mapping({"x": {"kind": "gaussian"}})
    with pytest.raises(ConfigError):
        SearchSpace.from_mapping({"x": {"kind": "integer", "low": 1}})


@pytest.mark.parametrize("seed", range(10))
def test_search_finds_quadratic_minimum(seed):
    result = hyperopt.random_search(LINE, 200, quadratic, seed=seed)
    assert result.best.objective <= 1.05
    assert len(result.history) == 200


def test_single_trial():
    result = hyperopt.random_search(LINE, 1, quadratic, seed=0)
    assert result.best.index == 0
    with pytest.raises(ValidationError):
        hyperopt.random_search(LINE, 0, quadratic)


def test_failed_trials_never_win():
    calls = {"n": 0}

    def flaky(config):
        k = calls["n"]
        calls["n"] += 1
        if k % 2 == 1:
            raise RuntimeError("odd trial")
        return quadratic(config)

    result = hyperopt.random_search(LINE, 20, flaky, seed=2)
    failed = [r for r in result.history if r.failed]
    assert len(failed) == 10
    assert all("odd trial" in r.error for r in failed)
    assert not result.best.failed
    assert result.best.index % 2 == 0


def test_non_finite_objective_counts_as_failure():
    result = hyperopt.random_search(LINE, 4, lambda c: math.nan if c["x"] > 0 else 1.0, seed=1)
    assert all(r.failed == (r.config["x"] > 0) for r in result.history)


def test_all_failures_exhaust_search():
    def broken(config):
        raise ValueError("nope")

    with pytest.raises(SearchExhaustedError) as err:
        hyperopt.random_search(LINE, 5, broken)
    assert err.value.trials == 5


def test_history_prefix_property():
    short = hyperopt.random_search(LINE, 50, quadratic, seed=9).history
    long = hyperopt.random_search(LINE, 100, quadratic, seed=9).history
    assert [r.config for r in short] == [r.config for r in long[:50]]
    assert [r.seed for r in short] == [r.seed for r in long[:50]]


def test_running_best_never_increases():
    history = hyperopt.random_search(LINE, 60, quadratic, seed=4).history
    running = hyperopt.best_prefix(history)
    assert all(b <= a for a, b in zip(running, running[1:]))


def test_workers_do_not_change_history():
    serial = hyperopt.random_search(LINE, 30, quadratic, seed=5, workers=1)
    pooled = hyperopt.random_search(LINE, 30, quadratic, seed=5, workers=4)
    assert [r.objective for r in serial.history] == [r.objective for r in pooled.history]
    assert serial.best.index == pooled.best.index


def test_trial_row():
    record = hyperopt.TrialRecord(3, {"x": 0.5}, seed=11, objective=None, error="boom")
    row = record.to_row()
    assert row["failed"] is True
    assert row["param.x"] == 0.5
    assert row["error"] == "boom"
