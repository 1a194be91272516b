# hyperopt.py
# Random search over named parameter spaces.

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
from tqdm import tqdm

from chronoweft.errors import ConfigError, SearchExhaustedError, ValidationError

logger = logging.getLogger(__name__)


# ------------------------
# Parameter kinds
# ------------------------
@dataclass(frozen=True)
class Continuous:
    low: float
    high: float
    log: bool = False

    def __post_init__(self):
        if self.high < self.low:
            raise ConfigError(f"empty interval [{self.low}, {self.high}]")
        if self.log and self.low <= 0:
            raise ConfigError(f"log-scale interval must be strictly positive, got low={self.low}")

    def draw(self, rng):
        if self.log:
            return float(10.0 ** rng.uniform(math.log10(self.low), math.log10(self.high)))
        return float(rng.uniform(self.low, self.high))


@dataclass(frozen=True)
class Integer:
    low: int
    high: int  # inclusive

    def __post_init__(self):
        if self.high < self.low:
            raise ConfigError(f"empty integer range [{self.low}, {self.high}]")

    def draw(self, rng):
        return int(rng.integers(self.low, self.high + 1))


@dataclass(frozen=True)
class Categorical:
    choices: tuple

    def __post_init__(self):
        if not self.choices:
            raise ConfigError("categorical parameter needs at least one choice")

    def draw(self, rng):
        return self.choices[int(rng.integers(len(self.choices)))]


Parameter = Union[Continuous, Integer, Categorical]


@dataclass(frozen=True)
class SearchSpace:
    params: Dict[str, Parameter]

    def __post_init__(self):
        if not self.params:
            raise ConfigError("search space is empty")

    @classmethod
    def from_mapping(cls, mapping):
        """
        {"lr": {"kind": "continuous", "low": 1e-4, "high": 1e-2, "log": true},
         "blocks": {"kind": "integer", "low": 1, "high": 4},
         "heads": {"kind": "categorical", "choices": [1, 2, 4]}}
        """
        params = {}
        for name, spec in mapping.items():
            spec = dict(spec)
            kind = spec.pop("kind", None)
            try:
                if kind == "continuous":
                    params[name] = Continuous(float(spec["low"]), float(spec["high"]), bool(spec.get("log", False)))
                elif kind == "integer":
                    params[name] = Integer(int(spec["low"]), int(spec["high"]))
                elif kind == "categorical":
                    params[name] = Categorical(tuple(spec["choices"]))
                else:
                    raise ConfigError(f"parameter '{name}': unknown kind {kind!r}")
            except KeyError as e:
                raise ConfigError(f"parameter '{name}': missing field {e}")
        return cls(params)


def transformer_space():
    return SearchSpace({
        "embed_dim": Categorical((16, 32, 64, 128)),
        "heads": Categorical((1, 2, 4)),
        "blocks": Integer(1, 4),
        "ffn_dim": Categorical((32, 64, 128, 256, 512)),
        "dropout": Continuous(0.0, 0.3),
        "lr": Continuous(1e-4, 1e-2, log=True),
        "batch_size": Categorical((8, 16, 32)),
    })


def reservoir_space():
    return SearchSpace({
        "leak": Continuous(0.05, 1.0),
        "ridge": Continuous(1e-8, 1e-1, log=True),
        "input_scale": Continuous(0.05, 2.5),
        "spectral_radius": Continuous(0.1, 2.0),
        "density": Continuous(0.01, 1.0),
        "train_noise": Continuous(1e-6, 1e-1, log=True),
    })


def sample(space, seed):
    """One independent draw per parameter, in the space's key order"""
    rng = np.random.default_rng(seed)
    return {name: p.draw(rng) for name, p in space.params.items()}


# ------------------------
# Search
# ------------------------
@dataclass
class TrialRecord:
    index: int
    config: Dict[str, Any]
    seed: int
    objective: Optional[float] = None
    seconds: float = 0.0
    error: Optional[str] = None

    @property
    def failed(self):
        return self.objective is None

    def to_row(self):
        row = {"trial": self.index, "seed": self.seed, "objective": self.objective,
               "seconds": self.seconds, "failed": self.failed, "error": self.error or ""}
        row.update({f"param.{k}": v for k, v in self.config.items()})
        return row


@dataclass
class SearchResult:
    best: TrialRecord
    history: List[TrialRecord] = field(default_factory=list)


def trial_seeds(seed, trials):
    """Children of one SeedSequence, so trial k's seed does not depend on the trial count"""
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(trials)]


def _run_trial(index, space, objective, seed):
    config = sample(space, seed)
    started = time.perf_counter()
    try:
        value = float(objective(config))
        if not math.isfinite(value):
            raise ValueError(f"non-finite objective {value}")
        record = TrialRecord(index, config, seed, value)
    except Exception as e:
        logger.warning("Trial %d failed: %s", index, e)
        record = TrialRecord(index, config, seed, None, error=str(e) or type(e).__name__)
    record.seconds = time.perf_counter() - started
    return record


def random_search(space, trials, objective, seed=0, workers=1):
    """
    Evaluate `trials` sampled configs; failed trials stay in the history but
    never win. History is ordered by trial index regardless of `workers`.
    """
    if trials < 1:
        raise ValidationError(f"trials must be >= 1, got {trials}")
    seeds = trial_seeds(seed, trials)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_trial, k, space, objective, s) for k, s in enumerate(seeds)]
            history = [f.result() for f in tqdm(futures, desc="search", disable=None)]
    else:
        history = [_run_trial(k, space, objective, s) for k, s in enumerate(tqdm(seeds, desc="search", disable=None))]

    ok = [r for r in history if not r.failed]
    if not ok:
        raise SearchExhaustedError(trials)
    best = min(ok, key=lambda r: (r.objective, r.index))
    logger.info("Search done: %d/%d trials succeeded, best %.6g at trial %d",
                len(ok), trials, best.objective, best.index)
    return SearchResult(best, history)


def best_prefix(history: Sequence[TrialRecord]):
    """Running best objective over the history (None until the first success)"""
    out, best = [], None
    for r in history:
        if not r.failed and (best is None or r.objective < best):
            best = r.objective
        out.append(best)
    return out
