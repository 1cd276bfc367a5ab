"""Tree-structured Parzen Estimator search with a median pruner.

Suggestions for trial ``i`` draw from ``default_rng([seed, i])`` so a study
replays identically and resumes without storing RNG state.
"""

from __future__ import annotations

import inspect
import json
import logging
import math
import numbers
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy.special import ndtr, ndtri

log = logging.getLogger(__name__)

SCHEMA = 1


class SearchSpaceError(ValueError):
    pass


class TrialPruned(Exception):
    pass


# -- search space -------------------------------------------------------------

@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self):
        if not self.low < self.high:
            raise SearchSpaceError(f"need low < high, got {self.low}, {self.high}")

    def bounds(self):
        return self.low, self.high

    def to_internal(self, v):
        return float(v)

    def from_internal(self, u):
        return float(min(max(u, self.low), self.high))


@dataclass(frozen=True)
class LogUniform(Uniform):
    def __post_init__(self):
        super().__post_init__()
        if self.low <= 0:
            raise SearchSpaceError("log-uniform needs low > 0")

    def bounds(self):
        return math.log(self.low), math.log(self.high)

    def to_internal(self, v):
        return math.log(v)

    def from_internal(self, u):
        return float(min(max(math.exp(u), self.low), self.high))


@dataclass(frozen=True)
class IntUniform:
    low: int
    high: int

    def __post_init__(self):
        if not self.low < self.high:
            raise SearchSpaceError(f"need low < high, got {self.low}, {self.high}")

    def bounds(self):
        return self.low - 0.5, self.high + 0.5

    def to_internal(self, v):
        return float(v)

    def from_internal(self, u):
        return int(min(max(round(u), self.low), self.high))


@dataclass(frozen=True)
class Categorical:
    choices: tuple

    def __post_init__(self):
        if len(self.choices) < 1:
            raise SearchSpaceError("categorical needs at least one choice")


Dimension = Uniform | LogUniform | IntUniform | Categorical

_KINDS = {"uniform": Uniform, "log-uniform": LogUniform, "int": IntUniform, "integer": IntUniform}


def parse_space(raw: dict) -> dict[str, Dimension]:
    """``{"name": {"type": "log-uniform", "low": .., "high": ..}}`` -> dimensions."""
    space = {}
    for name, spec in raw.items():
        kind = spec.get("type")
        if kind == "categorical":
            space[name] = Categorical(tuple(spec["choices"]))
        elif kind in _KINDS:
            space[name] = _KINDS[kind](spec["low"], spec["high"])
        else:
            raise SearchSpaceError(f"{name}: unknown dimension type {kind!r}")
    if not space:
        raise SearchSpaceError("search space is empty")
    return space


def load_space(path) -> dict[str, Dimension]:
    return parse_space(json.loads(Path(path).read_text()))


def sample_prior(space: dict[str, Dimension], rng: np.random.Generator) -> dict:
    out = {}
    for name in sorted(space):
        dim = space[name]
        if isinstance(dim, Categorical):
            out[name] = dim.choices[int(rng.integers(len(dim.choices)))]
        else:
            lo, hi = dim.bounds()
            out[name] = dim.from_internal(rng.uniform(lo, hi))
    return out


# -- Parzen estimators ----------------------------------------------------------

class ParzenEstimator:
    """Truncated Gaussian mixture on ``[lo, hi]``: one kernel per observation plus a flat prior kernel.

    The shared bandwidth follows Scott's rule, floored at ``span / min(100, n + 1)``
    so small sets stay broad; the floor reaches ``floor_frac * span`` at 99 points.
    """

    def __init__(self, obs: np.ndarray, lo: float, hi: float, floor_frac: float = 0.01):
        obs = np.asarray(obs, dtype=np.float64)
        span = hi - lo
        n = len(obs)
        if n > 1:
            bw = 1.06 * float(np.std(obs)) * n ** (-0.2)
        else:
            bw = 0.0
        bw = max(bw, span / min(1.0 / floor_frac, n + 1.0))
        self.mu = np.r_[obs, 0.5 * (lo + hi)]
        self.sigma = np.r_[np.full(n, bw), span]
        self.weights = np.full(n + 1, 1.0 / (n + 1))
        self.lo, self.hi = lo, hi
        a = (lo - self.mu) / self.sigma
        b = (hi - self.mu) / self.sigma
        self._ca, self._cb = ndtr(a), ndtr(b)
        self._z = np.maximum(self._cb - self._ca, 1e-300)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        comp = rng.choice(len(self.mu), size=n, p=self.weights)
        u = rng.uniform(size=n)
        q = self._ca[comp] + u * (self._cb[comp] - self._ca[comp])
        q = np.clip(q, 1e-300, 1 - 1e-16)
        x = self.mu[comp] + self.sigma[comp] * ndtri(q)
        return np.clip(x, self.lo, self.hi)

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)[:, None]
        z = (x - self.mu) / self.sigma
        dens = np.exp(-0.5 * z * z) / (np.sqrt(2 * np.pi) * self.sigma * self._z)
        return np.log(np.maximum((dens * self.weights).sum(axis=1), 1e-300))


def categorical_probs(obs: list, choices: tuple, prior_weight: float = 1.0) -> np.ndarray:
    counts = np.array([sum(1 for o in obs if o == c) for c in choices], dtype=np.float64)
    counts += prior_weight
    return counts / counts.sum()


# -- trials and study -----------------------------------------------------------

@dataclass
class TrialRecord:
    id: int
    params: dict
    intermediate: dict[int, float] = field(default_factory=dict)
    value: float | None = None
    state: str = "running"        # running | complete | pruned | failed
    error: str | None = None

    def report(self, step: int, value: float) -> None:
        if self.intermediate and step <= max(self.intermediate):
            raise ValueError(f"intermediate steps must increase; got {step} after {max(self.intermediate)}")
        self.intermediate[int(step)] = float(value)

    def to_record(self) -> dict:
        return {"schema": SCHEMA, "kind": "trial", "id": self.id, "params": self.params,
                "intermediate": {str(k): v for k, v in self.intermediate.items()},
                "value": self.value, "state": self.state, "error": self.error}

    @classmethod
    def from_record(cls, rec: dict) -> "TrialRecord":
        return cls(rec["id"], rec["params"], {int(k): v for k, v in rec["intermediate"].items()},
                   rec["value"], rec["state"], rec.get("error"))


@dataclass
class MedianPruner:
    n_warmup: int = 1
    n_min: int = 3


@dataclass
class Study:
    direction: str = "maximize"
    seed: int = 0
    gamma: float = 0.25
    n_startup: int = 10
    n_candidates: int = 24
    pruner: MedianPruner | None = field(default_factory=MedianPruner)
    trials: list[TrialRecord] = field(default_factory=list)
    storage: str | None = None

    def __post_init__(self):
        if self.direction != "maximize":
            raise ValueError("only direction='maximize' is supported")
        self._lock = threading.Lock()

    @property
    def completed(self) -> list[TrialRecord]:
        return [t for t in self.trials if t.state == "complete" and t.value is not None]

    @property
    def best_trial(self) -> TrialRecord | None:
        done = self.completed
        return max(done, key=lambda t: t.value) if done else None

    def next_id(self) -> int:
        return max((t.id for t in self.trials), default=-1) + 1

    def transcript(self) -> list[tuple]:
        return [(t.id, json.dumps(t.params, sort_keys=True), t.value, t.state) for t in self.trials]

    # -- persistence -------------------------------------------------------
    def header(self) -> dict:
        return {"schema": SCHEMA, "kind": "study", "direction": self.direction, "seed": self.seed,
                "gamma": self.gamma, "n_startup": self.n_startup, "n_candidates": self.n_candidates,
                "pruner": None if self.pruner is None else vars(self.pruner)}

    def _append(self, rec: dict) -> None:
        if self.storage is None:
            return
        path = Path(self.storage)
        new = not path.exists() or path.stat().st_size == 0
        with open(path, "a", encoding="utf-8") as fh:
            if new:
                fh.write(json.dumps(self.header(), sort_keys=True) + "\n")
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Study":
        lines = [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]
        if not lines or lines[0].get("kind") != "study":
            raise ValueError(f"{path}: missing study header record")
        h = lines[0]
        pr = h.get("pruner")
        study = cls(direction=h["direction"], seed=h["seed"], gamma=h["gamma"], n_startup=h["n_startup"],
                    n_candidates=h["n_candidates"], pruner=MedianPruner(**pr) if pr else None,
                    storage=str(path))
        study.trials = [TrialRecord.from_record(r) for r in lines[1:] if r.get("kind") == "trial"]
        return study


def suggest(study: Study, space: dict[str, Dimension], trial_id: int | None = None) -> dict:
    """Random until ``n_startup`` trials complete, then the best of ``n_candidates`` by l(x)/g(x)."""
    if not space:
        raise SearchSpaceError("search space is empty")
    tid = study.next_id() if trial_id is None else trial_id
    rng = np.random.default_rng([study.seed, tid])
    done = study.completed
    if len(done) < study.n_startup:
        return sample_prior(space, rng)
    ranked = sorted(done, key=lambda t: (-t.value, t.id))
    n_good = max(1, int(math.ceil(study.gamma * len(ranked))))
    good, bad = ranked[:n_good], ranked[n_good:]
    if not bad:
        return sample_prior(space, rng)

    n = study.n_candidates
    names = sorted(space)
    cands: dict[str, list] = {}
    score = np.zeros(n)
    for name in names:
        dim = space[name]
        if isinstance(dim, Categorical):
            pl = categorical_probs([t.params[name] for t in good], dim.choices)
            pg = categorical_probs([t.params[name] for t in bad], dim.choices)
            idx = rng.choice(len(dim.choices), size=n, p=pl)
            score += np.log(pl[idx]) - np.log(pg[idx])
            cands[name] = [dim.choices[i] for i in idx]
        else:
            lo, hi = dim.bounds()
            l = ParzenEstimator([dim.to_internal(t.params[name]) for t in good], lo, hi)
            g = ParzenEstimator([dim.to_internal(t.params[name]) for t in bad], lo, hi)
            x = l.sample(rng, n)
            if isinstance(dim, IntUniform):
                x = np.clip(np.round(x), dim.low, dim.high)
            score += l.log_pdf(x) - g.log_pdf(x)
            cands[name] = [dim.from_internal(v) for v in x]
    best = int(np.argmax(score))
    return {name: cands[name][best] for name in names}


def should_prune(trial: TrialRecord, study: Study, step: int) -> bool:
    """Prune when the value at ``step`` is strictly below the peers' median there."""
    pr = study.pruner
    if pr is None or step not in trial.intermediate or step < pr.n_warmup:
        return False
    peers = [t.intermediate[step] for t in study.trials
             if t is not trial and t.state in ("complete", "running") and step in t.intermediate]
    if len(peers) < pr.n_min:
        return False
    return trial.intermediate[step] < float(np.median(peers))


# -- driver -----------------------------------------------------------------------

Objective = Callable[[dict], "float | Iterable[float]"]


def _wants_reporter(objective) -> bool:
    try:
        return len(inspect.signature(objective).parameters) >= 2
    except (TypeError, ValueError):
        return False


def _run_trial(study: Study, space, objective: Objective, trial: TrialRecord) -> None:
    def report(step: int, value: float) -> None:
        with study._lock:
            trial.report(step, value)
            prune = should_prune(trial, study, step)
        if prune:
            raise TrialPruned()

    try:
        if _wants_reporter(objective):
            out = objective(dict(trial.params), report)
        else:
            out = objective(dict(trial.params))
        if isinstance(out, numbers.Real):
            trial.value = float(out)
        else:
            last = None
            it = iter(out)
            try:
                for step, value in enumerate(it):
                    last = float(value)
                    report(step, value)
            finally:
                if hasattr(it, "close"):
                    it.close()
            if last is None:
                raise ValueError("objective produced no values")
            trial.value = last
        trial.state = "complete"
    except TrialPruned:
        trial.state = "pruned"
    except Exception as exc:  # a failing trial must not stop the study
        log.warning("trial %d failed: %s", trial.id, exc)
        trial.state = "failed"
        trial.error = f"{type(exc).__name__}: {exc}"
    with study._lock:
        study._append(trial.to_record())


def run_study(objective: Objective, space: dict[str, Dimension], n_trials: int,
              study: Study | None = None, n_jobs: int = 1) -> Study:
    """Run ``n_trials`` more trials.

    ``objective(config)`` returns a final value or yields one value per
    step (epoch); yielded values are checked by the pruner between steps
    and the last one is the trial's objective.  An objective taking a
    second argument gets ``report(step, value)`` instead, which raises
    :class:`TrialPruned` when the trial should stop.  Each finished trial is
    appended to ``study.storage`` immediately.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    study = study or Study()

    def new_trial() -> TrialRecord:
        with study._lock:
            tid = study.next_id()
            trial = TrialRecord(tid, suggest(study, space, tid))
            study.trials.append(trial)
        return trial

    if n_jobs <= 1:
        for _ in range(n_trials):
            _run_trial(study, space, objective, new_trial())
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            futures = []
            for _ in range(n_trials):
                futures.append(pool.submit(lambda: _run_trial(study, space, objective, new_trial())))
            for f in futures:
                f.result()
    return study


def random_search(objective: Objective, space: dict[str, Dimension], n_trials: int, seed: int = 0) -> Study:
    """Reference random search using the same per-trial RNG streams as :func:`suggest`."""
    study = Study(seed=seed, n_startup=n_trials + 1, pruner=None)
    for i in range(n_trials):
        trial = TrialRecord(i, sample_prior(space, np.random.default_rng([seed, i])))
        study.trials.append(trial)
        _run_trial(study, space, objective, trial)
    return study
