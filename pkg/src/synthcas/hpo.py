"""Bayesian hyper-parameter search: TPE sampling with Hyperband pruning.

A :class:`Study` owns the trials and an append-only JSON-lines journal;
replaying the journal rebuilds the same study.  Sampling randomness is
derived from ``(seed, trial number)`` so a replayed study suggests exactly
what the original would have.
"""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np
from scipy.special import logsumexp
from scipy.stats import truncnorm

STATES = ("running", "complete", "pruned", "failed")


class TrialPruned(Exception):
    """Raised inside an objective to stop an unpromising trial."""


@dataclass(frozen=True)
class Param:
    name: str
    low: float
    high: float
    kind: str = "float"  # "int" or "float"

    def __post_init__(self):
        if self.low > self.high:
            raise ValueError(f"{self.name}: low > high")
        if self.kind not in ("int", "float"):
            raise ValueError(f"{self.name}: unknown kind {self.kind!r}")

    @property
    def relaxed_bounds(self) -> tuple[float, float]:
        if self.kind == "int":
            return self.low - 0.5, self.high + 0.5
        return float(self.low), float(self.high)

    def cast(self, x: float):
        if self.kind == "int":
            return int(np.clip(np.rint(x), self.low, self.high))
        return float(np.clip(x, self.low, self.high))

    def to_dict(self) -> dict:
        return {"name": self.name, "low": self.low, "high": self.high, "kind": self.kind}


@dataclass(frozen=True)
class SearchSpace:
    params: tuple[Param, ...]

    def __post_init__(self):
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")

    @classmethod
    def from_dicts(cls, items) -> "SearchSpace":
        return cls(tuple(Param(**d) for d in items))

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    def __getitem__(self, name: str) -> Param:
        for p in self.params:
            if p.name == name:
                return p
        raise KeyError(name)

    def __len__(self):
        return len(self.params)

    def contains(self, assignment: Mapping[str, float]) -> bool:
        for p in self.params:
            v = assignment[p.name]
            if not p.low <= v <= p.high:
                return False
            if p.kind == "int" and int(v) != v:
                return False
        return True

    def to_dicts(self) -> list[dict]:
        return [p.to_dict() for p in self.params]


def sampler_space(is_bounds=(5, 50), ugs_bounds=(0.0, 7.5), epoch_bounds=(1, 50)) -> SearchSpace:
    """The generation search space: inference steps, guidance scale, checkpoint epoch."""
    return SearchSpace((
        Param("IS", *is_bounds, kind="int"),
        Param("UGS", float(ugs_bounds[0]), float(ugs_bounds[1]), kind="float"),
        Param("epoch", *epoch_bounds, kind="int"),
    ))


@dataclass
class Trial:
    number: int
    params: dict
    state: str = "running"
    intermediate: dict[int, float] = field(default_factory=dict)
    value: float | None = None
    bracket: int = 0

    @property
    def last_step(self) -> int | None:
        return max(self.intermediate) if self.intermediate else None


# ---------------------------------------------------------------------------
# Hyperband
# ---------------------------------------------------------------------------

class HyperbandPruner:
    """Successive-halving brackets over geometric rungs ``min_resource * eta**k``.

    At a rung, a trial is pruned when its value falls below the best
    ``1/eta`` fraction of values reported at that rung by trials of its
    bracket numbered no later than itself.  Nothing is pruned until
    ``eta`` trials have reached the rung.
    """

    def __init__(self, min_resource: int = 1, max_resource: int = 100, reduction_factor: int = 3):
        if min_resource < 1 or max_resource < min_resource or reduction_factor < 2:
            raise ValueError("invalid Hyperband resources")
        self.min_resource = min_resource
        self.max_resource = max_resource
        self.eta = reduction_factor
        self.n_brackets = int(math.floor(math.log(max_resource / min_resource, self.eta) + 1e-9)) + 1

    def rung_resources(self, bracket: int = 0) -> list[int]:
        out, k = [], bracket
        while self.min_resource * self.eta ** k <= self.max_resource:
            out.append(self.min_resource * self.eta ** k)
            k += 1
        return out

    def bracket_budgets(self) -> list[int]:
        budgets = []
        for b in range(self.n_brackets):
            s = self.n_brackets - 1 - b
            budgets.append(math.ceil(self.n_brackets * self.eta ** s / (s + 1)))
        return budgets

    def assign_bracket(self, seed: int, number: int) -> int:
        budgets = np.array(self.bracket_budgets())
        draw = np.random.default_rng([seed, number, 1]).integers(budgets.sum())
        return int(np.searchsorted(np.cumsum(budgets), draw, side="right"))

    def to_dict(self) -> dict:
        return {"min_resource": self.min_resource, "max_resource": self.max_resource,
                "reduction_factor": self.eta}

    def should_prune(self, study: "Study", trial: Trial) -> bool:
        step = trial.last_step
        if step is None or step not in self.rung_resources(trial.bracket):
            return False
        values = [
            t.intermediate[step] for t in study.trials
            if t.bracket == trial.bracket and t.number <= trial.number and step in t.intermediate
        ]
        if len(values) < self.eta:
            return False
        keep = max(1, len(values) // self.eta)
        threshold = sorted(values, reverse=True)[keep - 1]
        return trial.intermediate[step] < threshold


# ---------------------------------------------------------------------------
# TPE
# ---------------------------------------------------------------------------

@dataclass
class ParzenEstimator:
    """Truncated Gaussian mixture over one (relaxed) parameter.

    One kernel per observation with a Scott's-rule bandwidth, plus a wide
    prior kernel so the density never vanishes inside the bounds.
    """

    mus: np.ndarray
    sigmas: np.ndarray
    weights: np.ndarray
    low: float
    high: float

    @classmethod
    def fit(cls, obs, low: float, high: float, prior_weight: float = 1.0) -> "ParzenEstimator":
        obs = np.asarray(obs, dtype=np.float64)
        span = max(high - low, 1e-12)
        n = len(obs)
        if n > 1 and np.std(obs, ddof=1) > 0:
            bw = np.std(obs, ddof=1) * n ** (-1.0 / 5.0)
        else:
            bw = span / 4.0
        # lower clip shrinks with the sample size so a small good set cannot collapse
        bw = float(np.clip(bw, span / min(100.0, n + 1.0), span))
        mus = np.append(obs, (low + high) / 2.0)
        sigmas = np.append(np.full(n, bw), span)
        weights = np.append(np.ones(n), prior_weight)
        return cls(mus, sigmas, weights / weights.sum(), low, high)

    def _ab(self):
        return (self.low - self.mus) / self.sigmas, (self.high - self.mus) / self.sigmas

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        comp = rng.choice(len(self.mus), size=size, p=self.weights)
        a, b = self._ab()
        return truncnorm.rvs(a[comp], b[comp], loc=self.mus[comp], scale=self.sigmas[comp],
                             random_state=rng)

    def log_pdf(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        a, b = self._ab()
        comp = truncnorm.logpdf(x[:, None], a[None], b[None], loc=self.mus[None], scale=self.sigmas[None])
        return logsumexp(comp + np.log(self.weights)[None], axis=1)


def split_good_bad(trials: list[Trial], gamma: float):
    """Order finished trials best-first and cut off the top ``ceil(gamma * n)``.

    Complete and failed trials rank by objective (failed count as 0);
    pruned trials always rank below them.  Ties keep trial order.
    """
    def key(t: Trial):
        if t.state == "pruned":
            return (1, 0.0, t.number)
        return (0, -(t.value if t.value is not None else 0.0), t.number)

    ranked = sorted(trials, key=key)
    n_good = max(1, math.ceil(gamma * len(ranked)))
    return ranked[:n_good], ranked[n_good:]


def finished_trials(study: "Study") -> list[Trial]:
    return [t for t in study.trials if t.state in ("complete", "pruned", "failed")]


def tpe_suggest(study: "Study", number: int | None = None) -> dict:
    """Propose a parameter assignment for trial ``number``.

    Uniform during the first ``n_startup`` trials, then the best of
    ``n_candidates`` draws from the good-trial density ``l`` by ``l / g``.
    """
    space = study.space
    if len(space) == 0:
        raise ValueError("empty search space")
    number = len(study.trials) if number is None else number
    rng = np.random.default_rng([study.seed, number])
    history = [t for t in finished_trials(study) if t.number < number]
    if len(history) < study.n_startup:
        return {p.name: p.cast(rng.uniform(*p.relaxed_bounds)) for p in space.params}
    good, bad = split_good_bad(history, study.gamma)
    total = np.zeros(study.n_candidates)
    candidates = {}
    for p in space.params:
        low, high = p.relaxed_bounds
        if low == high:
            candidates[p.name] = np.full(study.n_candidates, low)
            continue
        l = ParzenEstimator.fit([t.params[p.name] for t in good], low, high)
        g = ParzenEstimator.fit([t.params[p.name] for t in bad], low, high)
        draws = l.sample(rng, study.n_candidates)
        candidates[p.name] = draws
        total += l.log_pdf(draws) - g.log_pdf(draws)
    best = int(np.argmax(total))  # first maximum wins ties
    return {p.name: p.cast(candidates[p.name][best]) for p in space.params}


# ---------------------------------------------------------------------------
# Study
# ---------------------------------------------------------------------------

class Study:
    """Maximising study with an optional JSON-lines journal.

    Journal records are ``{"trial", "event", "payload", "timestamp"}`` with
    events ``study``, ``ask``, ``report``, ``complete``, ``prune`` and
    ``fail``.
    """

    def __init__(self, space: SearchSpace, seed: int = 0, pruner: HyperbandPruner | None = None,
                 n_startup: int = 10, gamma: float = 0.25, n_candidates: int = 24,
                 journal: str | Path | None = None, name: str = "study"):
        self.space = space
        self.seed = seed
        self.pruner = pruner
        self.n_startup = n_startup
        self.gamma = gamma
        self.n_candidates = n_candidates
        self.name = name
        self.trials: list[Trial] = []
        self.journal = Path(journal) if journal is not None else None
        self._lock = threading.RLock()
        self._replaying = False
        if self.journal is not None and not self.journal.exists():
            self.journal.parent.mkdir(parents=True, exist_ok=True)
            self._log(None, "study", self.settings())

    def settings(self) -> dict:
        return {
            "name": self.name, "space": self.space.to_dicts(), "seed": self.seed,
            "n_startup": self.n_startup, "gamma": self.gamma, "n_candidates": self.n_candidates,
            "pruner": self.pruner.to_dict() if self.pruner else None,
        }

    def _log(self, trial: int | None, event: str, payload: dict) -> None:
        if self.journal is None or self._replaying:
            return
        record = {"trial": trial, "event": event, "payload": payload, "timestamp": time.time()}
        with open(self.journal, "a") as fh:
            fh.write(json.dumps(record) + "\n")
            fh.flush()

    # -- state transitions --------------------------------------------------

    def ask(self, params: dict | None = None) -> Trial:
        with self._lock:
            number = len(self.trials)
            if params is None:
                params = tpe_suggest(self, number)
            bracket = self.pruner.assign_bracket(self.seed, number) if self.pruner else 0
            trial = Trial(number, dict(params), bracket=bracket)
            self.trials.append(trial)
            self._log(number, "ask", {"params": trial.params, "bracket": bracket})
            return trial

    def report(self, trial: Trial, step: int, value: float) -> None:
        report_intermediate(trial, step, value)
        with self._lock:
            self._log(trial.number, "report", {"step": int(step), "value": float(value)})

    def should_prune(self, trial: Trial) -> bool:
        return should_prune(self, trial)

    def tell(self, trial: Trial, value: float | None = None, state: str = "complete") -> None:
        with self._lock:
            if trial.state != "running":
                raise ValueError(f"trial {trial.number} already finished")
            if state == "complete":
                if value is None:
                    raise ValueError("a complete trial needs an objective value")
                trial.value = float(value)
            elif state == "pruned":
                if not trial.intermediate:
                    raise ValueError("a pruned trial needs at least one intermediate value")
            elif state == "failed":
                trial.value = 0.0 if value is None else float(value)
            else:
                raise ValueError(f"unknown final state {state!r}")
            trial.state = state
            event = {"complete": "complete", "pruned": "prune", "failed": "fail"}[state]
            self._log(trial.number, event, {"value": trial.value})

    # -- queries -------------------------------------------------------------

    @property
    def best_trial(self) -> Trial:
        return best_trial(self)

    def best_so_far(self) -> list[float]:
        """Running maximum of complete-trial objectives, in trial order."""
        out, best = [], -math.inf
        for t in self.trials:
            if t.state == "complete":
                best = max(best, t.value)
            out.append(best)
        return out

    def optimize(self, objective: Callable[[Trial, "Study"], float], n_trials: int) -> "Study":
        """Run ``n_trials`` sequential trials.

        :class:`TrialPruned` marks a trial pruned; any other exception marks
        it failed (objective 0).  Raises if every trial failed.
        """
        for _ in range(n_trials):
            trial = self.ask()
            try:
                value = objective(trial, self)
            except TrialPruned:
                self.tell(trial, state="pruned")
            except Exception as exc:  # noqa: BLE001 - recorded, study continues
                trial.error = repr(exc)
                self.tell(trial, state="failed")
            else:
                self.tell(trial, value)
        if self.trials and all(t.state == "failed" for t in self.trials):
            raise RuntimeError("every trial failed")
        return self

    # -- persistence ---------------------------------------------------------

    @classmethod
    def load(cls, journal) -> "Study":
        """Rebuild a study by replaying its journal."""
        journal = Path(journal)
        lines = [json.loads(line) for line in journal.read_text().splitlines() if line.strip()]
        if not lines or lines[0]["event"] != "study":
            raise ValueError(f"{journal}: missing study header")
        s = lines[0]["payload"]
        pruner = HyperbandPruner(**s["pruner"]) if s["pruner"] else None
        study = cls(SearchSpace.from_dicts(s["space"]), s["seed"], pruner, s["n_startup"],
                    s["gamma"], s["n_candidates"], journal=journal, name=s["name"])
        study._replaying = True
        try:
            for rec in lines[1:]:
                ev, payload = rec["event"], rec["payload"]
                if ev == "ask":
                    study.trials.append(Trial(rec["trial"], payload["params"], bracket=payload["bracket"]))
                    continue
                trial = study.trials[rec["trial"]]
                if ev == "report":
                    study.report(trial, payload["step"], payload["value"])
                else:
                    state = {"complete": "complete", "prune": "pruned", "fail": "failed"}[ev]
                    study.tell(trial, payload["value"] if state != "pruned" else None, state)
        finally:
            study._replaying = False
        return study


def report_intermediate(trial: Trial, step: int, value: float) -> None:
    if trial.state != "running":
        raise ValueError(f"trial {trial.number} is not running")
    last = trial.last_step
    if last is not None and step <= last:
        raise ValueError(f"step {step} does not follow step {last}")
    trial.intermediate[int(step)] = float(value)


def should_prune(study: Study, trial: Trial) -> bool:
    if study.pruner is None or not trial.intermediate:
        return False
    return study.pruner.should_prune(study, trial)


def best_trial(study: Study) -> Trial:
    complete = [t for t in study.trials if t.state == "complete"]
    if not complete:
        raise ValueError("study has no complete trials")
    return max(complete, key=lambda t: (t.value, -t.number))
