import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from synthcas.hpo import (
    HyperbandPruner, Param, ParzenEstimator, SearchSpace, Study, Trial, TrialPruned, best_trial,
    report_intermediate, sampler_space, should_prune, split_good_bad, tpe_suggest,
)


def unit_space():
    return SearchSpace((Param("x", 0.0, 1.0),))


# -- search space ------------------------------------------------------------------

def test_sampler_space_bounds():
    space = sampler_space()
    assert (space["IS"].low, space["IS"].high, space["IS"].kind) == (5, 50, "int")
    assert (space["UGS"].low, space["UGS"].high) == (0.0, 7.5)
    assert (space["epoch"].low, space["epoch"].high) == (1, 50)


def test_space_invariants():
    with pytest.raises(ValueError):
        Param("a", 2, 1)
    with pytest.raises(ValueError):
        SearchSpace((Param("a", 0, 1), Param("a", 0, 2)))


# -- TPE ----------------------------------------------------------------------------

def test_startup_draw_uniform_within_bounds():
    study = Study(sampler_space(), seed=3)
    for _ in range(10):
        p = study.ask().params
        assert study.space.contains(p)


def test_empty_space_rejected():
    with pytest.raises(ValueError):
        tpe_suggest(Study(SearchSpace(()), seed=0))


def test_good_set_size_oracle():
    trials = [Trial(i, {"x": i / 10}, "complete", value=float(i)) for i in range(10)]
    good, bad = split_good_bad(trials, 0.25)
    assert len(good) == math.ceil(0.25 * 10) == 3
    assert [t.value for t in good] == [9.0, 8.0, 7.0]
    assert len(bad) == 7


def test_pruned_rank_below_complete():
    trials = [Trial(0, {}, "pruned", {1: 0.99}), Trial(1, {}, "complete", value=0.1),
              Trial(2, {}, "failed", value=0.0)]
    good, bad = split_good_bad(trials, 0.25)
    assert [t.number for t in good] == [1]
    assert [t.number for t in bad] == [2, 0]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.integers(0, 30))
def test_suggestions_in_bounds_and_integral(seed, n_done):
    study = Study(sampler_space(), seed=seed)
    rng = np.random.default_rng(seed)
    for _ in range(n_done):
        t = study.ask()
        study.tell(t, float(rng.uniform()))
    p = study.ask().params
    assert study.space.contains(p)
    assert isinstance(p["IS"], int) and isinstance(p["epoch"], int)


def test_suggest_deterministic():
    def run(seed):
        s = Study(unit_space(), seed=seed)
        s.optimize(lambda t, _: -(t.params["x"] - 0.3) ** 2, 15)
        return [t.params["x"] for t in s.trials]
    assert run(1) == run(1)
    assert run(1) != run(2)


def test_parzen_density_normalised():
    est = ParzenEstimator.fit([0.2, 0.25, 0.9], 0.0, 1.0)
    xs = np.linspace(0, 1, 4001)
    assert np.trapezoid(np.exp(est.log_pdf(xs)), xs) == pytest.approx(1.0, abs=1e-3)
    draws = est.sample(np.random.default_rng(0), 500)
    assert draws.min() >= 0 and draws.max() <= 1


def _best_of(values):
    return max(values)


def test_tpe_beats_random_search_median():
    f = lambda x: -(x - 0.3) ** 2
    tpe, rnd = [], []
    for seed in range(10):
        study = Study(unit_space(), seed=seed)
        study.optimize(lambda t, _: f(t.params["x"]), 50)
        tpe.append(study.best_trial.value)
        xs = np.random.default_rng([seed, 99]).uniform(0, 1, 50)
        rnd.append(_best_of(f(xs)))
    assert np.median(tpe) >= np.median(rnd)


# -- intermediate reports ------------------------------------------------------------

def test_report_order_enforced():
    t = Trial(0, {})
    report_intermediate(t, 1, 0.5)
    assert t.intermediate == {1: 0.5}
    with pytest.raises(ValueError):
        report_intermediate(t, 1, 0.6)
    with pytest.raises(ValueError):
        report_intermediate(t, 0, 0.6)


def test_hundred_reports_in_order():
    t = Trial(0, {})
    for k in range(1, 101):
        report_intermediate(t, k, k / 100)
    assert list(t.intermediate) == list(range(1, 101))
    assert list(t.intermediate.values()) == [k / 100 for k in range(1, 101)]


def test_report_requires_running():
    t = Trial(0, {}, state="complete", value=1.0)
    with pytest.raises(ValueError):
        report_intermediate(t, 1, 0.1)


# -- Hyperband -------------------------------------------------------------------------

def test_rungs():
    assert HyperbandPruner(1, 100, 3).rung_resources() == [1, 3, 9, 27, 81]
    assert HyperbandPruner(1, 100, 3).rung_resources(2) == [9, 27, 81]
    assert HyperbandPruner(1, 100, 3).n_brackets == 5


def test_first_trial_never_pruned():
    study = Study(unit_space(), pruner=HyperbandPruner(1, 9, 3))
    t = study.ask()
    t.bracket = 0
    study.report(t, 1, 0.0)
    assert not study.should_prune(t)


def test_quantile_rule_oracle():
    study = Study(unit_space(), pruner=HyperbandPruner(1, 9, 3))
    trials = []
    for v in (0.5, 0.9, 0.1):
        t = study.ask()
        t.bracket = 0
        study.report(t, 1, v)
        trials.append(t)
    # three values at the rung: keep the top 1/3 (0.9); 0.1 falls below
    assert study.should_prune(trials[2])
    assert not study.should_prune(trials[1])
    # the earlier 0.5 saw only two values at the rung: startup regime
    assert not study.should_prune(trials[0])


def test_never_prunes_below_eta_values():
    study = Study(unit_space(), pruner=HyperbandPruner(1, 27, 3))
    a, b = study.ask(), study.ask()
    a.bracket = b.bracket = 0
    study.report(a, 1, 0.9)
    study.report(b, 1, 0.0)
    assert not study.should_prune(b)


def test_off_rung_steps_not_pruned():
    study = Study(unit_space(), pruner=HyperbandPruner(1, 27, 3))
    ts = [study.ask() for _ in range(4)]
    for i, t in enumerate(ts):
        t.bracket = 0
        study.report(t, 2, float(i))
    assert not any(study.should_prune(t) for t in ts)


def test_no_pruner_never_prunes():
    study = Study(unit_space())
    t = study.ask()
    study.report(t, 1, 0.0)
    assert not should_prune(study, t)


def test_bracket_assignment_deterministic():
    hb = HyperbandPruner(1, 81, 3)
    assert [hb.assign_bracket(0, i) for i in range(20)] == [hb.assign_bracket(0, i) for i in range(20)]
    assert all(0 <= hb.assign_bracket(5, i) < hb.n_brackets for i in range(100))


# -- best trial and study lifecycle ---------------------------------------------------------

def test_best_trial_rules():
    study = Study(unit_space())
    t = study.ask()
    study.tell(t, 0.3)
    assert best_trial(study) is t
    for v in (0.9, 0.9):
        study.tell(study.ask(), v)
    assert study.best_trial.number == 1
    with pytest.raises(ValueError):
        best_trial(Study(unit_space()))


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=30), st.integers(0, 1000))
def test_best_trial_scan_oracle_and_monotone_best_so_far(values, seed):
    study = Study(unit_space(), seed=seed)
    for v in values:
        study.tell(study.ask(), v)
    best_v, best_n = -math.inf, None
    for t in study.trials:
        if t.value > best_v:
            best_v, best_n = t.value, t.number
    assert study.best_trial.number == best_n
    curve = study.best_so_far()
    assert all(b >= a for a, b in zip(curve, curve[1:]))


def test_tell_state_contracts():
    study = Study(unit_space())
    t = study.ask()
    with pytest.raises(ValueError):
        study.tell(t, None, "complete")
    with pytest.raises(ValueError):
        study.tell(t, state="pruned")  # no intermediate values yet
    study.tell(t, 0.2)
    with pytest.raises(ValueError):
        study.tell(t, 0.3)


def test_optimize_handles_pruned_and_failed():
    study = Study(unit_space(), pruner=HyperbandPruner(1, 9, 3))

    def objective(trial, study):
        if trial.number == 1:
            raise RuntimeError("boom")
        study.report(trial, 1, trial.params["x"])
        if trial.number == 2:
            raise TrialPruned()
        return trial.params["x"]

    study.optimize(objective, 5)
    states = [t.state for t in study.trials]
    assert states[1] == "failed" and study.trials[1].value == 0.0
    assert states[2] == "pruned"
    assert states.count("complete") == 3


def test_optimize_all_failed_raises():
    def objective(trial, study):
        raise RuntimeError("always")
    with pytest.raises(RuntimeError, match="every trial failed"):
        Study(unit_space()).optimize(objective, 3)


def test_journal_append_only_and_replay(tmp_path):
    path = tmp_path / "journal.jsonl"
    study = Study(sampler_space(), seed=4, pruner=HyperbandPruner(1, 9, 3), journal=path, name="s")

    def objective(trial, study):
        for step in range(1, 10):
            study.report(trial, step, trial.params["UGS"] / 7.5 * step / 9)
            if study.should_prune(trial):
                raise TrialPruned()
        if trial.params["IS"] > 45:
            raise RuntimeError("too slow")
        return trial.params["UGS"]

    study.optimize(objective, 14)
    lines = path.read_text().splitlines()
    assert json.loads(lines[0])["event"] == "study"
    for line in lines:
        rec = json.loads(line)
        assert set(rec) == {"trial", "event", "payload", "timestamp"}
    replay = Study.load(path)
    assert path.read_text().splitlines() == lines  # replay does not append
    assert [(t.number, t.params, t.state, t.intermediate, t.value, t.bracket) for t in replay.trials] == \
        [(t.number, t.params, t.state, t.intermediate, t.value, t.bracket) for t in study.trials]
    # the replayed study continues with the same suggestion
    assert replay.ask().params == tpe_suggest(study)


def test_journal_missing_header(tmp_path):
    p = tmp_path / "j.jsonl"
    p.write_text(json.dumps({"trial": 0, "event": "ask", "payload": {}, "timestamp": 0}) + "\n")
    with pytest.raises(ValueError):
        Study.load(p)
