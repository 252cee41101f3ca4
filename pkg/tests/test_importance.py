import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.tree import DecisionTreeRegressor

from synthcas.hpo import Param, SearchSpace, Study, sampler_space
from synthcas.importance import (
    ImportanceReport, fanova_from_data, fanova_importance, mean_importance, read_importance_csv,
    tree_variance_decomposition, write_importance_csv,
)

SPACE2 = SearchSpace((Param("x1", 0.0, 1.0), Param("x2", 0.0, 1.0)))


def _sample(f, n=200, seed=0):
    X = np.random.default_rng(seed).uniform(0, 1, (n, 2))
    return X, f(X)


def test_single_relevant_parameter():
    X, y = _sample(lambda X: X[:, 0])
    rep = fanova_from_data(X, y, SPACE2)
    assert rep.individual["x1"] >= 0.9
    assert rep.individual["x2"] <= 0.05


def test_additive_symmetry():
    X, y = _sample(lambda X: X[:, 0] + X[:, 1], n=400)
    rep = fanova_from_data(X, y, SPACE2)
    assert abs(rep.individual["x1"] - rep.individual["x2"]) <= 0.1


def test_constant_objective_all_zero():
    X, _ = _sample(lambda X: X[:, 0])
    rep = fanova_from_data(X, np.full(len(X), 0.7), SPACE2)
    assert all(v == 0.0 for v in rep.individual.values())
    assert all(v == 0.0 for v in rep.pairwise.values())


def test_pure_interaction_goes_to_pair():
    X, y = _sample(lambda X: np.sign(X[:, 0] - 0.5) * np.sign(X[:, 1] - 0.5), n=600)
    rep = fanova_from_data(X, y, SPACE2)
    assert rep.pairwise[("x1", "x2")] > 0.7


def test_tree_decomposition_sums_to_total():
    """For a single tree with two features, main effects plus the pair explain all variance."""
    X, y = _sample(lambda X: np.sin(6 * X[:, 0]) * X[:, 1] + X[:, 1] ** 2, n=300)
    tree = DecisionTreeRegressor(max_depth=6, random_state=0).fit(X, y)
    total, main, pairs = tree_variance_decomposition(tree, [(0, 1), (0, 1)])
    assert main[0] + main[1] + pairs[(0, 1)] == pytest.approx(total, rel=1e-9)


def test_tree_decomposition_brute_force_oracle():
    """Compare against a fine midpoint grid evaluation of the same tree."""
    X, y = _sample(lambda X: X[:, 0] ** 2 + 0.3 * X[:, 1], n=200, seed=5)
    tree = DecisionTreeRegressor(max_depth=4, random_state=0).fit(X, y)
    total, main, _ = tree_variance_decomposition(tree, [(0, 1), (0, 1)])
    g = (np.arange(2000) + 0.5) / 2000
    # cut points of a depth-4 tree are data midpoints, so a 2000-point grid nearly resolves them
    grid = tree.predict(np.stack(np.meshgrid(g, g, indexing="ij"), -1).reshape(-1, 2)).reshape(2000, 2000)
    assert grid.var() == pytest.approx(total, rel=2e-2)
    assert grid.mean(axis=1).var() == pytest.approx(main[0], rel=2e-2)
    assert grid.mean(axis=0).var() == pytest.approx(main[1], rel=2e-2)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10**6))
def test_fractions_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(0, 1, (40, 2))
    y = rng.normal(size=40)
    rep = fanova_from_data(X, y, SPACE2, n_trees=8, seed=seed)
    vals = list(rep.individual.values()) + list(rep.pairwise.values())
    assert all(0 <= v <= 1 for v in vals)
    assert rep.total() <= 1 + 1e-6


def test_study_requires_enough_trials():
    study = Study(sampler_space(), seed=0)
    for _ in range(5):
        study.tell(study.ask(), 0.5)
    with pytest.raises(ValueError):
        fanova_importance(study)
    study.tell(study.ask(), 0.4)
    rep = fanova_importance(study, stage="stage2", n_trees=8)
    assert set(rep.individual) == {"IS", "UGS", "epoch"}
    assert len(rep.pairwise) == 3


def test_study_integer_params_use_relaxed_bounds():
    study = Study(sampler_space(), seed=1)
    for _ in range(30):
        t = study.ask()
        study.tell(t, t.params["UGS"] / 7.5)
    rep = fanova_importance(study, n_trees=16)
    assert max(rep.individual, key=rep.individual.get) == "UGS"


def test_csv_round_trip_and_mean(tmp_path):
    a = ImportanceReport("stage2", {"IS": 0.1, "UGS": 0.6}, {("IS", "UGS"): 0.2})
    b = ImportanceReport("stage4", {"IS": 0.3, "UGS": 0.4}, {("IS", "UGS"): 0.1})
    path = write_importance_csv([a, b], tmp_path / "importance.csv")
    assert path.read_text().splitlines()[0] == "parameter,fraction,stage"
    back = read_importance_csv(path)
    assert [r.stage for r in back] == ["stage2", "stage4"]
    assert back[0].individual == a.individual and back[0].pairwise == a.pairwise
    m = mean_importance(back)
    assert m.individual["UGS"] == pytest.approx(0.5)
    assert m.pairwise[("IS", "UGS")] == pytest.approx(0.15)
    with pytest.raises(ValueError):
        mean_importance([])


def test_csv_rejects_bad_header(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("a,b,c\n")
    with pytest.raises(ValueError):
        read_importance_csv(p)
