"""
TPE, Hyperband and fANOVA on cheap functions
=============================================

The same search machinery that tunes (IS, UGS, epoch) in the pipeline,
exercised on functions whose answers are known.
"""

import numpy as np
from synthcas import HyperbandPruner, Param, SearchSpace, Study, TrialPruned, fanova_from_data

space = SearchSpace([Param("x", 0.0, 1.0)])
f = lambda x: -(x - 0.3) ** 2

# 50 trials: 10 uniform startup draws, then TPE proposals
study = Study(space, seed=0)
study.optimize(lambda t, _: f(t.params["x"]), 50)
print("TPE best x:", round(study.best_trial.params["x"], 4))
print("random best x:", round(min(np.random.default_rng(0).uniform(0, 1, 50), key=lambda x: -f(x)), 4))

# learning curves reported at rungs 1, 3, 9; weak arms stop early
arms = np.random.default_rng(1).uniform(0, 1, 20)
hb = Study(space, seed=1, pruner=HyperbandPruner(1, 9, 3))


def objective(trial, study):
    arm = arms[trial.number]
    for step in (1, 3, 9):
        study.report(trial, step, arm * (1 - np.exp(-step / 3)))
        if study.should_prune(trial):
            raise TrialPruned()
    return arm * (1 - np.exp(-3))


hb.optimize(objective, len(arms))
states = [t.state for t in hb.trials]
print(f"pruned {states.count('pruned')}/{len(states)}, best arm kept: {states[int(arms.argmax())]}")

# only x1 matters here
two = SearchSpace([Param("x1", 0.0, 1.0), Param("x2", 0.0, 1.0)])
X = np.random.default_rng(2).uniform(0, 1, (200, 2))
rep = fanova_from_data(X, np.sin(3 * X[:, 0]), two)
print({k: round(v, 3) for k, v in rep.individual.items()}, rep.pairwise)
