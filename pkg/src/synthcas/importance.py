"""Functional-ANOVA hyper-parameter importance.

A random-forest surrogate is fitted to (parameters -> objective).  Each tree
is piecewise constant on a grid of axis-aligned cells, so its functional
ANOVA decomposition under the uniform measure on the search box can be
computed exactly from the cell values and widths.  Fractions are averaged
over trees with non-zero variance.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.ensemble import RandomForestRegressor

from .hpo import SearchSpace, Study


@dataclass
class ImportanceReport:
    stage: str
    individual: dict[str, float]
    pairwise: dict[tuple[str, str], float] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, float, str]]:
        out = [(name, frac, self.stage) for name, frac in self.individual.items()]
        out += [(f"{a}:{b}", frac, self.stage) for (a, b), frac in self.pairwise.items()]
        return out

    def total(self) -> float:
        return sum(self.individual.values()) + sum(self.pairwise.values())


def _tree_cells(tree, dim: int, bounds):
    """Cell midpoints and normalised widths along each dimension."""
    feature, threshold = tree.tree_.feature, tree.tree_.threshold
    mids, widths = [], []
    for d in range(dim):
        lo, hi = bounds[d]
        cuts = np.unique(threshold[feature == d])
        cuts = cuts[(cuts > lo) & (cuts < hi)]
        edges = np.concatenate([[lo], cuts, [hi]])
        mids.append((edges[:-1] + edges[1:]) / 2)
        widths.append(np.diff(edges) / (hi - lo))
    return mids, widths


def tree_variance_decomposition(tree, bounds):
    """Return ``(total_variance, {i: V_i}, {(i, j): V_ij})`` for one fitted tree."""
    dim = len(bounds)
    mids, widths = _tree_cells(tree, dim, bounds)
    grid = np.stack(np.meshgrid(*mids, indexing="ij"), axis=-1).reshape(-1, dim)
    values = tree.predict(grid).reshape([len(m) for m in mids])
    weight = widths[0]
    for w in widths[1:]:
        weight = np.multiply.outer(weight, w)
    f0 = float((values * weight).sum())
    total = float((((values - f0) ** 2) * weight).sum())

    def marginal(keep):
        axes = tuple(a for a in range(dim) if a not in keep)
        # weighted mean over the dropped axes
        m = values
        for a in sorted(axes, reverse=True):
            m = np.tensordot(m, widths[a], axes=([a], [0]))
        return m

    main, effects = {}, {}
    for i in range(dim):
        fi = marginal((i,)) - f0
        effects[i] = fi
        main[i] = float((fi**2 * widths[i]).sum())
    pairs = {}
    for i, j in itertools.combinations(range(dim), 2):
        fij = marginal((i, j)) - effects[i][:, None] - effects[j][None, :] - f0
        pairs[(i, j)] = float((fij**2 * np.multiply.outer(widths[i], widths[j])).sum())
    return total, main, pairs


def fanova_importance(study: Study, stage: str = "", n_trees: int = 64, max_depth: int = 64,
                      seed: int = 0) -> ImportanceReport:
    """Variance fractions of each parameter and each pair from the complete trials."""
    space = study.space
    complete = [t for t in study.trials if t.state == "complete"]
    if len(complete) < 2 * len(space):
        raise ValueError(f"need at least {2 * len(space)} complete trials, have {len(complete)}")
    X = np.array([[t.params[n] for n in space.names] for t in complete], dtype=np.float64)
    y = np.array([t.value for t in complete], dtype=np.float64)
    return fanova_from_data(X, y, space, stage, n_trees, max_depth, seed)


def fanova_from_data(X, y, space: SearchSpace, stage: str = "", n_trees: int = 64,
                     max_depth: int = 64, seed: int = 0) -> ImportanceReport:
    names = space.names
    dim = len(names)
    if np.ptp(y) == 0:
        return ImportanceReport(
            stage, {n: 0.0 for n in names},
            {(names[i], names[j]): 0.0 for i, j in itertools.combinations(range(dim), 2)},
        )
    bounds = []
    for p in space.params:
        lo, hi = p.relaxed_bounds
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        bounds.append((lo, hi))
    forest = RandomForestRegressor(n_estimators=n_trees, max_depth=max_depth, random_state=seed)
    forest.fit(X, y)
    main_sum = np.zeros(dim)
    pair_sum = {pair: 0.0 for pair in itertools.combinations(range(dim), 2)}
    used = 0
    for tree in forest.estimators_:
        total, main, pairs = tree_variance_decomposition(tree, bounds)
        if total <= 0:
            continue
        used += 1
        for i in range(dim):
            main_sum[i] += main[i] / total
        for pair in pair_sum:
            pair_sum[pair] += pairs[pair] / total
    used = max(used, 1)
    individual = {names[i]: float(np.clip(main_sum[i] / used, 0, 1)) for i in range(dim)}
    pairwise = {(names[i], names[j]): float(np.clip(v / used, 0, 1)) for (i, j), v in pair_sum.items()}
    return ImportanceReport(stage, individual, pairwise)


def mean_importance(reports: list[ImportanceReport], stage: str = "mean") -> ImportanceReport:
    """Plain mean of per-study fractions (keys taken from the first report)."""
    if not reports:
        raise ValueError("no reports to average")
    individual = {k: float(np.mean([r.individual.get(k, 0.0) for r in reports]))
                  for k in reports[0].individual}
    pairwise = {k: float(np.mean([r.pairwise.get(k, 0.0) for r in reports]))
                for k in reports[0].pairwise}
    return ImportanceReport(stage, individual, pairwise)


IMPORTANCE_HEADER = ["parameter", "fraction", "stage"]


def write_importance_csv(reports: list[ImportanceReport], path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(IMPORTANCE_HEADER)
        for r in reports:
            for name, frac, stage in r.rows():
                w.writerow([name, f"{frac:.6f}", stage])
    return path


def read_importance_csv(path) -> list[ImportanceReport]:
    by_stage: dict[str, ImportanceReport] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != IMPORTANCE_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            rep = by_stage.setdefault(row["stage"], ImportanceReport(row["stage"], {}, {}))
            name, frac = row["parameter"], float(row["fraction"])
            if ":" in name:
                a, b = name.split(":", 1)
                rep.pairwise[(a, b)] = frac
            else:
                rep.individual[name] = frac
    return list(by_stage.values())
