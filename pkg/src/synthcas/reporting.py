"""CSV tables and the importance chart for a run directory."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

from .evaluation import CASReport
from .importance import ImportanceReport, read_importance_csv, write_importance_csv

STAGES = ("After 1.", "After 2.", "After 3.", "After 4.")
TABLE1_HEADER = (["Dataset"] + [f"CAS {s}" for s in STAGES] + [f"Time {s}" for s in STAGES]
                 + [f"Evals {s}" for s in STAGES])


class IncompleteRunError(RuntimeError):
    def __init__(self, run_dir, missing: list[str]):
        self.missing = missing
        super().__init__(f"{run_dir}: missing {', '.join(missing)}")


def table2_header(factors: Sequence[int]) -> list[str]:
    return ["Dataset", "Real"] + [f"x{k}" for k in factors]


def write_table1(path, dataset: str, stages) -> Path:
    """One row per dataset; CAS in [0,1], times in seconds, denoiser forward evaluations.

    Generation time is re-measured after every stage, including stage 3.
    """
    if len(stages) != 4:
        raise ValueError("table 1 needs exactly four stage results")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TABLE1_HEADER)
        w.writerow([dataset] + [f"{s.cas:.6f}" for s in stages] + [f"{s.seconds:.6f}" for s in stages]
                   + [str(s.forward_evals) for s in stages])
    return path


def read_table1(path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TABLE1_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return {row["Dataset"]: {k: float(v) for k, v in row.items() if k != "Dataset"} for row in reader}


def write_table2(path, reports: list[CASReport], factors: Sequence[int]) -> Path:
    """Dataset, Real, x1..xK accuracies in [0,1]."""
    by_label = {r.label: r for r in reports}
    labels = ["Real"] + [f"x{k}" for k in factors]
    missing = [lab for lab in labels if lab not in by_label]
    if missing:
        raise ValueError(f"missing sweep rows: {missing}")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(table2_header(factors))
        w.writerow([reports[0].dataset] + [f"{by_label[lab].accuracy:.6f}" for lab in labels])
    return path


def read_table2(path) -> dict[str, dict[str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if header[:2] != ["Dataset", "Real"] or not all(h.startswith("x") for h in header[2:]):
            raise ValueError(f"{path}: unexpected header {header}")
        return {row["Dataset"]: {k: float(v) for k, v in row.items() if k != "Dataset"} for row in reader}


def read_importance_reports(run_dir) -> list[ImportanceReport]:
    out = []
    for k in (2, 4):
        p = Path(run_dir) / f"stage{k}" / "importance.csv"
        if p.is_file():
            out.extend(read_importance_csv(p))
    return out


def plot_importance(reports: list[ImportanceReport], path) -> Path:
    """Grouped bars: one group per parameter or interaction, one bar per stage."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups: list[str] = []
    for r in reports:
        for name, _, _ in r.rows():
            if name not in groups:
                groups.append(name)
    values = np.array([[dict((n, f) for n, f, _ in r.rows()).get(g, 0.0) for g in groups] for r in reports])
    x = np.arange(len(groups))
    width = 0.8 / max(len(reports), 1)
    fig, ax = plt.subplots(figsize=(1.2 * len(groups) + 2, 3.5))
    for i, r in enumerate(reports):
        ax.bar(x + (i - (len(reports) - 1) / 2) * width, values[i], width, label=r.stage)
    ax.set_xticks(x, groups)
    ax.set_ylabel("importance")
    ax.set_ylim(0, 1)
    if reports:
        ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path


def build_report(run_dir, out_dir=None) -> dict[str, Path]:
    """Collect ``table1.csv``, ``table2.csv``, ``importance.csv`` and ``importance.png``."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    needed = {
        "table1": run_dir / "table1.csv",
        "table2": run_dir / "final" / "table2.csv",
        "importance(stage2)": run_dir / "stage2" / "importance.csv",
        "importance(stage4)": run_dir / "stage4" / "importance.csv",
    }
    missing = [str(p.relative_to(run_dir)) for p in needed.values() if not p.is_file()]
    if missing:
        raise IncompleteRunError(run_dir, missing)
    out_dir.mkdir(parents=True, exist_ok=True)
    t1 = out_dir / "table1.csv"
    t2 = out_dir / "table2.csv"
    for src, dst in ((needed["table1"], t1), (needed["table2"], t2)):
        if src.resolve() != dst.resolve():
            dst.write_text(src.read_text())
    read_table1(t1)
    read_table2(t2)
    reports = read_importance_reports(run_dir)
    imp = write_importance_csv(reports, out_dir / "importance.csv")
    png = plot_importance(reports, out_dir / "importance.png")
    return {"table1": t1, "table2": t2, "importance": imp, "chart": png}
