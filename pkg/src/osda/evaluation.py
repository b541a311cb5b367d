"""Inference-time metrics, multi-seed aggregation, and table rendering.

Subset accuracies are macro averages over the classes inside each subset
(unknown counts as one class); the harmonic mean of the two is the
headline score.  Overall accuracy treats unknown as an extra class and is
micro-averaged over all target samples.
"""

import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .data import UNKNOWN, hidden_eval_labels
from .models import predict


def h_score(acc_known, acc_unknown):
    """Harmonic mean of the known/unknown subset accuracies; 0 when both
    are 0."""
    for v in (acc_known, acc_unknown):
        if not 0.0 <= v <= 1.0:
            raise ValueError("accuracies must be in [0,1], got %r" % (v,))
    if acc_known + acc_unknown == 0.0:
        return 0.0
    return 2.0 * acc_known * acc_unknown / (acc_known + acc_unknown)


@dataclass
class MetricsReport:
    acc: float
    acc_known: float
    acc_unknown: float
    h_score: float
    per_class_acc: list
    counts: list
    num_known: int

    def to_dict(self):
        return {
            "acc": self.acc,
            "acc_known": self.acc_known,
            "acc_unknown": self.acc_unknown,
            "h_score": self.h_score,
            "per_class_acc": self.per_class_acc,
            "counts": self.counts,
            "num_known": self.num_known,
        }


def evaluate(model, target, batch_size=256, average="macro"):
    """Score a frozen model on a relabeled target set.

    A prediction is correct iff it matches the hidden ground truth
    (compact known index, or rejection for unknown-class examples).
    `average` selects macro (per-class mean, default) or micro subset
    accuracies.
    """
    if average not in ("macro", "micro"):
        raise ValueError("average must be 'macro' or 'micro'")
    truth = hidden_eval_labels(target)  # raises if ground truth is absent
    k = model.num_known
    correct = np.zeros(k + 1)
    counts = np.zeros(k + 1)
    for start in range(0, len(target), batch_size):
        batch = target.data[start:start + batch_size]
        preds = predict(model, batch)
        for j, pred in enumerate(preds):
            true = int(truth[start + j])
            slot = k if true == UNKNOWN else true
            counts[slot] += 1
            hit = (pred.label == true
                   or (pred.label == UNKNOWN and true == UNKNOWN))
            if hit:
                correct[slot] += 1

    per_class = [correct[i] / counts[i] if counts[i] else float("nan")
                 for i in range(k + 1)]
    known_mask = counts[:k] > 0
    if average == "macro":
        acc_known = (float(np.mean(np.array(per_class[:k])[known_mask]))
                     if known_mask.any() else 0.0)
    else:
        acc_known = (float(correct[:k].sum() / counts[:k].sum())
                     if counts[:k].sum() else 0.0)
    acc_unknown = float(per_class[k]) if counts[k] else 0.0
    acc = float(correct.sum() / counts.sum()) if counts.sum() else 0.0
    return MetricsReport(acc=acc, acc_known=acc_known,
                         acc_unknown=acc_unknown,
                         h_score=h_score(acc_known, acc_unknown),
                         per_class_acc=per_class,
                         counts=[int(c) for c in counts],
                         num_known=k)


AGG_METRICS = ("acc", "acc_known", "acc_unknown", "h_score")


@dataclass
class AggregateRow:
    """Per-metric mean and sample standard deviation over seeds."""

    mean: dict
    std: dict
    n: int


def aggregate(reports):
    if not reports:
        raise ValueError("aggregate needs at least one report")
    mean, std = {}, {}
    for m in AGG_METRICS:
        vals = np.array([getattr(r, m) for r in reports], dtype=np.float64)
        mean[m] = float(vals.mean())
        std[m] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
    return AggregateRow(mean=mean, std=std, n=len(reports))


def save_metrics_json(report, path, plan_echo=None):
    payload = report.to_dict()
    if plan_echo is not None:
        payload["plan"] = plan_echo
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


@dataclass
class TableCell:
    """One (task, strategy) cell in percent units."""

    acc_mean: float
    acc_std: float
    hsc_mean: float
    hsc_std: float
    source: str = "run"


def cell_from_aggregate(agg):
    return TableCell(acc_mean=100.0 * agg.mean["acc"],
                     acc_std=100.0 * agg.std["acc"],
                     hsc_mean=100.0 * agg.mean["h_score"],
                     hsc_std=100.0 * agg.std["h_score"])


def format_value(mean, std):
    return "%.1f ± %.1f" % (mean, std)


def format_cell(cell):
    """Render a cell as 'Acc / Hsc' with one-decimal percent values."""
    return "%s / %s" % (format_value(cell.acc_mean, cell.acc_std),
                        format_value(cell.hsc_mean, cell.hsc_std))


def render_tables(grid, strategies=None, tasks=None):
    """Render a task x strategy grid of TableCells.

    Returns (csv_text, markdown_text).  The best Acc and Hsc per row are
    flagged: bolded in markdown, named in the CSV best_* columns.  Raises
    on a ragged grid, naming the missing cell.
    """
    if not grid:
        raise ValueError("empty results grid")
    tasks = list(tasks) if tasks else sorted(grid)
    if strategies is None:
        strategies = sorted({s for row in grid.values() for s in row})
    for task in tasks:
        for s in strategies:
            if s not in grid.get(task, {}):
                raise ValueError("missing cell: task %r strategy %r"
                                 % (task, s))

    csv_lines = [",".join(
        ["task"]
        + ["%s_%s" % (s, col) for s in strategies
           for col in ("acc", "acc_std", "hsc", "hsc_std")]
        + ["best_acc", "best_hsc"])]
    md_lines = ["| Task | " + " | ".join(
        "%s Acc | %s Hsc" % (s, s) for s in strategies) + " |"]
    md_lines.append("|" + "---|" * (1 + 2 * len(strategies)))

    for task in tasks:
        cells = [grid[task][s] for s in strategies]
        best_acc = max(c.acc_mean for c in cells)
        best_hsc = max(c.hsc_mean for c in cells)
        best_acc_names = [s for s, c in zip(strategies, cells)
                          if c.acc_mean == best_acc]
        best_hsc_names = [s for s, c in zip(strategies, cells)
                          if c.hsc_mean == best_hsc]
        row = [task]
        md_row = ["| %s " % task]
        for s, c in zip(strategies, cells):
            row += ["%.1f" % c.acc_mean, "%.1f" % c.acc_std,
                    "%.1f" % c.hsc_mean, "%.1f" % c.hsc_std]
            acc_txt = format_value(c.acc_mean, c.acc_std)
            hsc_txt = format_value(c.hsc_mean, c.hsc_std)
            if c.acc_mean == best_acc:
                acc_txt = "**%s**" % acc_txt
            if c.hsc_mean == best_hsc:
                hsc_txt = "**%s**" % hsc_txt
            md_row.append("| %s | %s " % (acc_txt, hsc_txt))
        row += ["+".join(best_acc_names), "+".join(best_hsc_names)]
        csv_lines.append(",".join(row))
        md_lines.append("".join(md_row) + "|")
    return "\n".join(csv_lines) + "\n", "\n".join(md_lines) + "\n"


def write_tables(grid, out_dir, stem="results", strategies=None, tasks=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_text, md_text = render_tables(grid, strategies=strategies,
                                      tasks=tasks)
    (out_dir / ("%s.csv" % stem)).write_text(csv_text)
    (out_dir / ("%s.md" % stem)).write_text(md_text)
    return csv_text, md_text


def load_reference_fixtures(name):
    """Published reference numbers (percent), for table rendering only.

    `name` is 'office31' or 'office_home'.  Every row is tagged
    source=paper; these are not run results and never acceptance targets.
    """
    ref = resources.files("osda.fixtures").joinpath("%s.csv" % name)
    grid = {}
    with ref.open() as f:
        for row in csv.DictReader(f):
            cell = TableCell(acc_mean=float(row["acc_mean"]),
                             acc_std=float(row["acc_std"]),
                             hsc_mean=float(row["hsc_mean"]),
                             hsc_std=float(row["hsc_std"]),
                             source=row["source"])
            grid.setdefault(row["task"], {})[row["strategy"]] = cell
    return grid
