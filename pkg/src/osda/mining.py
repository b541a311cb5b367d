"""Extraction of high-confidence unknowns from the target domain.

A frozen model snapshot scores every target example with the rejection
score 1 - p_o(pseudo-label); examples strictly above the threshold form
the negative set used by the boundary-tightening strategies.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import data as datamod

DEFAULT_THRESHOLD = 0.9


@dataclass
class NegativeSet:
    """High-confidence unknowns with their scores and pseudo-labels.

    `data` caches the selected examples as a stacked tensor so providers
    can re-read them cheaply.
    """

    indices: list
    scores: list
    pseudo_labels: list
    threshold: float
    source_iteration: int
    dataset_name: str
    data: torch.Tensor = field(default=None, repr=False)

    def __len__(self):
        return len(self.indices)


def rejection_scores(model, target, batch_size=256):
    """Per-example (rejection_score, pseudo_label) over the whole dataset.

    Label-blind: only the data tensor is read.
    """
    scores, pseudo = [], []
    with torch.no_grad():
        for start in range(0, len(target), batch_size):
            batch = target.data[start:start + batch_size]
            closed, open_known = model(batch)
            labels = closed.argmax(dim=1)
            p_known = open_known.gather(1, labels.view(-1, 1)).squeeze(1)
            scores.append(1.0 - p_known)
            pseudo.append(labels)
    if not scores:
        return torch.empty(0), torch.empty(0, dtype=torch.long)
    return torch.cat(scores), torch.cat(pseudo)


def extract_negatives(model, target, threshold=DEFAULT_THRESHOLD,
                      batch_size=256, source_iteration=0):
    """Select target examples with rejection score strictly above threshold.

    Output preserves dataset order; an empty result is a valid (empty)
    NegativeSet, policy for it belongs to the caller.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0,1), got %r" % threshold)
    scores, pseudo = rejection_scores(model, target, batch_size)
    keep = [i for i in range(len(target)) if float(scores[i]) > threshold]
    return NegativeSet(
        indices=keep,
        scores=[float(scores[i]) for i in keep],
        pseudo_labels=[int(pseudo[i]) for i in keep],
        threshold=threshold,
        source_iteration=source_iteration,
        dataset_name=target.name,
        data=target.data[keep].clone() if keep
        else torch.empty((0,) + target.sample_shape),
    )


def save_manifest(negs, path):
    with open(path, "w", newline="") as f:
        f.write("# dataset=%s\n" % negs.dataset_name)
        f.write("# threshold=%r\n" % negs.threshold)
        f.write("# source_iteration=%d\n" % negs.source_iteration)
        w = csv.writer(f)
        w.writerow(["example_index", "rejection_score", "pseudo_label"])
        for i, s, p in zip(negs.indices, negs.scores, negs.pseudo_labels):
            w.writerow([i, "%.8g" % s, p])


def load_manifest(path, target=None):
    """Read a manifest back; pass the target dataset to rebuild the cache."""
    meta = {}
    rows = []
    with open(path, newline="") as f:
        for line in f:
            if line.startswith("#"):
                k, v = line[1:].strip().split("=", 1)
                meta[k] = v
                continue
            rows.append(line)
    parsed = list(csv.reader(rows))
    body = parsed[1:]
    indices = [int(r[0]) for r in body]
    negs = NegativeSet(
        indices=indices,
        scores=[float(r[1]) for r in body],
        pseudo_labels=[int(r[2]) for r in body],
        threshold=float(meta["threshold"]),
        source_iteration=int(meta["source_iteration"]),
        dataset_name=meta["dataset"],
    )
    if target is not None:
        negs.data = (target.data[indices].clone() if indices
                     else torch.empty((0,) + target.sample_shape))
    return negs


@dataclass
class StatsRow:
    subset: str
    count: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    mean: float


def _stats(subset, values):
    if len(values) == 0:
        nan = float("nan")
        return StatsRow(subset, 0, nan, nan, nan, nan, nan, nan)
    v = np.asarray(values, dtype=np.float64)
    return StatsRow(subset, len(v), float(v.min()),
                    float(np.quantile(v, 0.25)), float(np.quantile(v, 0.5)),
                    float(np.quantile(v, 0.75)), float(v.max()),
                    float(v.mean()))


def rejection_score_stats(model, target, batch_size=256):
    """Boxplot-ready rejection-score summaries per true subset.

    Evaluation-only diagnostic: needs the hidden ground truth, which
    extraction itself never touches.
    """
    truth = datamod.hidden_eval_labels(target)
    scores, _ = rejection_scores(model, target, batch_size)
    scores = scores.numpy()
    known = scores[(truth != datamod.UNKNOWN).numpy()]
    unknown = scores[(truth == datamod.UNKNOWN).numpy()]
    return [_stats("true-known", known), _stats("true-unknown", unknown)]


def save_stats_csv(rows, path):
    def fmt(x):
        return "NaN" if isinstance(x, float) and math.isnan(x) else "%.6g" % x

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["subset", "count", "min", "q1", "median", "q3", "max",
                    "mean"])
        for r in rows:
            w.writerow([r.subset, r.count, fmt(r.min), fmt(r.q1),
                        fmt(r.median), fmt(r.q3), fmt(r.max), fmt(r.mean)])
