"""Seen / locally-unseen / globally-unseen accuracy with cluster-to-class matching."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .data import ClassTaxonomy, Dataset
from .numerics import ConfigurationError, Model, forward

METRIC_COLUMNS = ("round", "acc_all", "acc_seen", "acc_lu", "acc_gu", "acc_au", "lu_gu_gap")


def confusion(model: Model, test: Dataset) -> np.ndarray:
    """Integer counts, rows = true class, columns = argmax of the classifier output."""
    if len(test) == 0:
        raise ConfigurationError("empty test set")
    _, logits = forward(model, test.features)
    return confusion_from_predictions(test.labels, logits.argmax(1), model.num_classes)


def confusion_from_predictions(truth, predicted, num_labels: int) -> np.ndarray:
    truth = np.asarray(truth, dtype=int)
    predicted = np.asarray(predicted, dtype=int)
    rows = max(num_labels, int(truth.max()) + 1)
    cm = np.zeros((rows, num_labels), dtype=np.int64)
    np.add.at(cm, (truth, predicted), 1)
    return cm


def hungarian_match(sub_confusion, classes: Sequence[int] | None = None,
                    labels: Sequence[int] | None = None) -> tuple[dict[int, int], float]:
    """Max-weight injective matching of classes (rows) to candidate labels (columns).

    Returns ``(matching, matched_accuracy)`` where accuracy is matched count
    over the total count in ``sub_confusion``. Rows left without a column score 0.
    """
    sub = np.asarray(sub_confusion)
    n_rows, n_cols = sub.shape
    classes = list(range(n_rows)) if classes is None else list(classes)
    labels = list(range(n_cols)) if labels is None else list(labels)
    total = sub.sum()
    if n_rows == 0 or n_cols == 0:
        return {}, 0.0
    r, c = _canonical_assignment(sub)
    matching = {classes[i]: labels[j] for i, j in zip(r, c) if j < n_cols}
    matched = sum(sub[i, j] for i, j in zip(r, c) if j < n_cols)
    return matching, float(matched / total) if total else 0.0


def _canonical_assignment(sub: np.ndarray):
    """Optimal assignment whose per-row hit vector is lexicographically largest.

    Several assignments can tie on the total; picking among them by hit values
    (never by column position) makes per-class results independent of how the
    columns are labeled. Rows are padded with zero columns so a row may go unmatched.
    """
    n_rows, n_cols = sub.shape
    w = np.concatenate([sub, np.zeros((n_rows, max(n_rows - n_cols, 0)))], 1).astype(np.float64)
    big = float(w.sum()) + 1.0
    allowed = np.ones_like(w, dtype=bool)
    for i in range(n_rows):
        # total first, then row i's own hit; earlier rows are pinned to their hit values
        score = np.where(allowed, w * big, -big * big)
        score[i] += w[i]
        r, c = linear_sum_assignment(score, maximize=True)
        allowed[i] = w[i] == w[i, c[i]]
    r, c = linear_sum_assignment(np.where(allowed, w, -big), maximize=True)
    return r, c


def greedy_match(sub_confusion, classes=None, labels=None) -> tuple[dict[int, int], float]:
    """Collision rule by hand: the class with the biggest peak takes its label first,
    a loser falls back to its next-largest free label."""
    sub = np.asarray(sub_confusion)
    classes = list(range(sub.shape[0])) if classes is None else list(classes)
    labels = list(range(sub.shape[1])) if labels is None else list(labels)
    order = sorted(range(sub.shape[0]), key=lambda i: (-sub[i].max(initial=0), i))
    taken: set[int] = set()
    matching, matched = {}, 0
    for i in order:
        for j in sorted(range(sub.shape[1]), key=lambda j: (-sub[i, j], j)):
            if j not in taken:
                taken.add(j)
                matching[classes[i]] = labels[j]
                matched += sub[i, j]
                break
    total = sub.sum()
    return matching, float(matched / total) if total else 0.0


@dataclass
class MetricsReport:
    acc_all: float
    acc_seen: float | None
    acc_lu: float | None
    acc_gu: float | None
    acc_au: float | None
    lu_gu_gap: float | None
    matching: dict[int, int] = field(default_factory=dict)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("matching")
        return d


def candidate_labels(cm: np.ndarray, seen: Sequence[int], unseen: Sequence[int],
                     match_all_labels: bool = False) -> list[int]:
    """Labels outside the seen set, plus seen labels whose column is won by an
    unseen class (an unseen class holds strictly more predictions there than any
    seen class)."""
    n_labels = cm.shape[1]
    if match_all_labels:
        return list(range(n_labels))
    free = set(range(n_labels)) - set(seen)
    seen_rows = [c for c in seen if c < cm.shape[0]]
    unseen_rows = [c for c in unseen if c < cm.shape[0]]
    won = set()
    if unseen_rows:
        for label in set(seen) & set(range(n_labels)):
            best_unseen = cm[unseen_rows, label].max()
            best_seen = cm[seen_rows, label].max() if seen_rows else 0
            if best_unseen > best_seen:
                won.add(label)
    return sorted(free | won)


def _ratio(num, den):
    return float(num / den) if den else None


def metrics(cm, taxonomy: ClassTaxonomy, match_all_labels: bool = False,
            matcher=hungarian_match) -> MetricsReport:
    """Seen accuracy uses raw labels; unseen classes are matched jointly, then LU/GU
    accuracies are read off that one matching."""
    cm = np.asarray(cm)
    present = {int(c) for c in np.flatnonzero(cm.sum(1))}
    seen = sorted(taxonomy.seen)
    lu, gu = taxonomy.lu_classes, taxonomy.gu_classes
    known = set(seen) | lu | gu
    if not present <= known:
        raise ConfigurationError(f"classes {sorted(present - known)} missing from taxonomy")
    if max(known, default=-1) >= cm.shape[0]:
        raise ConfigurationError("taxonomy names classes beyond the confusion matrix")
    unseen = sorted(lu | gu)
    seen_correct = int(sum(cm[c, c] for c in seen if c < cm.shape[1]))
    seen_total = int(cm[seen].sum()) if seen else 0
    labels = candidate_labels(cm, seen, unseen, match_all_labels)
    unseen_total = int(cm[unseen].sum()) if unseen else 0
    matching: dict[int, int] = {}
    if unseen and unseen_total:
        matching, _ = matcher(cm[np.ix_(unseen, labels)], unseen, labels)
    hit = {c: int(cm[c, matching[c]]) if c in matching else 0 for c in unseen}
    lu_total = int(sum(cm[c].sum() for c in lu))
    gu_total = int(sum(cm[c].sum() for c in gu))
    acc_lu = _ratio(sum(hit[c] for c in lu), lu_total)
    acc_gu = _ratio(sum(hit[c] for c in gu), gu_total)
    gap = acc_lu - acc_gu if acc_lu is not None and acc_gu is not None else None
    total = int(cm.sum())
    return MetricsReport(
        acc_all=_ratio(seen_correct + sum(hit.values()), total) or 0.0,
        acc_seen=_ratio(seen_correct, seen_total),
        acc_lu=acc_lu,
        acc_gu=acc_gu,
        acc_au=_ratio(sum(hit.values()), unseen_total),
        lu_gu_gap=gap,
        matching=matching,
    )


def best_round(reports: Sequence[MetricsReport]) -> int:
    """Index of the highest acc_all (earliest on ties)."""
    if not reports:
        raise ValueError("no reports")
    return int(np.argmax([r.acc_all for r in reports]))


@dataclass
class GapReport:
    per_round: list[float | None]
    best_round: int
    best_gap: float | None
    final_gap: float | None


def gap_report(reports: Sequence[MetricsReport]) -> GapReport:
    series = [r.lu_gu_gap for r in reports]
    if not reports:
        return GapReport([], -1, None, None)
    b = best_round(reports)
    return GapReport(series, b, series[b], series[-1])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv_text(reports: Sequence[MetricsReport], rounds: Sequence[int] | None = None) -> str:
    rounds = list(range(1, len(reports) + 1)) if rounds is None else list(rounds)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for rnd, r in zip(rounds, reports):
        w.writerow([rnd] + [_fmt(getattr(r, k)) for k in METRIC_COLUMNS[1:]])
    return buf.getvalue()


def read_metrics_csv(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRIC_COLUMNS:
            raise ConfigurationError(f"{path}: unexpected metrics columns {reader.fieldnames}")
        for row in reader:
            out.append({k: (int(v) if k == "round" else (float(v) if v != "" else None))
                        for k, v in row.items()})
    return out


def dump_matching(report: MetricsReport, path, round_index: int) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps({"round": round_index,
                               "matching": {str(k): v for k, v in sorted(report.matching.items())}}) + "\n")
    tmp.replace(path)
