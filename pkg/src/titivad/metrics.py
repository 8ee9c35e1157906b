"""Frame, event and count-level evaluation quantities.

Statistics that are undefined on the given input (no positive frames,
constant count vectors) come back as ``None`` instead of a number.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.stats import rankdata

from .decoder import match_events
from .errors import Empty, LengthMismatch, TooFew, TooShort


def _binary_pair(pred, labels):
    p = np.asarray(pred).astype(np.int8).ravel()
    y = np.asarray(labels).astype(np.int8).ravel()
    if p.shape != y.shape:
        raise LengthMismatch(f"{len(p)} predictions vs {len(y)} labels")
    return p, y


def instance_accuracy(pred, labels) -> float:
    p, y = _binary_pair(pred, labels)
    if len(p) == 0:
        raise Empty("instance accuracy of zero frames")
    return float(np.count_nonzero(p == y)) / len(p)


def conditional_accuracy(pred, labels) -> float | None:
    """Fraction of positive-labelled frames predicted positive; None without positives."""
    p, y = _binary_pair(pred, labels)
    positives = y == 1
    n = int(np.count_nonzero(positives))
    if n == 0:
        return None
    return float(np.count_nonzero(p[positives] == 1)) / n


def hits_correlation(per_unit_counts, method="pearson") -> float | None:
    """Correlation of (predicted_count, labelled_count) pairs across units."""
    counts = np.asarray(per_unit_counts, dtype=np.float64).reshape(-1, 2)
    if len(counts) < 2:
        raise TooFew("hits correlation needs at least two units")
    a, b = counts[:, 0], counts[:, 1]
    if method == "spearman":
        a, b = rankdata(a), rankdata(b)
    elif method != "pearson":
        raise ValueError(f"unknown correlation method {method!r}")
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = np.sum(da * da), np.sum(db * db)
    if saa == 0 or sbb == 0:
        return None
    # one square root of the product keeps identical vectors at exactly 1
    return float(np.clip(np.sum(da * db) / np.sqrt(saa * sbb), -1.0, 1.0))


def smoothness(posteriors) -> float:
    """Mean absolute difference between successive posteriors."""
    p = np.asarray(getattr(posteriors, "probs", posteriors), dtype=np.float64)
    if len(p) < 2:
        raise TooShort("smoothness needs at least two frames")
    return float(np.mean(np.abs(np.diff(p))))


class EventScores(NamedTuple):
    precision: float
    recall: float
    precision_by_convention: bool = False
    recall_by_convention: bool = False


def event_scores(predicted, reference, iou_min=0.3) -> EventScores:
    """Precision and recall of greedy IoU matching.

    An empty denominator yields 1.0 with the matching ``*_by_convention`` flag set.
    """
    hits, misses, false_alarms = match_events(predicted, reference, iou_min)
    p_den, r_den = hits + false_alarms, hits + misses
    return EventScores(hits / p_den if p_den else 1.0, hits / r_den if r_den else 1.0,
                       p_den == 0, r_den == 0)


@dataclass
class EvalReport:
    instance_accuracy: float | None
    conditional_accuracy: float | None
    hits_corr: float | None
    smoothness: float | None
    event_precision: float
    event_recall: float
    hits: int = 0
    misses: int = 0
    false_alarms: int = 0
    hits_corr_method: str = "pearson"
    hits_corr_unit: str = "file"
    precision_by_convention: bool = False
    recall_by_convention: bool = False
    rows: list = field(default_factory=list)

    @property
    def defined(self) -> dict:
        return {k: getattr(self, k) is not None for k in
                ("instance_accuracy", "conditional_accuracy", "hits_corr", "smoothness")}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["defined"] = self.defined
        return d

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, allow_nan=False)
            fh.write("\n")

    def write_rows_csv(self, path) -> None:
        keys = ["file", "frames", "instance_accuracy", "conditional_accuracy",
                "predicted_events", "reference_events", "hits", "misses", "false_alarms"]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, extrasaction="ignore")
            w.writeheader()
            for row in self.rows:
                w.writerow({k: ("" if row.get(k) is None else row.get(k)) for k in keys})


@dataclass
class FileResult:
    """Everything known about one evaluated file."""

    file: str
    predicted: list
    reference: list
    pred_frames: np.ndarray | None = None
    label_frames: np.ndarray | None = None
    posteriors: object = None


def count_units(result: FileResult, unit: str, window_sec: float, duration_sec: float):
    """(predicted, labelled) counts per file, or per window of ``window_sec``."""
    if unit == "file":
        return [(len(result.predicted), len(result.reference))]
    n = max(1, int(np.ceil(duration_sec / window_sec - 1e-9)))

    def bins(segs):
        c = np.zeros(n, dtype=int)
        for s in segs:
            c[min(n - 1, int(0.5 * (s.start_sec + s.end_sec) // window_sec))] += 1
        return c

    return list(zip(bins(result.predicted).tolist(), bins(result.reference).tolist()))


def evaluate(results, iou_min=0.3, corr_method="pearson", unit="file", window_sec=5.0,
             durations=None) -> EvalReport:
    rows, counts = [], []
    preds, labels, smooth = [], [], []
    tot = np.zeros(3, dtype=int)
    for r in results:
        m = match_events(r.predicted, r.reference, iou_min)
        tot += m
        row = {"file": r.file, "predicted_events": len(r.predicted),
               "reference_events": len(r.reference), "hits": m.hits, "misses": m.misses,
               "false_alarms": m.false_alarms}
        if r.pred_frames is not None and r.label_frames is not None and len(r.label_frames):
            row["frames"] = len(r.label_frames)
            row["instance_accuracy"] = instance_accuracy(r.pred_frames, r.label_frames)
            row["conditional_accuracy"] = conditional_accuracy(r.pred_frames, r.label_frames)
            preds.append(np.asarray(r.pred_frames))
            labels.append(np.asarray(r.label_frames))
        if r.posteriors is not None and len(getattr(r.posteriors, "probs", r.posteriors)) > 1:
            smooth.append(np.asarray(getattr(r.posteriors, "probs", r.posteriors)))
        duration = (durations or {}).get(r.file) or max(
            [s.end_sec for s in r.predicted + r.reference] or [window_sec])
        counts.extend(count_units(r, unit, window_sec, duration))
        rows.append(row)

    hits, misses, fas = (int(v) for v in tot)
    p_den, r_den = hits + fas, hits + misses
    inst = cond = None
    if preds:
        inst = instance_accuracy(np.concatenate(preds), np.concatenate(labels))
        cond = conditional_accuracy(np.concatenate(preds), np.concatenate(labels))
    corr = hits_correlation(counts, corr_method) if len(counts) >= 2 else None
    sm = float(np.mean(np.concatenate([np.abs(np.diff(p)) for p in smooth]))) if smooth else None
    return EvalReport(
        instance_accuracy=inst, conditional_accuracy=cond, hits_corr=corr, smoothness=sm,
        event_precision=hits / p_den if p_den else 1.0,
        event_recall=hits / r_den if r_den else 1.0,
        hits=hits, misses=misses, false_alarms=fas,
        hits_corr_method=corr_method, hits_corr_unit=unit,
        precision_by_convention=p_den == 0, recall_by_convention=r_den == 0, rows=rows,
    )
