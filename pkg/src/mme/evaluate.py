"""Temporal evaluation: aging curves, active-learning maintenance loops and
feature-stability scoring with Jensen-Shannon divergence.

Training data always strictly precedes test data, and every test bucket is
period-pure.  Maintenance retrains are full re-runs of train_model from the
original seed on the cumulative labeled set, which keeps every loop
reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (EmptyPool, EmptyTrain, LengthMismatch, NotNormalized,
                     TooFewSamples)
from .nnet import ModelState, predict_dataset, train_model
from .sequence import EmbeddedDataset


def trace_period(timestamp: str, bucket: str) -> str:
    if bucket == "yearly":
        return timestamp[:4]
    if bucket == "monthly":
        return timestamp
    raise ValueError(f"unknown bucket granularity {bucket!r}")


@dataclass
class TemporalSplit:
    """Train ids plus period-pure test buckets ordered by period."""

    train: list[str]
    test_buckets: dict[str, list[str]]
    bucket: str
    periods_by_id: dict[str, str] = field(repr=False, default_factory=dict)

    def validate(self) -> None:
        train_periods = [self.periods_by_id[t] for t in self.train]
        last_train = max(train_periods)
        for period, ids in self.test_buckets.items():
            if period <= last_train:
                raise ValueError(f"test bucket {period} does not follow training data")
            for tid in ids:
                if self.periods_by_id[tid] != period:
                    raise ValueError(f"trace {tid} leaked into bucket {period}")


def temporal_split(traces, train_end: str, bucket: str = "monthly") -> TemporalSplit:
    """Traces stamped at or before train_end train; later ones are bucketed.

    ``train_end`` is a period at the bucket granularity ("2017" for yearly,
    "2020-01" for monthly).
    """
    train, buckets = [], {}
    periods = {}
    for trace in traces:
        key = trace_period(trace.timestamp, bucket)
        periods[trace.trace_id] = key
        if key <= train_end:
            train.append(trace.trace_id)
        else:
            buckets.setdefault(key, []).append(trace.trace_id)
    if not train:
        raise EmptyTrain(f"no traces at or before {train_end}")
    ordered = {period: buckets[period] for period in sorted(buckets)}
    split = TemporalSplit(train=train, test_buckets=ordered, bucket=bucket,
                          periods_by_id=periods)
    split.validate()
    return split


@dataclass
class MetricsRow:
    period: str
    tp: int
    fp: int
    tn: int
    fn: int
    fpr: float
    fnr: float
    f1: float


def _ratio(num, den) -> float:
    return num / den if den > 0 else 0.0


def compute_metrics(pairs, period: str = "") -> MetricsRow:
    """FPR, FNR and F1 (on the malicious class) from (y_true, y_hat) pairs.

    Any 0/0 ratio is defined as 0.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no predictions to score")
    tp = fp = tn = fn = 0
    for y_true, y_hat in pairs:
        if y_true == 1:
            if y_hat == 1:
                tp += 1
            else:
                fn += 1
        else:
            if y_hat == 1:
                fp += 1
            else:
                tn += 1
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * precision * recall, precision + recall)
    return MetricsRow(period=period, tp=tp, fp=fp, tn=tn, fn=fn,
                      fpr=_ratio(fp, fp + tn), fnr=_ratio(fn, fn + tp), f1=f1)


def aging_curve(model: ModelState, split: TemporalSplit,
                dataset: EmbeddedDataset) -> list[MetricsRow]:
    """One metrics row per test bucket, in period order."""
    rows = []
    for period, ids in split.test_buckets.items():
        sub = dataset.subset(ids)
        y_hat, _, _ = predict_dataset(model, sub)
        rows.append(compute_metrics(zip(sub.y, y_hat), period=period))
    return rows


def resolve_budget(pool_size: int, count: int | None = None,
                   ratio: float | None = None) -> int:
    """Selection count from either an absolute count or a pool fraction."""
    if (count is None) == (ratio is None):
        raise ValueError("exactly one of count or ratio must be given")
    k = count if count is not None else math.ceil(ratio * pool_size)
    return min(k, pool_size)


def uncertainty_select(scored, k: int) -> list[str]:
    """ids of the k scores closest to the 0.5 decision boundary, ties by id."""
    scored = list(scored)
    if not scored:
        raise EmptyPool("nothing to select from")
    if k < 1:
        raise ValueError("selection budget must be >= 1")
    ranked = sorted(scored, key=lambda item: (abs(item[1] - 0.5), item[0]))
    return [tid for tid, _ in ranked[:k]]


@dataclass
class MaintenanceResult:
    rows: list[MetricsRow]
    labels_used: dict[str, int]
    label_log: list[dict]
    model: ModelState

    def total_labels(self) -> int:
        return sum(self.labels_used.values())

    def average(self) -> dict:
        return {
            "fpr": float(np.mean([r.fpr for r in self.rows])),
            "fnr": float(np.mean([r.fnr for r in self.rows])),
            "f1": float(np.mean([r.f1 for r in self.rows])),
        }


def _retrain(reference: ModelState, dataset: EmbeddedDataset, ids) -> ModelState:
    return train_model(dataset.subset(ids), reference.encoder_cfg,
                       reference.train_cfg)


def maintain_to_threshold(model: ModelState, split: TemporalSplit,
                          dataset: EmbeddedDataset, threshold: float,
                          step: float = 0.01) -> MaintenanceResult:
    """Active-learning maintenance: keep each bucket's F1 at the threshold.

    Walking buckets in order, whenever the bucket F1 drops below the
    threshold the next step-fraction of most-uncertain unlabeled bucket
    samples is labeled, the model is retrained on the cumulative labeled
    set from its original seed, and the bucket F1 is recomputed, until it
    reaches the threshold or the bucket is exhausted.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    labeled = list(split.train)
    current = model
    rows = []
    labels_used = {}
    label_log = []
    for period, ids in split.test_buckets.items():
        sub = dataset.subset(ids)
        y_hat, scores, _ = predict_dataset(current, sub)
        row = compute_metrics(zip(sub.y, y_hat), period=period)
        unlabeled = sorted(ids)
        used = 0
        k_step = max(1, math.ceil(step * len(ids)))
        while row.f1 < threshold and unlabeled:
            pool = dataset.subset(unlabeled)
            _, pool_scores, _ = predict_dataset(current, pool)
            picked = uncertainty_select(zip(unlabeled, pool_scores),
                                        min(k_step, len(unlabeled)))
            labeled.extend(picked)
            unlabeled = [tid for tid in unlabeled if tid not in set(picked)]
            used += len(picked)
            label_log.extend(
                {"period": period, "trace_id": tid,
                 "trace_period": split.periods_by_id[tid]}
                for tid in picked
            )
            current = _retrain(model, dataset, labeled)
            y_hat, scores, _ = predict_dataset(current, sub)
            row = compute_metrics(zip(sub.y, y_hat), period=period)
        labels_used[period] = used
        rows.append(row)
    return MaintenanceResult(rows=rows, labels_used=labels_used,
                             label_log=label_log, model=current)


def maintain_with_budget(model: ModelState, split: TemporalSplit,
                         dataset: EmbeddedDataset, count: int | None = None,
                         ratio: float | None = None) -> MaintenanceResult:
    """Fixed-budget maintenance: evaluate each bucket, label up to the budget
    by uncertainty, retrain, move on.  A zero budget degenerates to the
    plain aging curve.
    """
    if (count is None) == (ratio is None):
        raise ValueError("exactly one of count or ratio must be given")
    labeled = list(split.train)
    current = model
    rows = []
    labels_used = {}
    label_log = []
    for period, ids in split.test_buckets.items():
        sub = dataset.subset(ids)
        y_hat, scores, _ = predict_dataset(current, sub)
        rows.append(compute_metrics(zip(sub.y, y_hat), period=period))
        k = resolve_budget(len(ids), count=count, ratio=ratio)
        if k > 0:
            picked = uncertainty_select(zip(ids, scores), k)
            labeled.extend(picked)
            label_log.extend(
                {"period": period, "trace_id": tid,
                 "trace_period": split.periods_by_id[tid]}
                for tid in picked
            )
            current = _retrain(model, dataset, labeled)
        labels_used[period] = k if k > 0 else 0
    return MaintenanceResult(rows=rows, labels_used=labels_used,
                             label_log=label_log, model=current)


def validate_label_log(log) -> bool:
    """True when no trace was labeled before its own period was reached."""
    return all(entry["trace_period"] <= entry["period"] for entry in log)


# --- feature stability -------------------------------------------------------

def js_divergence(p1, p2) -> float:
    """Jensen-Shannon divergence, base-2 logarithm so the range is [0, 1]."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    if p1.shape != p2.shape or p1.ndim != 1:
        raise LengthMismatch(f"shapes {p1.shape} and {p2.shape} differ")
    for p in (p1, p2):
        if np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-9:
            raise NotNormalized("inputs must be probability vectors")
    m = 0.5 * (p1 + p2)

    def kl(p, q):
        mask = p > 0
        return float(np.sum(p[mask] * np.log2(p[mask] / q[mask])))

    return 0.5 * kl(p1, m) + 0.5 * kl(p2, m)


def _softmax_rows(Z):
    shifted = Z - Z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class StabilityReport:
    """Per family: adjacent-group JS scores over time-ordered latent features."""

    per_family: dict[int, list[float]]
    n_groups: int

    def mean_score(self) -> float:
        scores = [s for fam in sorted(self.per_family) for s in self.per_family[fam]]
        return float(np.mean(scores))


def stability_report(model: ModelState, traces, dataset: EmbeddedDataset,
                     n_groups: int = 10) -> StabilityReport:
    """Feature stability per malware family.

    Family samples are time-sorted and cut into n_groups near-equal
    contiguous groups; each group's distribution is the renormalized mean
    of the softmax-normalized latent vectors, and adjacent groups are
    compared with JS divergence.
    """
    by_family: dict[int, list] = {}
    for trace in traces:
        if trace.y == 1:
            by_family.setdefault(trace.family, []).append(trace)
    report = {}
    for family in sorted(by_family):
        members = sorted(by_family[family], key=lambda t: (t.timestamp, t.trace_id))
        if len(members) < n_groups:
            raise TooFewSamples(family)
        ids = [t.trace_id for t in members]
        _, _, latents = predict_dataset(model, dataset.subset(ids))
        probs = _softmax_rows(latents)
        scores = []
        groups = np.array_split(np.arange(len(ids)), n_groups)
        dists = []
        for g in groups:
            mean = probs[g].mean(axis=0)
            dists.append(mean / mean.sum())
        for a, b in zip(dists, dists[1:]):
            scores.append(js_divergence(a, b))
        report[family] = scores
    return StabilityReport(per_family=report, n_groups=n_groups)


# --- report files ------------------------------------------------------------

def metrics_to_csv(rows, path, extra_rows=()) -> None:
    """Write metric rows as CSV with fixed six-decimal formatting."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("period,tp,fp,tn,fn,fpr,fnr,f1\n")
        for r in rows:
            fh.write(f"{r.period},{r.tp},{r.fp},{r.tn},{r.fn},"
                     f"{r.fpr:.6f},{r.fnr:.6f},{r.f1:.6f}\n")
        for label, values in extra_rows:
            fh.write(f"{label},,,,,{values['fpr']:.6f},{values['fnr']:.6f},"
                     f"{values['f1']:.6f}\n")


def metrics_to_plot_data(rows, path) -> None:
    """Whitespace-separated columns for gnuplot-style tooling."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# period fpr fnr f1\n")
        for r in rows:
            fh.write(f"{r.period} {r.fpr:.6f} {r.fnr:.6f} {r.f1:.6f}\n")
