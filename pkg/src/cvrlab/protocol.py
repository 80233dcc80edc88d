"""Streaming evaluation protocol and metrics.

Each bucket is predicted before it is trained on: metrics for bucket t
always come from parameters untouched by bucket t's training data. Pooled
metrics are computed over the concatenation of all per-bucket evaluation
predictions.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datagen import Bucket
from .errors import ProtocolError, UndefinedMetricError


def auc(scores, labels) -> float:
    """Area under the ROC curve via the rank statistic: the probability a
    positive outranks a negative, ties counted half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(scores)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = n - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    starts = np.concatenate([[0], np.flatnonzero(s[1:] != s[:-1]) + 1])
    ends = np.concatenate([starts[1:], [n]])
    avg_ranks = (starts + ends + 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(avg_ranks, ends - starts)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pr_auc(scores, labels) -> float:
    """Average precision: mean over positives, in score order, of the
    precision at that recall step. Ties are broken by descending score then
    stable input order."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise UndefinedMetricError("pr_auc needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    sorted_pos = np.asarray(labels)[order] == 1
    cum_pos = np.cumsum(sorted_pos)
    ranks = np.arange(1, len(scores) + 1)
    return float(np.sum(cum_pos[sorted_pos] / ranks[sorted_pos]) / n_pos)


def nll(probs, labels) -> float:
    """Mean negative log likelihood; probs must already be clamped inside
    (0, 1)."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def relative_metric(method_value: float, vanilla_value: float, oracle_value: float, orientation: str) -> float:
    """Position of a method inside the vanilla-to-oracle gap: vanilla maps
    to 0, oracle to 1. orientation is 'higher' (AUC-like) or 'lower'
    (NLL-like)."""
    if orientation == "higher":
        gap = oracle_value - vanilla_value
        if gap == 0.0:
            raise UndefinedMetricError("relative metric undefined: oracle equals vanilla")
        return (method_value - vanilla_value) / gap
    if orientation == "lower":
        gap = vanilla_value - oracle_value
        if gap == 0.0:
            raise UndefinedMetricError("relative metric undefined: oracle equals vanilla")
        return (vanilla_value - method_value) / gap
    raise UndefinedMetricError(f"unknown orientation {orientation!r}")


@dataclass
class MetricRow:
    n: int
    n_pos: int
    auc: float | None
    pr_auc: float | None
    nll: float


def evaluate(probs, labels) -> MetricRow:
    labels = np.asarray(labels)
    n = len(labels)
    n_pos = int(np.sum(labels == 1))
    try:
        a = auc(probs, labels)
    except UndefinedMetricError:
        a = None
    try:
        pa = pr_auc(probs, labels)
    except UndefinedMetricError:
        pa = None
    return MetricRow(n=n, n_pos=n_pos, auc=a, pr_auc=pa, nll=nll(probs, labels))


@dataclass
class BucketRecord:
    index: int
    start: float
    metrics: MetricRow


@dataclass
class StreamReport:
    method: str
    buckets: list[BucketRecord] = field(default_factory=list)
    pooled: MetricRow | None = None
    relative: dict[str, float] | None = None


def attach_relative(report: StreamReport, vanilla: StreamReport, oracle: StreamReport) -> StreamReport:
    """Fill in r_auc / r_pr_auc / r_nll from pooled metrics."""
    report.relative = {
        "r_auc": relative_metric(report.pooled.auc, vanilla.pooled.auc, oracle.pooled.auc, "higher"),
        "r_pr_auc": relative_metric(report.pooled.pr_auc, vanilla.pooled.pr_auc, oracle.pooled.pr_auc, "higher"),
        "r_nll": relative_metric(report.pooled.nll, vanilla.pooled.nll, oracle.pooled.nll, "lower"),
    }
    return report


def run_streaming_experiment(
    method,
    train_buckets: Sequence[Bucket],
    eval_buckets: Sequence[Bucket],
    passes_per_bucket: int = 1,
    pre_train_hook=None,
) -> StreamReport:
    """Per-bucket evaluate-then-train over aligned bucket grids.

    Evaluation buckets hold ground-truth ClickEvents; training buckets hold
    the method's TrainingSamples on the same absolute grid. For each
    evaluation bucket in order: predict with frozen parameters, record
    metrics, then train on the same-index training bucket.
    """
    widths = {b.width for b in train_buckets} | {b.width for b in eval_buckets}
    if len(widths) > 1:
        raise ProtocolError(f"bucket misalignment: mixed widths {sorted(widths)}")
    train_by_index = {b.index: b for b in train_buckets}
    report = StreamReport(method=method.name)
    all_probs: list[np.ndarray] = []
    all_labels: list[np.ndarray] = []
    for bucket in sorted(eval_buckets, key=lambda b: b.index):
        if pre_train_hook is not None:
            pre_train_hook(bucket.index)
        if bucket.items:
            labels = np.array([1 if e.converted else 0 for e in bucket.items])
            probs = method.predict(bucket.items)
            report.buckets.append(
                BucketRecord(index=bucket.index, start=bucket.start, metrics=evaluate(probs, labels))
            )
            all_probs.append(probs)
            all_labels.append(labels)
        train_bucket = train_by_index.get(bucket.index)
        if train_bucket is not None and train_bucket.items:
            for _ in range(passes_per_bucket):
                method.train_on(train_bucket.items)
    if all_probs:
        report.pooled = evaluate(np.concatenate(all_probs), np.concatenate(all_labels))
    return report


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}" if math.isfinite(v) else repr(v)
    return str(v)


def write_report_csv(report: StreamReport, path) -> None:
    """One row per bucket plus a pooled row; relative columns are filled on
    the pooled row when available."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bucket", "start", "n_eval", "n_pos", "auc", "pr_auc", "nll", "r_auc", "r_pr_auc", "r_nll"])
        for rec in report.buckets:
            m = rec.metrics
            w.writerow([rec.index, _cell(rec.start), m.n, m.n_pos, _cell(m.auc), _cell(m.pr_auc), _cell(m.nll), "", "", ""])
        m = report.pooled
        rel = report.relative or {}
        w.writerow(
            [
                "pooled",
                "",
                m.n,
                m.n_pos,
                _cell(m.auc),
                _cell(m.pr_auc),
                _cell(m.nll),
                _cell(rel.get("r_auc")),
                _cell(rel.get("r_pr_auc")),
                _cell(rel.get("r_nll")),
            ]
        )


def write_report_records(report: StreamReport, path) -> None:
    """Line-delimited JSON: one record per bucket, then the pooled record."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in report.buckets:
            m = rec.metrics
            fh.write(
                json.dumps(
                    {
                        "type": "bucket",
                        "method": report.method,
                        "bucket": rec.index,
                        "start": rec.start,
                        "n_eval": m.n,
                        "n_pos": m.n_pos,
                        "auc": m.auc,
                        "pr_auc": m.pr_auc,
                        "nll": m.nll,
                    }
                )
                + "\n"
            )
        m = report.pooled
        record = {
            "type": "pooled",
            "method": report.method,
            "n_eval": m.n,
            "n_pos": m.n_pos,
            "auc": m.auc,
            "pr_auc": m.pr_auc,
            "nll": m.nll,
        }
        if report.relative:
            record.update(report.relative)
        fh.write(json.dumps(record) + "\n")
