"""Relabeling transforms: from a ground-truth click stream to the training
stream a method actually sees.

The elapsed-sampling transform waits a drawn time e per click before
labeling; conversions with delay h <= e are observed positives, later
conversions become fake negatives plus a corrective duplicate at
conversion time. Ties (h == e) count as observed.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .datagen import ClickEvent
from .errors import ConfigurationError, OrderingError


class SampleKind(enum.Enum):
    OBSERVED_POSITIVE = "observed_positive"
    FAKE_NEGATIVE = "fake_negative"
    REAL_NEGATIVE = "real_negative"
    DELAYED_POSITIVE_DUPLICATE = "delayed_positive_duplicate"


@dataclass(frozen=True, slots=True)
class TrainingSample:
    """A relabeled, time-stamped instance emitted into a training stream."""

    source_id: int
    emit_ts: float
    categorical_features: tuple[int, ...]
    continuous_features: tuple[float, ...]
    observed_label: int
    kind: SampleKind
    elapsed: float


@dataclass(frozen=True)
class DiracPolicy:
    """Wait exactly c seconds before labeling. c=inf is the oracle limit:
    every conversion is observed."""

    c: float

    def __post_init__(self):
        if not (self.c >= 0.0):
            raise ConfigurationError(f"dirac c: must be >= 0, got {self.c}")


@dataclass(frozen=True)
class PerXPolicy:
    """Per-feature elapsed-time distribution; `sample(event, rng)` returns
    a nonnegative waiting time in seconds."""

    sample: Callable[[ClickEvent, np.random.Generator], float]


ElapsedPolicy = DiracPolicy | PerXPolicy


def draw_elapsed(event: ClickEvent, policy: ElapsedPolicy, rng: np.random.Generator) -> float:
    if isinstance(policy, DiracPolicy):
        return policy.c
    e = float(policy.sample(event, rng))
    if not (e >= 0.0):
        raise ConfigurationError(f"per_x policy: drew negative elapsed time {e}")
    return e


def _check_sorted(stream: Sequence[ClickEvent]) -> None:
    for a, b in zip(stream, stream[1:]):
        if b.click_ts < a.click_ts:
            raise OrderingError(
                f"stream not sorted by click_ts ({a.click_ts} followed by {b.click_ts})"
            )


def _sample(event: ClickEvent, emit_ts: float, label: int, kind: SampleKind, e: float) -> TrainingSample:
    return TrainingSample(
        source_id=event.id,
        emit_ts=emit_ts,
        categorical_features=event.categorical_features,
        continuous_features=event.continuous_features,
        observed_label=label,
        kind=kind,
        elapsed=e,
    )


def transform_es(
    stream: Sequence[ClickEvent],
    policy: ElapsedPolicy,
    rng: np.random.Generator,
) -> list[TrainingSample]:
    """Elapsed-time sampling with fake negatives and delayed-positive
    duplicates.

    Each event emits one sample at click_ts + e; converters with h > e
    additionally emit a duplicate positive at conversion time. Output is
    sorted by emit_ts; total count = n_events + n_fake_negatives.
    """
    _check_sorted(stream)
    out: list[TrainingSample] = []
    for event in stream:
        e = draw_elapsed(event, policy, rng)
        emit = event.click_ts + e
        h = event.delay
        if h is not None and h <= e:
            out.append(_sample(event, emit, 1, SampleKind.OBSERVED_POSITIVE, e))
        elif h is not None:
            out.append(_sample(event, emit, 0, SampleKind.FAKE_NEGATIVE, e))
            out.append(
                _sample(event, event.conversion_ts, 1, SampleKind.DELAYED_POSITIVE_DUPLICATE, e)
            )
        else:
            out.append(_sample(event, emit, 0, SampleKind.REAL_NEGATIVE, e))
    out.sort(key=lambda s: s.emit_ts)
    return out


def transform_fnw(stream: Sequence[ClickEvent], rng: np.random.Generator) -> list[TrainingSample]:
    """Immediate-negative labeling: elapsed-time sampling at e = 0."""
    return transform_es(stream, DiracPolicy(0.0), rng)


def transform_fsiw(
    stream: Sequence[ClickEvent],
    policy: ElapsedPolicy,
    rng: np.random.Generator,
) -> list[TrainingSample]:
    """Wait e per event and label by conversion-within-e; no duplicates, so
    a late conversion is never corrected. Count is preserved."""
    _check_sorted(stream)
    out: list[TrainingSample] = []
    for event in stream:
        e = draw_elapsed(event, policy, rng)
        emit = event.click_ts + e
        h = event.delay
        if h is not None and h <= e:
            out.append(_sample(event, emit, 1, SampleKind.OBSERVED_POSITIVE, e))
        elif h is not None:
            out.append(_sample(event, emit, 0, SampleKind.FAKE_NEGATIVE, e))
        else:
            out.append(_sample(event, emit, 0, SampleKind.REAL_NEGATIVE, e))
    out.sort(key=lambda s: s.emit_ts)
    return out


def transform_oracle(stream: Sequence[ClickEvent]) -> list[TrainingSample]:
    """True labels known at click time; one sample per event at click_ts."""
    _check_sorted(stream)
    out = []
    for event in stream:
        if event.converted:
            out.append(_sample(event, event.click_ts, 1, SampleKind.OBSERVED_POSITIVE, math.inf))
        else:
            out.append(_sample(event, event.click_ts, 0, SampleKind.REAL_NEGATIVE, math.inf))
    return out


@dataclass(frozen=True)
class DisturbConfig:
    """Label-noise injection: swap a d fraction of positives with random
    negatives (labels, click times, and conversion times travel together)."""

    strength: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ConfigurationError(f"strength: must be in [0,1], got {self.strength}")


def disturb(stream: Sequence[ClickEvent], config: DisturbConfig) -> list[ClickEvent]:
    """Swap (conversion presence, click_ts, conversion_ts) between
    floor(d * n_pos) positives and as many distinct negatives, both chosen
    uniformly without replacement; output re-sorted by click_ts."""
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 2)))
    pos_idx = [i for i, e in enumerate(stream) if e.converted]
    neg_idx = [i for i, e in enumerate(stream) if not e.converted]
    n_swap = int(math.floor(config.strength * len(pos_idx)))
    if n_swap == 0:
        return list(stream)
    if n_swap > len(neg_idx):
        raise ConfigurationError(
            f"strength: {n_swap} swaps requested but only {len(neg_idx)} negatives available"
        )
    chosen_pos = rng.choice(len(pos_idx), size=n_swap, replace=False)
    chosen_neg = rng.choice(len(neg_idx), size=n_swap, replace=False)
    out = list(stream)
    for pi, ni in zip(chosen_pos, chosen_neg):
        p = out[pos_idx[pi]]
        n = out[neg_idx[ni]]
        out[pos_idx[pi]] = ClickEvent(
            id=p.id,
            click_ts=n.click_ts,
            conversion_ts=None,
            categorical_features=p.categorical_features,
            continuous_features=p.continuous_features,
        )
        out[neg_idx[ni]] = ClickEvent(
            id=n.id,
            click_ts=p.click_ts,
            conversion_ts=p.conversion_ts,
            categorical_features=n.categorical_features,
            continuous_features=n.continuous_features,
        )
    out.sort(key=lambda e: e.click_ts)
    return out


def write_samples(samples: Sequence[TrainingSample], path) -> None:
    """One sample per line: source_id, emit_ts, label, kind, elapsed,
    categorical ids, continuous values."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            cats = ",".join(str(c) for c in s.categorical_features)
            conts = ",".join(repr(float(v)) for v in s.continuous_features)
            fh.write(
                f"{s.source_id}\t{s.emit_ts!r}\t{s.observed_label}\t{s.kind.value}"
                f"\t{s.elapsed!r}\t{cats}\t{conts}\n"
            )


def read_samples(path) -> list[TrainingSample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            f = line.rstrip("\n").split("\t")
            out.append(
                TrainingSample(
                    source_id=int(f[0]),
                    emit_ts=float(f[1]),
                    observed_label=int(f[2]),
                    kind=SampleKind(f[3]),
                    elapsed=float(f[4]),
                    categorical_features=tuple(int(c) for c in f[5].split(",")) if f[5] else (),
                    continuous_features=tuple(float(v) for v in f[6].split(",")) if f[6] else (),
                )
            )
    return out
