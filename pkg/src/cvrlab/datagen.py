"""Click/conversion event streams: synthetic generation with known ground
truth, Criteo-format ingestion, bucketing, and the pretrain/stream split.

Synthetic streams are the workhorse here: every event's true conversion
probability and delay rate are known, so downstream transforms and weights
can be checked against closed forms.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, OrderingError, ParseError

CRITEO_N_CONTINUOUS = 8
CRITEO_N_CATEGORICAL = 9
CRITEO_HASH_BUCKETS = 2**18
MISSING_CONTINUOUS = -1.0


@dataclass(frozen=True, slots=True)
class ClickEvent:
    """One logged click; the unit of ground truth.

    `conversion_ts` is None when the click never converts. Timestamps are
    seconds since the stream epoch.
    """

    id: int
    click_ts: float
    conversion_ts: float | None
    categorical_features: tuple[int, ...]
    continuous_features: tuple[float, ...]

    def __post_init__(self):
        if self.conversion_ts is not None and self.conversion_ts < self.click_ts:
            raise ConfigurationError(
                f"conversion_ts: {self.conversion_ts} precedes click_ts {self.click_ts}"
            )

    @property
    def converted(self) -> bool:
        return self.conversion_ts is not None

    @property
    def delay(self) -> float | None:
        """Click-to-conversion delay, None for non-converters."""
        if self.conversion_ts is None:
            return None
        return self.conversion_ts - self.click_ts


@dataclass(frozen=True)
class DiscreteSpace:
    """k distinct feature vectors; events carry the cell id as their single
    categorical feature. Enables exact per-cell oracles."""

    k: int

    def __post_init__(self):
        if self.k <= 0:
            raise ConfigurationError(f"feature_space: discrete k must be > 0, got {self.k}")


@dataclass(frozen=True)
class ContinuousSpace:
    """dims-dimensional standard-normal continuous features."""

    dims: int

    def __post_init__(self):
        if self.dims <= 0:
            raise ConfigurationError(
                f"feature_space: continuous dims must be > 0, got {self.dims}"
            )


FeatureSpaceSpec = DiscreteSpace | ContinuousSpace


def parse_feature_space(text: str) -> FeatureSpaceSpec:
    """Parse 'discrete:K' or 'continuous:D'."""
    kind, _, arg = text.partition(":")
    if kind == "discrete" and arg.isdigit():
        return DiscreteSpace(int(arg))
    if kind == "continuous" and arg.isdigit():
        return ContinuousSpace(int(arg))
    raise ConfigurationError(f"feature_space: cannot parse {text!r}")


@dataclass(frozen=True)
class GenConfig:
    """Synthetic stream shape. `delay_scale` is the typical conversion
    delay in seconds; per-feature rates vary around 1/delay_scale."""

    n_events: int
    horizon: float
    feature_space: FeatureSpaceSpec
    target_avg_cvr: float = 0.2269
    delay_scale: float = 1800.0
    seed: int = 0

    def __post_init__(self):
        if self.n_events <= 0:
            raise ConfigurationError(f"n_events: must be > 0, got {self.n_events}")
        if self.horizon <= 0:
            raise ConfigurationError(f"horizon: must be > 0, got {self.horizon}")
        if not 0.0 < self.target_avg_cvr < 1.0:
            raise ConfigurationError(
                f"target_avg_cvr: must be in (0,1), got {self.target_avg_cvr}"
            )
        if self.delay_scale <= 0:
            raise ConfigurationError(f"delay_scale: must be > 0, got {self.delay_scale}")


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground truth for a synthetic stream.

    `cvr_fn` maps a feature payload to the true conversion probability and
    `delay_rate_fn` to the exponential delay rate (1/seconds). The payload
    is the cell id (int) for discrete spaces and a 1-D float array for
    continuous spaces. `logit_shift_fn`, when set, adds a time-dependent
    shift to the conversion logit, making the stream nonstationary.
    """

    cvr_fn: Callable[..., float]
    delay_rate_fn: Callable[..., float]
    logit_shift_fn: Callable[[float], float] | None = None

    def conversion_prob(self, x, t: float | None = None) -> float:
        p = float(self.cvr_fn(x))
        if not 0.0 < p < 1.0:
            raise ConfigurationError(f"cvr_fn: output must be in (0,1), got {p}")
        if self.logit_shift_fn is None or t is None:
            return p
        z = math.log(p / (1.0 - p)) + self.logit_shift_fn(t)
        return 1.0 / (1.0 + math.exp(-z))

    def delay_rate(self, x) -> float:
        lam = float(self.delay_rate_fn(x))
        if not lam > 0.0:
            raise ConfigurationError(f"delay_rate_fn: output must be > 0, got {lam}")
        return lam

    @property
    def stationary(self) -> bool:
        return self.logit_shift_fn is None

    @staticmethod
    def tabular(cvrs: Sequence[float], rates: Sequence[float]) -> "SyntheticTruth":
        """Per-cell truth for a DiscreteSpace(len(cvrs))."""
        cvr = tuple(float(v) for v in cvrs)
        rate = tuple(float(v) for v in rates)
        return SyntheticTruth(cvr_fn=lambda x: cvr[x], delay_rate_fn=lambda x: rate[x])


def sin_logit_shift(amplitude: float, period: float) -> Callable[[float], float]:
    """Sinusoidal conversion-logit drift with the given period in seconds."""
    w = 2.0 * math.pi / period
    return lambda t: amplitude * math.sin(w * t)


def _solve_intercept(mean_fn: Callable[[float], float], target: float) -> float:
    """Bisect the intercept a so that mean_fn(a) == target; mean_fn must be
    increasing in a."""
    lo, hi = -40.0, 40.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mean_fn(mid) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-np.asarray(z, dtype=np.float64)))


def default_truth(config: GenConfig) -> SyntheticTruth:
    """Logistic CVR in a random linear score, rescaled so the population
    mean matches target_avg_cvr; per-feature exponential delay rates within
    a factor of two of 1/delay_scale."""
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0)))
    space = config.feature_space
    ln2 = math.log(2.0)
    if isinstance(space, DiscreteSpace):
        scores = rng.standard_normal(space.k)
        a = _solve_intercept(lambda a: float(np.mean(_sigmoid(a + scores))), config.target_avg_cvr)
        cvrs = _sigmoid(a + scores)
        rates = np.exp(rng.uniform(-ln2, ln2, size=space.k)) / config.delay_scale
        return SyntheticTruth.tabular(cvrs, rates)
    w = rng.standard_normal(space.dims) / math.sqrt(space.dims)
    u = rng.standard_normal(space.dims) / math.sqrt(space.dims)
    s = float(np.linalg.norm(w))
    nodes, weights = np.polynomial.hermite.hermgauss(80)

    def mean_fn(a: float) -> float:
        return float(np.sum(weights * _sigmoid(a + math.sqrt(2.0) * s * nodes)) / math.sqrt(math.pi))

    a = _solve_intercept(mean_fn, config.target_avg_cvr)

    def cvr_fn(x) -> float:
        return float(_sigmoid(a + float(np.dot(np.asarray(x), w))))

    def delay_rate_fn(x) -> float:
        z = min(ln2, max(-ln2, float(np.dot(np.asarray(x), u))))
        return math.exp(z) / config.delay_scale

    return SyntheticTruth(cvr_fn=cvr_fn, delay_rate_fn=delay_rate_fn)


def synth_stream(config: GenConfig, truth: SyntheticTruth) -> list[ClickEvent]:
    """Generate a stream of clicks sorted by click time.

    Click times are uniform over [0, horizon); labels are Bernoulli in the
    (possibly time-shifted) per-feature CVR; converter delays are
    exponential with the per-feature rate. Conversion times past the
    horizon are kept so the ground truth stays exact. Deterministic given
    config.seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 1)))
    n = config.n_events
    space = config.feature_space
    click_ts = np.sort(rng.uniform(0.0, config.horizon, size=n))

    if isinstance(space, DiscreteSpace):
        cells = rng.integers(0, space.k, size=n)
        base = np.array([truth.conversion_prob(c) for c in range(space.k)])[cells]
        rates = np.array([truth.delay_rate(c) for c in range(space.k)])[cells]
    else:
        xs = rng.standard_normal((n, space.dims))
        base = np.array([truth.conversion_prob(x) for x in xs])
        rates = np.array([truth.delay_rate(x) for x in xs])

    if truth.logit_shift_fn is None:
        probs = base
    else:
        shift = np.array([truth.logit_shift_fn(t) for t in click_ts])
        probs = _sigmoid(np.log(base / (1.0 - base)) + shift)

    converts = rng.uniform(size=n) < probs
    n_conv = int(converts.sum())
    delays = rng.exponential(1.0, size=n_conv) / rates[converts]
    conv_ts = np.full(n, np.nan)
    conv_ts[converts] = click_ts[converts] + delays

    events = []
    for i in range(n):
        if isinstance(space, DiscreteSpace):
            cat = (int(cells[i]),)
            cont = ()
        else:
            cat = ()
            cont = tuple(float(v) for v in xs[i])
        events.append(
            ClickEvent(
                id=i,
                click_ts=float(click_ts[i]),
                conversion_ts=float(conv_ts[i]) if converts[i] else None,
                categorical_features=cat,
                continuous_features=cont,
            )
        )
    return events


def _hash_token(field_idx: int, token: str, buckets: int) -> int:
    digest = hashlib.blake2b(f"{field_idx}:{token}".encode(), digest_size=8).digest()
    return 1 + int.from_bytes(digest, "little") % (buckets - 1)


def parse_criteo_line(
    line: str,
    line_no: int = 1,
    hash_buckets: int = CRITEO_HASH_BUCKETS,
) -> ClickEvent:
    """Parse one Criteo conversion-log record.

    Tab-separated: click timestamp, conversion timestamp (empty if none),
    8 continuous features, 9 categorical tokens. Missing feature fields map
    to sentinels (-1.0 continuous, bucket 0 categorical); tokens are hashed
    into `hash_buckets` ids per field.
    """
    fields = line.rstrip("\n").split("\t")
    expected = 2 + CRITEO_N_CONTINUOUS + CRITEO_N_CATEGORICAL
    if len(fields) != expected:
        raise ParseError(f"expected {expected} columns, got {len(fields)}", line_no)
    try:
        click_ts = float(fields[0])
    except ValueError:
        raise ParseError(f"non-numeric click timestamp {fields[0]!r}", line_no) from None
    conv_field = fields[1]
    if conv_field == "":
        conversion_ts = None
    else:
        try:
            conversion_ts = float(conv_field)
        except ValueError:
            raise ParseError(f"non-numeric conversion timestamp {conv_field!r}", line_no) from None
    cont = []
    for raw in fields[2 : 2 + CRITEO_N_CONTINUOUS]:
        if raw == "":
            cont.append(MISSING_CONTINUOUS)
        else:
            try:
                cont.append(float(raw))
            except ValueError:
                raise ParseError(f"non-numeric continuous feature {raw!r}", line_no) from None
    cat = []
    for j, raw in enumerate(fields[2 + CRITEO_N_CONTINUOUS :]):
        cat.append(0 if raw == "" else _hash_token(j, raw, hash_buckets))
    return ClickEvent(
        id=line_no - 1,
        click_ts=click_ts,
        conversion_ts=conversion_ts,
        categorical_features=tuple(cat),
        continuous_features=tuple(cont),
    )


def load_criteo(path) -> list[ClickEvent]:
    """Read a Criteo-format log, normalize the epoch so the first click is
    t=0, and sort by click time."""
    events = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if line.strip() == "":
                continue
            events.append(parse_criteo_line(line, line_no))
    if not events:
        return events
    t0 = min(e.click_ts for e in events)
    shifted = [
        ClickEvent(
            id=e.id,
            click_ts=e.click_ts - t0,
            conversion_ts=None if e.conversion_ts is None else e.conversion_ts - t0,
            categorical_features=e.categorical_features,
            continuous_features=e.continuous_features,
        )
        for e in events
    ]
    shifted.sort(key=lambda e: e.click_ts)
    return shifted


def time_key(item) -> float:
    """Time coordinate used for bucketing: emit_ts for training samples,
    click_ts for raw events."""
    ts = getattr(item, "emit_ts", None)
    if ts is None:
        ts = item.click_ts
    return ts


@dataclass
class Bucket:
    """Half-open time window [index*width, (index+1)*width) with its items."""

    index: int
    width: float
    items: list = field(default_factory=list)

    @property
    def start(self) -> float:
        return self.index * self.width


def bucketize(stream: Sequence, width: float) -> list[Bucket]:
    """Split a time-sorted stream into contiguous fixed-width buckets.

    Buckets run from the first to the last occupied window; interior empty
    windows are included, so concatenating bucket items reproduces the
    input.
    """
    if width <= 0:
        raise ConfigurationError(f"width: must be > 0, got {width}")
    if not stream:
        return []
    times = [time_key(item) for item in stream]
    for a, b in zip(times, times[1:]):
        if b < a:
            raise OrderingError(f"stream not sorted by time key ({a} followed by {b})")
    first = int(math.floor(times[0] / width))
    last = int(math.floor(times[-1] / width))
    buckets = [Bucket(index=i, width=width) for i in range(first, last + 1)]
    for item, t in zip(stream, times):
        buckets[int(math.floor(t / width)) - first].items.append(item)
    return buckets


def split_pretrain_stream(stream: Sequence[ClickEvent]):
    """Split a click-sorted stream at its median click time: first half for
    pre-training, second half for streaming simulation."""
    times = [e.click_ts for e in stream]
    for a, b in zip(times, times[1:]):
        if b < a:
            raise OrderingError("stream not sorted by click_ts")
    mid = len(stream) // 2
    return list(stream[:mid]), list(stream[mid:])


def _fmt_float(v: float) -> str:
    return repr(float(v))


def write_events(events: Iterable[ClickEvent], path) -> None:
    """Write one event per line: id, click_ts, conversion_ts (empty when
    absent), categorical ids, continuous values. Bit-exact round trip."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            conv = "" if e.conversion_ts is None else _fmt_float(e.conversion_ts)
            cats = ",".join(str(c) for c in e.categorical_features)
            conts = ",".join(_fmt_float(v) for v in e.continuous_features)
            fh.write(f"{e.id}\t{_fmt_float(e.click_ts)}\t{conv}\t{cats}\t{conts}\n")


def read_events(path) -> list[ClickEvent]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            fields = line.rstrip("\n").split("\t")
            if len(fields) != 5:
                raise ParseError(f"expected 5 columns, got {len(fields)}", line_no)
            cats = tuple(int(c) for c in fields[3].split(",")) if fields[3] else ()
            conts = tuple(float(v) for v in fields[4].split(",")) if fields[4] else ()
            events.append(
                ClickEvent(
                    id=int(fields[0]),
                    click_ts=float(fields[1]),
                    conversion_ts=float(fields[2]) if fields[2] else None,
                    categorical_features=cats,
                    continuous_features=conts,
                )
            )
    return events
