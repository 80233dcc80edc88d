"""Compared methods, assembled as (stream transform x weight source x loss).

Each method owns a clone of the pretrained CVR model and knows how to
build its training stream from ground-truth events, how to weight a batch,
and how to serve predictions (calibrated where applicable).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datagen import ClickEvent
from .errors import ConfigurationError, NumericError
from .learner import Adam, MultiHeadMlp, TrainConfig, WeightedBatch, forward, train_step
from .relabel import (
    DiracPolicy,
    ElapsedPolicy,
    TrainingSample,
    transform_es,
    transform_fnw,
    transform_fsiw,
    transform_oracle,
)
from .weighters import SyntheticTruth, dfm_train_step, es_weight, fsiw_weight, ideal_dp_rn

logger = logging.getLogger(__name__)

METHOD_NAMES = ("pretrained", "vanilla", "oracle", "dfm", "fsiw", "fnw", "fnc", "es_dfm")


@dataclass(frozen=True)
class MethodSpec:
    """How one method trains and serves.

    transform: 'es', 'fnw', 'fsiw', 'oracle', or None (no stream);
    weighting: 'unit', 'es', 'es_ideal', 'fsiw', 'fnw_law', or 'none';
    loss: 'weighted_ce' or 'dfm_loss'; calibration: None or 'fnc'.
    """

    name: str
    transform: str | None
    weighting: str
    loss: str = "weighted_ce"
    calibration: str | None = None
    updates: bool = True

    @staticmethod
    def for_name(name: str, ideal_weights: bool = False) -> "MethodSpec":
        if name not in METHOD_NAMES:
            raise ConfigurationError(f"unknown method {name!r}; expected one of {METHOD_NAMES}")
        if ideal_weights and name != "es_dfm":
            raise ConfigurationError("ideal_weights only applies to es_dfm")
        table = {
            "pretrained": MethodSpec("pretrained", None, "unit", updates=False),
            "vanilla": MethodSpec("vanilla", "es", "unit"),
            "oracle": MethodSpec("oracle", "oracle", "unit"),
            "dfm": MethodSpec("dfm", "fsiw", "none", loss="dfm_loss"),
            "fsiw": MethodSpec("fsiw", "fsiw", "fsiw"),
            "fnw": MethodSpec("fnw", "fnw", "fnw_law"),
            "fnc": MethodSpec("fnc", "fnw", "unit", calibration="fnc"),
            "es_dfm": MethodSpec("es_dfm", "es", "es_ideal" if ideal_weights else "es"),
        }
        return table[name]


def fnw_weight(observed_label, p_hat):
    """Immediate-negative weighting law using the model's own (detached)
    prediction as the conversion-probability estimate: positives 1 + p,
    negatives (1 + p)(1 - p)."""
    label = np.asarray(observed_label, dtype=np.float64)
    p = np.asarray(p_hat, dtype=np.float64)
    w = np.where(label == 1, 1.0 + p, (1.0 + p) * (1.0 - p))
    return float(w) if w.ndim == 0 else w


def fnc_calibrate(q_hat):
    """Invert the immediate-negative label distortion q = p/(1+p):
    returns q/(1-q). Inputs at or above 0.5 are clamped just below and
    logged."""
    q = np.asarray(q_hat, dtype=np.float64)
    if np.any(~np.isfinite(q)) or np.any(q < 0):
        raise NumericError("q_hat: must be finite and >= 0")
    n_clamped = int(np.sum(q >= 0.5))
    if n_clamped:
        logger.warning("fnc_calibrate: clamped %d inputs at 0.5", n_clamped)
    qc = np.minimum(q, np.nextafter(0.5, 0.0))
    out = qc / (1.0 - qc)
    return float(out) if out.ndim == 0 else out


@dataclass
class Estimators:
    """Frozen auxiliary models a method may require."""

    dual_head: MultiHeadMlp | None = None
    fsiw: MultiHeadMlp | None = None
    dfm: MultiHeadMlp | None = None
    truth: SyntheticTruth | None = None


class RunnableMethod:
    """A method bound to its model copy and weight sources; drives one
    streaming run."""

    def __init__(
        self,
        spec: MethodSpec,
        model: MultiHeadMlp,
        config: TrainConfig,
        policy: ElapsedPolicy,
        estimators: Estimators,
    ):
        self.spec = spec
        self.model = model
        self.config = config
        self.policy = policy
        self.estimators = estimators
        self.opt = Adam(model, config) if spec.updates else None
        self._delay_by_id: dict[int, float] = {}
        self._ideal_cache: dict[tuple[int, int], float] = {}

    @property
    def name(self) -> str:
        return self.spec.name

    def build_training_stream(
        self, events: Sequence[ClickEvent], rng: np.random.Generator
    ) -> list[TrainingSample]:
        if self.spec.transform is None:
            return []
        if self.spec.transform == "es":
            return transform_es(events, self.policy, rng)
        if self.spec.transform == "fnw":
            return transform_fnw(events, rng)
        if self.spec.transform == "fsiw":
            if self.spec.loss == "dfm_loss":
                self._delay_by_id = {
                    e.id: e.delay for e in events if e.conversion_ts is not None
                }
            return transform_fsiw(events, self.policy, rng)
        if self.spec.transform == "oracle":
            return transform_oracle(events)
        raise ConfigurationError(f"unknown transform {self.spec.transform!r}")

    def predict(self, items: Sequence) -> np.ndarray:
        probs = forward(self.model, items, head="cvr")
        if self.spec.calibration == "fnc":
            probs = np.clip(fnc_calibrate(probs), self.model.prob_eps, 1.0 - self.model.prob_eps)
        return probs

    def _batch_weights(
        self, samples: Sequence[TrainingSample], cat, cont, labels
    ) -> np.ndarray:
        mode = self.spec.weighting
        if mode == "unit":
            return np.ones(len(labels))
        if mode == "es":
            est = self.estimators.dual_head
            f_dp = est.forward_probs(cat, cont, "dp")
            f_rn = est.forward_probs(cat, cont, "rn")
            return es_weight(labels, f_dp, f_rn)
        if mode == "es_ideal":
            truth = self.estimators.truth
            out = np.empty(len(samples))
            for i, s in enumerate(samples):
                x = s.categorical_features[0] if s.categorical_features else np.asarray(s.continuous_features)
                key = (s.categorical_features[0], s.observed_label) if s.categorical_features else None
                if key is not None and key in self._ideal_cache:
                    out[i] = self._ideal_cache[key]
                    continue
                p_dp, p_rn = ideal_dp_rn(truth, self.policy, x)
                out[i] = es_weight(s.observed_label, p_dp, p_rn)
                if key is not None:
                    self._ideal_cache[key] = out[i]
            return out
        if mode == "fsiw":
            est = self.estimators.fsiw
            f_obs = est.forward_probs(cat, cont, "obs")
            f_tn = est.forward_probs(cat, cont, "tn")
            return fsiw_weight(labels, f_obs, f_tn)
        if mode == "fnw_law":
            p_hat = self.model.forward_probs(cat, cont, "cvr")
            return fnw_weight(labels, p_hat)
        raise ConfigurationError(f"unknown weighting {mode!r}")

    def train_on(self, samples: Sequence[TrainingSample]) -> None:
        """One pass over a bucket's training samples in emit order."""
        if not self.spec.updates or not samples:
            return
        bs = self.config.batch_size
        for lo in range(0, len(samples), bs):
            chunk = samples[lo : lo + bs]
            cat, cont = self.model.space.encode(chunk)
            labels = np.array([s.observed_label for s in chunk], dtype=np.float64)
            if self.spec.loss == "dfm_loss":
                converted = labels == 1
                delays = np.array(
                    [self._delay_by_id.get(s.source_id, 0.0) if c else 0.0 for s, c in zip(chunk, converted)]
                )
                elapsed = np.array([s.elapsed for s in chunk])
                dfm_train_step(
                    self.model, cat, cont, converted, delays, elapsed, self.opt, self.config
                )
            else:
                weights = self._batch_weights(chunk, cat, cont, labels)
                batch = WeightedBatch(cat, cont, labels, weights)
                train_step(self.model, batch, self.opt, self.config)


def build_method(
    spec: MethodSpec,
    pretrained_model: MultiHeadMlp,
    config: TrainConfig,
    policy: ElapsedPolicy,
    estimators: Estimators | None = None,
) -> RunnableMethod:
    """Bind a method spec to a fresh copy of the pretrained model, checking
    that every estimator it needs is present."""
    estimators = estimators or Estimators()
    requirement = {
        "es": ("dual_head", estimators.dual_head),
        "es_ideal": ("truth", estimators.truth),
        "fsiw": ("fsiw", estimators.fsiw),
    }.get(spec.weighting)
    if requirement is not None and requirement[1] is None:
        raise ConfigurationError(f"method {spec.name!r} requires estimator {requirement[0]!r}")
    if spec.loss == "dfm_loss":
        if estimators.dfm is None:
            raise ConfigurationError(f"method {spec.name!r} requires estimator 'dfm'")
        model = estimators.dfm.clone()
    else:
        model = pretrained_model.clone()
    if spec.transform in ("es", "fsiw") and policy is None:
        raise ConfigurationError(f"method {spec.name!r} requires an elapsed policy")
    if spec.name in ("fnw", "fnc"):
        policy = DiracPolicy(0.0)
    return RunnableMethod(spec, model, config, policy, estimators)
