"""Importance weights for delayed-feedback training streams.

The elapsed-sampling weights decompose into two bounded probabilities: the
delayed-positive probability p_dp(x) = p(y=1|x) p(h>e|x) and the
real-negative probability p_rn(x) = p(y=0|x) / (p(y=0|x) + p(y=1|x) p(h>e|x)).
Positives are weighted 1 + p_dp, negatives (1 + p_dp) * p_rn, so every
weight lies in [0, 2] and no ratio of learned probabilities ever appears.

This module supplies the dual-head estimator of (p_dp, p_rn), exact
closed-form weights for synthetic truth, the auxiliary estimators used by
feedback-shift weighting, the joint CVR/delay likelihood of the classic
exponential-delay model, and the analytic fixed point that a CVR model
trained with a mis-set real-negative estimate converges to.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels as K
from .datagen import ClickEvent, DiscreteSpace, SyntheticTruth
from .errors import NumericError, TrainingError, UnsupportedOperationError
from .learner import Adam, FeatureSpace, MultiHeadMlp, TrainConfig, multihead_train_step
from .relabel import DiracPolicy, ElapsedPolicy, draw_elapsed

logger = logging.getLogger(__name__)

FSIW_RECIPROCAL_EPS = 1e-3


@dataclass(frozen=True, slots=True)
class DpRnSample:
    """One row of the dual-estimator training set. rn_mask is 0 exactly for
    observed positives, which the real-negative head never sees."""

    categorical_features: tuple[int, ...]
    continuous_features: tuple[float, ...]
    dp_label: int
    rn_label: int
    rn_mask: int


def build_dp_rn_dataset(
    stream: Sequence[ClickEvent],
    policy: ElapsedPolicy,
    attribution_window: float,
    rng: np.random.Generator,
) -> list[DpRnSample]:
    """Label each event for the two estimator heads using full ground truth
    up to the attribution window.

    dp_label = 1 iff the conversion lands in (e, window]; rn_label = 1 iff
    no conversion within the window; observed positives (h <= e) are masked
    out of the rn head.
    """
    out = []
    for event in stream:
        e = draw_elapsed(event, policy, rng)
        h = event.delay
        in_window = h is not None and h <= attribution_window
        if in_window and h <= e:
            out.append(DpRnSample(event.categorical_features, event.continuous_features, 0, 0, 0))
        elif in_window:
            out.append(DpRnSample(event.categorical_features, event.continuous_features, 1, 0, 1))
        else:
            out.append(DpRnSample(event.categorical_features, event.continuous_features, 0, 1, 1))
    return out


def make_dual_head(space: FeatureSpace, hidden=(256, 256, 128), emb_dim=8, seed=0) -> MultiHeadMlp:
    """Shared-trunk estimator with 'dp' and 'rn' probability heads; same
    architecture family as the CVR model."""
    return MultiHeadMlp(space, hidden=hidden, emb_dim=emb_dim, heads=(("dp", "prob"), ("rn", "prob")), seed=seed)


DualHeadEstimator = MultiHeadMlp


def train_dual_head(
    estimator: MultiHeadMlp,
    dataset: Sequence[DpRnSample],
    config: TrainConfig,
    epochs: int = 3,
) -> MultiHeadMlp:
    """Joint masked training of both heads over the dataset."""
    cat, cont = estimator.space.encode(dataset)
    dp = np.array([s.dp_label for s in dataset], dtype=np.float64)
    rn = np.array([s.rn_label for s in dataset], dtype=np.float64)
    mask = np.array([s.rn_mask for s in dataset], dtype=np.float64)
    ones = np.ones(len(dataset))
    opt = Adam(estimator, config)
    order_rng = np.random.default_rng(config.seed)
    n = len(dataset)
    for _ in range(epochs):
        order = order_rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            multihead_train_step(
                estimator,
                cat[idx],
                cont[idx],
                {"dp": (dp[idx], ones[idx]), "rn": (rn[idx], mask[idx])},
                opt,
                config,
            )
    return estimator


@dataclass(frozen=True, slots=True)
class FsiwSample:
    """Training row for the feedback-shift auxiliary heads: 'obs' learns
    p(h <= e | x, y=1) on converters, 'tn' learns the true-negative share
    among observed negatives."""

    categorical_features: tuple[int, ...]
    continuous_features: tuple[float, ...]
    obs_label: int
    obs_mask: int
    tn_label: int
    tn_mask: int


def build_fsiw_dataset(
    stream: Sequence[ClickEvent],
    policy: ElapsedPolicy,
    attribution_window: float,
    rng: np.random.Generator,
) -> list[FsiwSample]:
    out = []
    for event in stream:
        e = draw_elapsed(event, policy, rng)
        h = event.delay
        in_window = h is not None and h <= attribution_window
        if in_window:
            observed = h <= e
            out.append(
                FsiwSample(
                    event.categorical_features,
                    event.continuous_features,
                    obs_label=1 if observed else 0,
                    obs_mask=1,
                    tn_label=0,
                    tn_mask=0 if observed else 1,
                )
            )
        else:
            out.append(
                FsiwSample(
                    event.categorical_features,
                    event.continuous_features,
                    obs_label=0,
                    obs_mask=0,
                    tn_label=1,
                    tn_mask=1,
                )
            )
    return out


def make_fsiw_estimators(space: FeatureSpace, hidden=(256, 256, 128), emb_dim=8, seed=0) -> MultiHeadMlp:
    return MultiHeadMlp(space, hidden=hidden, emb_dim=emb_dim, heads=(("obs", "prob"), ("tn", "prob")), seed=seed)


def train_fsiw_estimators(
    estimator: MultiHeadMlp,
    dataset: Sequence[FsiwSample],
    config: TrainConfig,
    epochs: int = 3,
) -> MultiHeadMlp:
    cat, cont = estimator.space.encode(dataset)
    obs = np.array([s.obs_label for s in dataset], dtype=np.float64)
    obs_mask = np.array([s.obs_mask for s in dataset], dtype=np.float64)
    tn = np.array([s.tn_label for s in dataset], dtype=np.float64)
    tn_mask = np.array([s.tn_mask for s in dataset], dtype=np.float64)
    opt = Adam(estimator, config)
    order_rng = np.random.default_rng(config.seed)
    n = len(dataset)
    for _ in range(epochs):
        order = order_rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = order[lo : lo + config.batch_size]
            multihead_train_step(
                estimator,
                cat[idx],
                cont[idx],
                {"obs": (obs[idx], obs_mask[idx]), "tn": (tn[idx], tn_mask[idx])},
                opt,
                config,
            )
    return estimator


def es_weight(observed_label, f_dp_x, f_rn_x):
    """Elapsed-sampling importance weight from estimator outputs; always in
    [0, 2]. Accepts scalars or arrays."""
    label = np.asarray(observed_label, dtype=np.float64)
    f_dp = np.asarray(f_dp_x, dtype=np.float64)
    f_rn = np.asarray(f_rn_x, dtype=np.float64)
    for name, arr in (("f_dp_x", f_dp), ("f_rn_x", f_rn)):
        if np.any(~np.isfinite(arr)) or np.any(arr < 0) or np.any(arr > 1):
            raise NumericError(f"{name}: values must lie in [0, 1]")
    w = np.where(label == 1, 1.0 + f_dp, (1.0 + f_dp) * f_rn)
    return float(w) if w.ndim == 0 else w


def ideal_dp_rn(truth: SyntheticTruth, policy: ElapsedPolicy, x) -> tuple[float, float]:
    """Closed-form (p_dp, p_rn) for synthetic exponential delays under a
    constant waiting time."""
    if not isinstance(policy, DiracPolicy):
        raise UnsupportedOperationError("ideal weights require a dirac elapsed policy")
    if not truth.stationary:
        raise UnsupportedOperationError("ideal weights require stationary synthetic truth")
    p1 = truth.conversion_prob(x)
    lam = truth.delay_rate(x)
    g = 0.0 if math.isinf(policy.c) else math.exp(-lam * policy.c)
    p_dp = p1 * g
    p_rn = (1.0 - p1) / ((1.0 - p1) + p1 * g)
    return p_dp, p_rn


def ideal_weights(truth: SyntheticTruth, policy: ElapsedPolicy, x, observed_label) -> float:
    """Exact importance weight from known ground truth (synthetic only)."""
    p_dp, p_rn = ideal_dp_rn(truth, policy, x)
    return es_weight(observed_label, p_dp, p_rn)


def es_label_distribution(truth: SyntheticTruth, policy: ElapsedPolicy, x) -> tuple[float, float]:
    """Closed-form observed label law (q0, q1) of the elapsed-sampling
    stream with duplicates, including the 1 + p_dp renormalization."""
    if not isinstance(policy, DiracPolicy):
        raise UnsupportedOperationError("closed form requires a dirac elapsed policy")
    p1 = truth.conversion_prob(x)
    lam = truth.delay_rate(x)
    g = 0.0 if math.isinf(policy.c) else math.exp(-lam * policy.c)
    z = 1.0 + p1 * g
    q0 = ((1.0 - p1) + p1 * g) / z
    q1 = p1 / z
    return q0, q1


def importance_identity_check(
    truth: SyntheticTruth,
    policy: ElapsedPolicy,
    space: DiscreteSpace,
    n_loss_draws: int = 100,
    seed: int = 0,
) -> float:
    """Verify E_q[w * loss] == E_p[loss] cell by cell for a family of
    bounded test losses; returns the max absolute discrepancy (zero up to
    floating point when the weight algebra is right)."""
    rng = np.random.default_rng(seed)
    losses = [(1.0, 1.0), (1.0, 0.0), (0.0, 1.0)]
    losses += [tuple(rng.uniform(0.0, 1.0, size=2)) for _ in range(n_loss_draws)]
    worst = 0.0
    for cell in range(space.k):
        p1 = truth.conversion_prob(cell)
        q0, q1 = es_label_distribution(truth, policy, cell)
        p_dp, p_rn = ideal_dp_rn(truth, policy, cell)
        w1 = 1.0 + p_dp
        w0 = (1.0 + p_dp) * p_rn
        for l0, l1 in losses:
            lhs = q0 * w0 * l0 + q1 * w1 * l1
            rhs = (1.0 - p1) * l0 + p1 * l1
            worst = max(worst, abs(lhs - rhs))
    return worst


def fsiw_weight(observed_label, f_obs_x, f_tn_x, eps: float = FSIW_RECIPROCAL_EPS):
    """Feedback-shift weights: positives get the reciprocal of the
    observed-within-e probability (eps-guarded), negatives the estimated
    true-negative share."""
    label = np.asarray(observed_label, dtype=np.float64)
    f_obs = np.asarray(f_obs_x, dtype=np.float64)
    f_tn = np.asarray(f_tn_x, dtype=np.float64)
    n_guarded = int(np.sum((label == 1) & (f_obs < eps)))
    if n_guarded:
        logger.warning("fsiw_weight: reciprocal eps-guard hit on %d positives", n_guarded)
    w = np.where(label == 1, 1.0 / np.maximum(f_obs, eps), f_tn)
    return float(w) if w.ndim == 0 else w


def make_dfm_model(pretrained: MultiHeadMlp, init_delay_rate: float, seed: int = 0) -> MultiHeadMlp:
    """Joint CVR/delay model finetuned on top of a pretrained CVR model:
    trunk and CVR head start from the pretrained parameters, the delay head
    (rate = exp of a linear output) starts fresh with its bias set so the
    initial rate matches `init_delay_rate`."""
    model = MultiHeadMlp(
        pretrained.space,
        hidden=pretrained.hidden,
        emb_dim=pretrained.emb_dim,
        heads=(("cvr", "prob"), ("delay", "linear")),
        seed=seed,
        leaky_slope=pretrained.leaky_slope,
        prob_eps=pretrained.prob_eps,
    )
    for k, v in pretrained.params.items():
        model.params[k] = v.copy()
    model.params["Wh_delay"] *= 0.01
    model.params["bh_delay"][0] = math.log(init_delay_rate)
    return model


DfmModel = MultiHeadMlp

_RAW_RATE_CLIP = 30.0


def _dfm_terms(model: MultiHeadMlp, cat, cont, converted, delays, elapsed):
    cache = model.forward_train(cat, cont)
    p = model.head_output(cache, "cvr")
    raw = cache.head_logits["delay"]
    if np.any(~np.isfinite(raw)):
        raise NumericError("delay head produced a non-finite rate")
    lam = np.exp(np.clip(raw, -_RAW_RATE_CLIP, _RAW_RATE_CLIP))
    conv = np.asarray(converted, dtype=bool)
    d = np.asarray(delays, dtype=np.float64)
    e = np.asarray(elapsed, dtype=np.float64)
    surv = np.exp(-lam * np.where(conv, 0.0, e))
    # Converted: -[log p + log lam - lam*d]; unconverted: -log(1 - p(1 - exp(-lam*e))).
    s_unconv = 1.0 - p * (1.0 - surv)
    loss_vec = np.where(
        conv,
        -(np.log(p) + np.log(lam) - lam * d),
        -np.log(s_unconv),
    )
    return cache, p, lam, conv, d, e, surv, s_unconv, loss_vec


def dfm_loss(model: MultiHeadMlp, cat, cont, converted, delays, elapsed) -> float:
    """Summed joint negative log likelihood of conversion and exponential
    delay. Converted samples carry their observed delay d (d <= e);
    unconverted samples carry the elapsed observation time e."""
    *_, loss_vec = _dfm_terms(model, cat, cont, converted, delays, elapsed)
    return float(loss_vec.sum())


def dfm_train_step(
    model: MultiHeadMlp,
    cat,
    cont,
    converted,
    delays,
    elapsed,
    opt: Adam,
    config: TrainConfig,
) -> float:
    cache, p, lam, conv, d, e, surv, s_unconv, loss_vec = _dfm_terms(
        model, cat, cont, converted, delays, elapsed
    )
    loss = float(loss_vec.sum())
    interior = (p > model.prob_eps) & (p < 1.0 - model.prob_eps)
    d_cvr = np.where(
        conv,
        p - 1.0,
        p * (1.0 - p) * (1.0 - surv) / s_unconv,
    )
    d_cvr = np.where(interior, d_cvr, 0.0)
    clipped = np.abs(cache.head_logits["delay"]) >= _RAW_RATE_CLIP
    d_raw = np.where(
        conv,
        lam * d - 1.0,
        p * e * surv * lam / s_unconv,
    )
    d_raw = np.where(clipped, 0.0, d_raw)
    grads = model.backward(cache, {"cvr": d_cvr, "delay": d_raw})
    for k in model.l2_param_names:
        grads[k] = grads.get(k, 0.0) + config.l2_strength * model.params[k]
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite delay-model loss {loss!r} at adam step {opt.t + 1}")
    opt.step(model.params, grads)
    return loss


def analytic_fixed_point(p1: float, p_h_gt_e: float, f_rn_value: float) -> float:
    """Prediction the CVR model converges to when trained on the
    elapsed-sampling stream with a frozen real-negative estimate:
    p1 / (p1 + (p0 + p1 * p(h>e)) * f_rn). Exact f_rn recovers p1."""
    for name, v in (("p1", p1), ("p_h_gt_e", p_h_gt_e), ("f_rn_value", f_rn_value)):
        if not 0.0 <= v <= 1.0:
            raise NumericError(f"{name}: must be in [0, 1], got {v}")
    p_neg = (1.0 - p1) + p1 * p_h_gt_e
    denom = p1 + p_neg * f_rn_value
    if denom == 0.0:
        raise NumericError("fixed point undefined: zero denominator")
    return p1 / denom
