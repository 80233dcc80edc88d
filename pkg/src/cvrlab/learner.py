"""The CVR predictor: embeddings + feed-forward net with leaky-rectifier
activations, trained by per-sample-weighted cross entropy with Adam.

Everything runs in double precision so gradient checks against central
finite differences are reliable. The same multi-head network also backs
the auxiliary weight estimators; heads are named scalar outputs, either
'prob' (sigmoid, clamped away from {0,1}) or 'linear' (raw).
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels as K
from .errors import ConfigurationError, InputError, NumericError, TrainingError

CHECKPOINT_FORMAT = "cvrlab-checkpoint-1"


@dataclass(frozen=True)
class FeatureSpace:
    """Declared model input space plus the frozen continuous-feature
    standardization (computed once on the pre-training half)."""

    cat_vocab_sizes: tuple[int, ...]
    n_continuous: int
    cont_shift: tuple[float, ...] = ()
    cont_scale: tuple[float, ...] = ()
    log1p: bool = False

    @staticmethod
    def from_events(items: Sequence, cat_vocab_sizes: Sequence[int], log1p: bool = False) -> "FeatureSpace":
        """Fit standardization on `items` (shift = mean, scale = std)."""
        n_cont = len(items[0].continuous_features) if items else 0
        if n_cont == 0:
            return FeatureSpace(tuple(int(v) for v in cat_vocab_sizes), 0, (), (), log1p)
        raw = np.array([it.continuous_features for it in items], dtype=np.float64)
        if log1p:
            raw = np.log1p(np.maximum(raw, 0.0))
        shift = raw.mean(axis=0)
        scale = raw.std(axis=0)
        scale[scale < 1e-12] = 1.0
        return FeatureSpace(
            tuple(int(v) for v in cat_vocab_sizes),
            n_cont,
            tuple(float(v) for v in shift),
            tuple(float(v) for v in scale),
            log1p,
        )

    def encode(self, items: Sequence) -> tuple[np.ndarray, np.ndarray]:
        """Items (events or training samples) to (cat ids, standardized
        continuous) arrays."""
        n = len(items)
        n_cat = len(self.cat_vocab_sizes)
        if n == 0:
            return (np.zeros((0, n_cat), dtype=np.int64), np.zeros((0, self.n_continuous)))
        cat = np.array([it.categorical_features for it in items], dtype=np.int64).reshape(n, -1)
        if cat.shape[1] != n_cat:
            raise InputError(f"expected {n_cat} categorical fields, got {cat.shape[1]}")
        for f, vocab in enumerate(self.cat_vocab_sizes):
            col = cat[:, f]
            if col.size and (col.min() < 0 or col.max() >= vocab):
                raise InputError(f"categorical field {f}: id outside [0, {vocab})")
        cont = np.array([it.continuous_features for it in items], dtype=np.float64).reshape(n, -1)
        if cont.shape[1] != self.n_continuous:
            raise InputError(f"expected {self.n_continuous} continuous features, got {cont.shape[1]}")
        if self.n_continuous:
            if self.log1p:
                cont = np.log1p(np.maximum(cont, 0.0))
            cont = (cont - np.asarray(self.cont_shift)) / np.asarray(self.cont_scale)
        return cat, np.ascontiguousarray(cont)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    l2_strength: float = 1e-6
    batch_size: int = 1024
    prob_eps: float = 1e-7
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name}: must be > 0")
        if self.l2_strength < 0:
            raise ConfigurationError("l2_strength: must be >= 0")
        if not 0.0 < self.prob_eps < 0.5:
            raise ConfigurationError(f"prob_eps: must be in (0, 0.5), got {self.prob_eps}")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ConfigurationError("adam betas: must be in [0, 1)")


@dataclass
class WeightedBatch:
    """Encoded features with labels and nonnegative per-sample weights."""

    cat: np.ndarray
    cont: np.ndarray
    labels: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        n = len(self.labels)
        if not (len(self.cat) == len(self.cont) == len(self.weights) == n):
            raise NumericError("batch arrays must have equal length")
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights < 0):
            raise NumericError("weights must be finite and non-negative")


@dataclass
class TrainCache:
    cat: np.ndarray
    cont: np.ndarray
    activations: list[np.ndarray]  # activations[0] is the input layer
    pre_activations: list[np.ndarray]
    head_logits: dict[str, np.ndarray]


class MultiHeadMlp:
    """Embedding tables per categorical field feeding a shared trunk of
    dense layers, with one scalar output head per name."""

    def __init__(
        self,
        space: FeatureSpace,
        hidden: Sequence[int] = (256, 256, 128),
        emb_dim: int = 8,
        heads: Sequence[tuple[str, str]] = (("cvr", "prob"),),
        seed: int = 0,
        leaky_slope: float = 0.01,
        prob_eps: float = 1e-7,
    ):
        self.space = space
        self.hidden = tuple(int(h) for h in hidden)
        self.emb_dim = int(emb_dim)
        self.heads = {name: act for name, act in heads}
        for act in self.heads.values():
            if act not in ("prob", "linear"):
                raise ConfigurationError(f"head activation must be 'prob' or 'linear', got {act!r}")
        self.leaky_slope = float(leaky_slope)
        self.prob_eps = float(prob_eps)
        self.input_dim = len(space.cat_vocab_sizes) * self.emb_dim + space.n_continuous
        if self.input_dim == 0:
            raise ConfigurationError("feature space is empty")
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        for f, vocab in enumerate(space.cat_vocab_sizes):
            self.params[f"emb{f}"] = rng.normal(0.0, 0.1, size=(vocab, self.emb_dim))
        d_prev = self.input_dim
        for l, d in enumerate(self.hidden):
            self.params[f"W{l}"] = rng.normal(0.0, np.sqrt(2.0 / d_prev), size=(d_prev, d))
            self.params[f"b{l}"] = np.zeros(d)
            d_prev = d
        for name in self.heads:
            self.params[f"Wh_{name}"] = rng.normal(0.0, np.sqrt(1.0 / d_prev), size=(d_prev,))
            self.params[f"bh_{name}"] = np.zeros(1)

    @property
    def l2_param_names(self) -> list[str]:
        """Dense weight matrices regularized by the L2 term (biases and
        embeddings excluded)."""
        names = [f"W{l}" for l in range(len(self.hidden))]
        names += [f"Wh_{name}" for name in self.heads]
        return names

    def forward_train(self, cat: np.ndarray, cont: np.ndarray) -> TrainCache:
        parts = [K.gather_rows(self.params[f"emb{f}"], cat[:, f]) for f in range(cat.shape[1])]
        if cont.shape[1]:
            parts.append(cont)
        x = np.ascontiguousarray(np.concatenate(parts, axis=1)) if len(parts) > 1 else parts[0]
        activations = [x]
        pre = []
        for l in range(len(self.hidden)):
            z = activations[-1] @ self.params[f"W{l}"] + self.params[f"b{l}"]
            pre.append(z)
            activations.append(K.leaky_relu(z, self.leaky_slope))
        top = activations[-1]
        logits = {
            name: top @ self.params[f"Wh_{name}"] + self.params[f"bh_{name}"][0]
            for name in self.heads
        }
        return TrainCache(cat, cont, activations, pre, logits)

    def backward(self, cache: TrainCache, dlogits: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given its gradient at each head
        logit. Heads absent from `dlogits` contribute nothing."""
        top = cache.activations[-1]
        d_top = np.zeros_like(top)
        grads: dict[str, np.ndarray] = {}
        for name, dlog in dlogits.items():
            grads[f"Wh_{name}"] = top.T @ dlog
            grads[f"bh_{name}"] = np.array([dlog.sum()])
            d_top += np.outer(dlog, self.params[f"Wh_{name}"])
        d_act = d_top
        for l in range(len(self.hidden) - 1, -1, -1):
            dz = K.leaky_relu_grad(cache.pre_activations[l], d_act, self.leaky_slope)
            grads[f"W{l}"] = cache.activations[l].T @ dz
            grads[f"b{l}"] = dz.sum(axis=0)
            d_act = dz @ self.params[f"W{l}"].T
        for f in range(cache.cat.shape[1]):
            g = np.zeros_like(self.params[f"emb{f}"])
            rows = np.ascontiguousarray(d_act[:, f * self.emb_dim : (f + 1) * self.emb_dim])
            K.scatter_add_rows(g, cache.cat[:, f], rows)
            grads[f"emb{f}"] = g
        return grads

    def head_output(self, cache: TrainCache, head: str) -> np.ndarray:
        """Activation-applied head output; 'prob' heads are clamped to
        [prob_eps, 1 - prob_eps]."""
        logit = cache.head_logits[head]
        if self.heads[head] == "prob":
            return np.clip(K.sigmoid(logit), self.prob_eps, 1.0 - self.prob_eps)
        return logit

    def forward_probs(self, cat: np.ndarray, cont: np.ndarray, head: str = "cvr") -> np.ndarray:
        return self.head_output(self.forward_train(cat, cont), head)

    def clone(self) -> "MultiHeadMlp":
        other = object.__new__(MultiHeadMlp)
        other.space = self.space
        other.hidden = self.hidden
        other.emb_dim = self.emb_dim
        other.heads = dict(self.heads)
        other.leaky_slope = self.leaky_slope
        other.prob_eps = self.prob_eps
        other.input_dim = self.input_dim
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other


# The CVR prediction model is the single-head case.
MlpModel = MultiHeadMlp


def forward(model: MultiHeadMlp, items: Sequence, head: str = "cvr", chunk: int = 8192) -> np.ndarray:
    """Predict probabilities for raw events or training samples."""
    out = np.empty(len(items))
    for lo in range(0, len(items), chunk):
        cat, cont = model.space.encode(items[lo : lo + chunk])
        out[lo : lo + len(cat)] = model.forward_probs(cat, cont, head)
    return out


def weighted_ce(probs, labels, weights, l2_term: float = 0.0) -> float:
    """Per-sample-weighted cross entropy, summed, plus an optional
    regularization term. With unit weights this is plain summed CE."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if not (np.all(np.isfinite(weights)) and np.all(weights >= 0)):
        raise NumericError("weights must be finite and non-negative")
    if np.any(probs <= 0) or np.any(probs >= 1):
        raise NumericError("probs must lie strictly inside (0, 1)")
    data = -np.sum(weights * (labels * np.log(probs) + (1.0 - labels) * np.log(1.0 - probs)))
    return float(data) + float(l2_term)


def l2_penalty(model: MultiHeadMlp, l2_strength: float) -> float:
    if l2_strength == 0.0:
        return 0.0
    total = sum(float(np.sum(model.params[k] ** 2)) for k in model.l2_param_names)
    return 0.5 * l2_strength * total


class Adam:
    """Classic Adam with bias correction over a named parameter dict.
    Every named parameter is updated every step."""

    def __init__(self, model: MultiHeadMlp, config: TrainConfig):
        self.config = config
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c = self.config
        for k, p in params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros_like(p)
            K.adam_update(p, g, self.m[k], self.v[k], self.t, c.learning_rate, c.adam_beta1, c.adam_beta2, c.adam_eps)


def _add_l2_grads(model: MultiHeadMlp, grads: dict[str, np.ndarray], l2: float) -> None:
    if l2 == 0.0:
        return
    for k in model.l2_param_names:
        if k in grads:
            grads[k] += l2 * model.params[k]
        else:
            grads[k] = l2 * model.params[k]


def train_step(model: MultiHeadMlp, batch: WeightedBatch, opt: Adam, config: TrainConfig, head: str = "cvr") -> float:
    """One Adam update on the weighted-CE gradient; returns the batch loss
    (data term + L2 penalty)."""
    cache = model.forward_train(batch.cat, batch.cont)
    loss, dlogit = K.bce_loss_grad(
        np.ascontiguousarray(cache.head_logits[head]),
        np.ascontiguousarray(batch.labels, dtype=np.float64),
        np.ascontiguousarray(batch.weights, dtype=np.float64),
        model.prob_eps,
    )
    grads = model.backward(cache, {head: dlogit})
    _add_l2_grads(model, grads, config.l2_strength)
    loss += l2_penalty(model, config.l2_strength)
    if not np.isfinite(loss):
        raise TrainingError(
            f"non-finite loss {loss!r} at adam step {opt.t + 1} "
            f"(batch size {len(batch.labels)}, max |logit| "
            f"{float(np.max(np.abs(cache.head_logits[head]))):.3g})"
        )
    opt.step(model.params, grads)
    return float(loss)


def multihead_train_step(
    model: MultiHeadMlp,
    cat: np.ndarray,
    cont: np.ndarray,
    head_targets: dict[str, tuple[np.ndarray, np.ndarray]],
    opt: Adam,
    config: TrainConfig,
) -> float:
    """Joint step over several prob heads; each target is (labels, weights)
    and per-head masks are expressed as zero weights."""
    cache = model.forward_train(cat, cont)
    total = 0.0
    dlogits = {}
    for head, (labels, weights) in head_targets.items():
        loss, dlog = K.bce_loss_grad(
            np.ascontiguousarray(cache.head_logits[head]),
            np.ascontiguousarray(labels, dtype=np.float64),
            np.ascontiguousarray(weights, dtype=np.float64),
            model.prob_eps,
        )
        total += loss
        dlogits[head] = dlog
    grads = model.backward(cache, dlogits)
    _add_l2_grads(model, grads, config.l2_strength)
    total += l2_penalty(model, config.l2_strength)
    if not np.isfinite(total):
        raise TrainingError(f"non-finite loss {total!r} at adam step {opt.t + 1}")
    opt.step(model.params, grads)
    return float(total)


def save_checkpoint(model: MultiHeadMlp, path) -> None:
    """Self-describing .npz checkpoint; parameter round trip is bit-exact."""
    meta = {
        "format": CHECKPOINT_FORMAT,
        "hidden": list(model.hidden),
        "emb_dim": model.emb_dim,
        "heads": [[name, act] for name, act in model.heads.items()],
        "leaky_slope": model.leaky_slope,
        "prob_eps": model.prob_eps,
        "space": {
            "cat_vocab_sizes": list(model.space.cat_vocab_sizes),
            "n_continuous": model.space.n_continuous,
            "cont_shift": list(model.space.cont_shift),
            "cont_scale": list(model.space.cont_scale),
            "log1p": model.space.log1p,
        },
    }
    buf = io.BytesIO()
    np.savez(buf, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **model.params)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> MultiHeadMlp:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ConfigurationError(f"unknown checkpoint format {meta.get('format')!r}")
        sp = meta["space"]
        space = FeatureSpace(
            cat_vocab_sizes=tuple(sp["cat_vocab_sizes"]),
            n_continuous=sp["n_continuous"],
            cont_shift=tuple(sp["cont_shift"]),
            cont_scale=tuple(sp["cont_scale"]),
            log1p=sp["log1p"],
        )
        model = MultiHeadMlp(
            space,
            hidden=meta["hidden"],
            emb_dim=meta["emb_dim"],
            heads=[tuple(h) for h in meta["heads"]],
            leaky_slope=meta["leaky_slope"],
            prob_eps=meta["prob_eps"],
        )
        for k in model.params:
            model.params[k] = np.ascontiguousarray(data[k], dtype=np.float64)
    return model
