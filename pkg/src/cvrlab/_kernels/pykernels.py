"""NumPy implementations of the training inner-loop kernels.

This is the fallback backend; `cvrlab._kernels._ckernels` implements the
same functions in Cython. Formulas are written so that per-element
arithmetic matches the compiled backend operation for operation.
"""

from __future__ import annotations

import numpy as np

NAME = "python"


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def leaky_relu(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0.0, z, slope * z)


def leaky_relu_grad(z: np.ndarray, gout: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0.0, gout, slope * gout)


def bce_loss_grad(
    logits: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    eps: float,
) -> tuple[float, np.ndarray]:
    """Weighted sigmoid cross entropy from logits.

    Returns the summed loss over the batch and its gradient with respect
    to the logits. Probabilities are clamped to [eps, 1-eps] before the
    log; the gradient is the exact derivative of that clamped loss, so
    it is zero where the clamp is active.
    """
    p = sigmoid(logits)
    pc = np.clip(p, eps, 1.0 - eps)
    loss = -np.sum(weights * (labels * np.log(pc) + (1.0 - labels) * np.log(1.0 - pc)))
    interior = (p > eps) & (p < 1.0 - eps)
    grad = np.where(interior, weights * (p - labels), 0.0)
    return float(loss), grad


def adam_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float,
    beta2: float,
    eps: float,
) -> None:
    """One in-place Adam update with bias correction. `step` is 1-based."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    mhat = m / (1.0 - beta1**step)
    vhat = v / (1.0 - beta2**step)
    param -= lr * (mhat / (np.sqrt(vhat) + eps))


def gather_rows(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    return table[ids]


def scatter_add_rows(acc: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> None:
    """acc[ids[i], :] += rows[i, :], with repeated ids accumulating."""
    np.add.at(acc, ids, rows)
