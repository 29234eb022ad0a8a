"""Elementary differentiable losses with analytic gradients.

Every loss that trains something returns a :class:`LossWithGrad` whose
``grads`` map is keyed by parameter name. Backward passes are derived by
hand; :func:`finite_difference_check` is the oracle used to verify them.
All arithmetic is double precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimMismatchError, IndexOutOfRangeError, ZeroNormError
from .tensorio import assert_same_shape

PROB_FLOOR = 1e-9
DICE_SMOOTHING = 1e-5
ZERO_NORM_TOL = 1e-12


@dataclass
class LossWithGrad:
    """Scalar loss value plus gradients keyed by parameter name."""

    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimMismatchError(f"vector lengths differ: {a.shape} vs {b.shape}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < ZERO_NORM_TOL or nb < ZERO_NORM_TOL:
        raise ZeroNormError("degenerate embedding: vector norm below 1e-12")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def softmax(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature-scaled softmax, stable under max-subtraction."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / temperature
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def kl_divergence(q: np.ndarray, p: np.ndarray) -> float:
    """KL(q || p) with p floored at 1e-9 and the 0*log(0) = 0 convention."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if q.shape != p.shape:
        raise DimMismatchError(f"distribution lengths differ: {q.shape} vs {p.shape}")
    p = np.maximum(p, PROB_FLOOR)
    terms = np.where(q > 0, q * (np.log(np.maximum(q, PROB_FLOOR)) - np.log(p)), 0.0)
    return float(np.sum(terms))


def token_nll(probs: np.ndarray, targets: np.ndarray) -> LossWithGrad:
    """Mean negative log-likelihood of target tokens over steps.

    ``probs`` is (steps, vocab) per-step probability vectors; gradient is
    with respect to the probability entries.
    """
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if probs.ndim != 2 or targets.ndim != 1 or probs.shape[0] != targets.shape[0]:
        raise DimMismatchError("probs must be (steps, vocab) with one target per step")
    steps, vocab = probs.shape
    if np.any(targets < 0) or np.any(targets >= vocab):
        raise IndexOutOfRangeError("target index outside vocabulary")
    picked = np.maximum(probs[np.arange(steps), targets], PROB_FLOOR)
    value = float(-np.mean(np.log(picked)))
    grad = np.zeros_like(probs)
    # d/dp of -log(max(p, floor)) is 0 below the floor
    active = probs[np.arange(steps), targets] > PROB_FLOOR
    grad[np.arange(steps), targets] = np.where(active, -1.0 / (picked * steps), 0.0)
    return LossWithGrad(value, {"probs": grad})


def mse_loss(x: np.ndarray, x_hat: np.ndarray) -> LossWithGrad:
    """Mean squared error; gradient is with respect to the reconstruction."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    assert_same_shape(x, x_hat)
    diff = x_hat - x
    value = float(np.mean(diff * diff))
    return LossWithGrad(value, {"x_hat": 2.0 * diff / diff.size})


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """Soft Dice overlap (2*sum(p*g)+s) / (sum(p^2)+sum(g^2)+s)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    assert_same_shape(pred, gt)
    num = 2.0 * float(np.sum(pred * gt)) + DICE_SMOOTHING
    den = float(np.sum(pred * pred) + np.sum(gt * gt)) + DICE_SMOOTHING
    return num / den


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def dice_bce_loss(
    pred_logits: np.ndarray,
    gt: np.ndarray,
    lambda_dice: float = 1.0,
    lambda_bce: float = 1.0,
) -> LossWithGrad:
    """lambda_dice*(1 - Dice) + lambda_bce*BCE with analytic logit gradient."""
    if lambda_dice < 0 or lambda_bce < 0:
        raise ValueError("loss weights must be nonnegative")
    z = np.asarray(pred_logits, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    assert_same_shape(z, g)
    p = _sigmoid(z)
    n = p.size

    num = 2.0 * float(np.sum(p * g)) + DICE_SMOOTHING
    den = float(np.sum(p * p) + np.sum(g * g)) + DICE_SMOOTHING
    dice = num / den

    pc = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    bce = float(-np.mean(g * np.log(pc) + (1.0 - g) * np.log(1.0 - pc)))

    value = lambda_dice * (1.0 - dice) + lambda_bce * bce

    # d(dice)/dp = (2g*den - 2p*num) / den^2, and dp/dz = p(1-p)
    ddice_dp = (2.0 * g * den - 2.0 * p * num) / (den * den)
    dbce_dp = (pc - g) / (pc * (1.0 - pc) * n)
    dvalue_dp = -lambda_dice * ddice_dp + lambda_bce * dbce_dp
    grad = dvalue_dp * p * (1.0 - p)
    return LossWithGrad(value, {"pred_logits": grad})


def finite_difference_check(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic_grad: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max relative error between central differences and the analytic grad.

    Relative to the finite-difference estimate, so that a gradient scaled
    by 2x reports an error of about 1.
    """
    x = np.asarray(x, dtype=np.float64)
    analytic_grad = np.asarray(analytic_grad, dtype=np.float64)
    assert_same_shape(x, analytic_grad)
    worst = 0.0
    flat = x.reshape(-1)
    gflat = analytic_grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        fd = (fp - fm) / (2.0 * h)
        err = abs(fd - gflat[i]) / max(1e-8, abs(fd))
        worst = max(worst, err)
    return worst
