"""Metrics: Euclidean localization error, Dice overlap, thresholding,
and the paired Student t-test used to compare the two training schemes.

The t-test p-value is two-sided and computed through the regularized
incomplete beta function (continued-fraction evaluation), so the package
needs no statistics dependency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import data as D
from .errors import ParameterError, ShapeError
from .model import UNetModel, forward_localize, forward_segment
from .tensor import Tensor


def euclidean_error(pred, truth) -> float:
    """Pixel distance between two (x, y) points."""
    return math.hypot(pred[0] - truth[0], pred[1] - truth[1])


def threshold_mask(prob, threshold: float = 0.5) -> np.ndarray:
    """Binary mask via strict comparison: 1 where prob > threshold."""
    values = prob.values if isinstance(prob, Tensor) else np.asarray(prob)
    return (values > threshold).astype(np.uint8)


def dice_coefficient(a: np.ndarray, b: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); two empty masks count as perfect overlap."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    na = int((a > 0).sum())
    nb = int((b > 0).sum())
    if na + nb == 0:
        return 1.0
    inter = int(((a > 0) & (b > 0)).sum())
    return 2.0 * inter / (na + nb)


# -- Student t machinery ------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    max_iter, eps, fpmin = 300, 3e-16, 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < fpmin:
        d = fpmin
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < fpmin:
            d = fpmin
        c = 1.0 + aa / c
        if abs(c) < fpmin:
            c = fpmin
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log(1.0 - x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: int
    p: float


def paired_t_test(pretrained, baseline) -> TTestResult:
    """Two-sided paired t-test on per-sample score differences.

    Zero-variance differences degenerate to p=1 (zero mean) or p=0 with
    t = +-inf (nonzero mean).
    """
    pre = np.asarray(pretrained, dtype=np.float64)
    base = np.asarray(baseline, dtype=np.float64)
    if pre.shape != base.shape or pre.ndim != 1:
        raise ParameterError(f"paired score arrays must match, got {pre.shape} vs {base.shape}")
    n = pre.size
    if n < 2:
        raise ParameterError(f"need at least 2 pairs, got {n}")
    d = pre - base
    mean = d.mean()
    sd = d.std(ddof=1)
    df = n - 1
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(t=0.0, df=df, p=1.0)
        return TTestResult(t=math.copysign(math.inf, mean), df=df, p=0.0)
    t = float(mean / (sd / math.sqrt(n)))
    # two-sided p through the t-distribution tail identity
    p = regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
    return TTestResult(t=t, df=df, p=p)


# -- model-level reports ------------------------------------------------------


@dataclass(frozen=True)
class LocalizationReport:
    mse: float             # per-coordinate mean of squared error, px^2
    mean_euclidean: float  # mean distance in px
    n: int


def predict_centroids(model: UNetModel, samples: list, batch_size: int = 16) -> np.ndarray:
    preds = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        out = forward_localize(model, Tensor(D.stack_images(chunk)), "eval")
        preds.append(out.values)
    return np.concatenate(preds, axis=0)


def localization_stats(preds: np.ndarray, truth: np.ndarray) -> tuple:
    """(per-coordinate mean squared error, mean Euclidean distance)."""
    err = np.asarray(preds, dtype=np.float64) - np.asarray(truth, dtype=np.float64)
    mse = float((err ** 2).mean())
    euclid = float(np.hypot(err[:, 0], err[:, 1]).mean())
    return mse, euclid


def mse_localization_report(model: UNetModel, samples: list,
                            batch_size: int = 16) -> LocalizationReport:
    if not samples:
        raise ParameterError("cannot evaluate on an empty split")
    preds = predict_centroids(model, samples, batch_size)
    mse, euclid = localization_stats(preds, D.stack_centroids(samples))
    return LocalizationReport(mse=mse, mean_euclidean=euclid, n=len(samples))


def predict_masks(model: UNetModel, samples: list, batch_size: int = 8) -> np.ndarray:
    probs = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        out = forward_segment(model, Tensor(D.stack_images(chunk)), "eval")
        probs.append(out.values)
    return np.concatenate(probs, axis=0)


def segmentation_dice_scores(model: UNetModel, samples: list, threshold: float = 0.5,
                             batch_size: int = 8) -> list:
    """Per-image Dice of thresholded predictions against ground truth."""
    if not samples:
        raise ParameterError("cannot evaluate on an empty split")
    probs = predict_masks(model, samples, batch_size)
    scores = []
    for prob, sample in zip(probs, samples):
        pred = threshold_mask(prob[0], threshold)
        scores.append(dice_coefficient(pred, sample.mask))
    return scores
