"""Sample moments, Gaussian W2, model averaging and classification metrics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

LOG_CLAMP = 1e-12
N_BINS = 10


class ProbabilityClampWarning(RuntimeWarning):
    """A true-label probability fell below the log clamp."""


@dataclass(frozen=True)
class MomentSummary:
    mean: np.ndarray
    variance: np.ndarray
    count: int

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


@dataclass(frozen=True)
class CalibrationReport:
    """Per-bin accuracy, mean confidence and count; empty bins hold NaN."""

    edges: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray
    counts: np.ndarray
    ece: float


def _sample_array(samples) -> np.ndarray:
    arr = getattr(samples, "samples", samples)
    return np.asarray(arr, dtype=np.float64)


def moments(samples) -> MomentSummary:
    """Per-dimension mean and unbiased (n - 1) variance, two-pass.

    Accepts a :class:`~lpsgld.samplers.SampleSet` or an array whose first axis
    indexes samples.
    """
    x = _sample_array(samples)
    n = x.shape[0] if x.ndim else 0
    if n < 2:
        raise ValueError(f"moments need at least 2 samples, got {n}")
    mean = x.mean(axis=0)
    dev = x - mean
    return MomentSummary(mean, (dev * dev).sum(axis=0) / (n - 1), n)


def pooled_moments(samples) -> tuple[float, float]:
    """Mean and standard deviation over every entry, treating dimensions as i.i.d.

    Used for isotropic targets where each coordinate samples the same marginal.
    """
    x = _sample_array(samples).ravel()
    summary = moments(x)
    return float(summary.mean), float(summary.std)


def control_variate_moments(samples, reference, ref_mean: float, ref_var: float) -> tuple[float, float]:
    """Pooled mean and variance of ``samples`` using a coupled reference chain.

    ``reference`` must be driven by the same random numbers as ``samples`` and
    have known stationary moments ``ref_mean`` and ``ref_var``. The shared
    fluctuations cancel in the differences, so the estimate is much tighter
    than the plain sample moments when the two chains stay close.
    """
    x = _sample_array(samples).ravel()
    y = _sample_array(reference).ravel()
    if x.shape != y.shape or x.size == 0:
        raise ValueError("samples and reference must be non-empty and the same size")
    mean = float(np.mean(x - y)) + ref_mean
    second = float(np.mean((x - y) * (x + y))) + ref_var + ref_mean**2
    return mean, second - mean**2


def w2_gaussian(m1: float, s1: float, m2: float, s2: float) -> float:
    """2-Wasserstein distance between N(m1, s1**2) and N(m2, s2**2)."""
    if s1 < 0 or s2 < 0:
        raise ValueError("standard deviations must be non-negative")
    return math.hypot(m1 - m2, s1 - s2)


def bma_predict(samples, model, inputs) -> np.ndarray:
    """Average the predictive distributions of every posterior sample."""
    thetas = _sample_array(samples)
    if thetas.ndim != 2 or thetas.shape[0] == 0:
        raise ValueError("model averaging needs at least one sample")
    total = model.predict_proba(thetas[0], inputs)
    for theta in thetas[1:]:
        total = total + model.predict_proba(theta, inputs)
    return total / thetas.shape[0]


def _check_probs(probabilities, labels):
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probs.ndim != 2 or labels.shape != (probs.shape[0],):
        raise ValueError("probabilities must be (n, classes) and labels (n,)")
    if probs.shape[0] == 0:
        raise ValueError("empty evaluation set")
    return probs, labels


def nll(probabilities, labels) -> float:
    """Mean negative log probability of the true labels.

    Probabilities below ``1e-12`` are clamped and a
    :class:`ProbabilityClampWarning` is issued.
    """
    probs, labels = _check_probs(probabilities, labels)
    p_true = probs[np.arange(labels.size), labels]
    n_low = int(np.sum(p_true < LOG_CLAMP))
    if n_low:
        warnings.warn(
            f"{n_low} true-label probabilities below {LOG_CLAMP:g} were clamped",
            ProbabilityClampWarning,
            stacklevel=2,
        )
    return float(-np.mean(np.log(np.maximum(p_true, LOG_CLAMP))))


def error_rate(probabilities, labels) -> float:
    """Fraction of argmax mismatches; ties go to the lowest class index."""
    probs, labels = _check_probs(probabilities, labels)
    return float(np.mean(np.argmax(probs, axis=1) != labels))


def ece(probabilities, labels, n_bins: int = N_BINS) -> CalibrationReport:
    """Expected calibration error over equal-width, right-closed confidence bins.

    Bin ``b`` covers ``(b/n_bins, (b+1)/n_bins]``; confidence 0 falls in the
    first bin and 1.0 in the last.
    """
    probs, labels = _check_probs(probabilities, labels)
    confidence = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    bins = np.clip(np.searchsorted(edges, confidence, side="left") - 1, 0, n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins)
    # exactly rounded sums make the result independent of example order
    acc_sum = np.array([math.fsum(correct[bins == b]) for b in range(n_bins)])
    conf_sum = np.array([math.fsum(confidence[bins == b]) for b in range(n_bins)])
    with np.errstate(invalid="ignore", divide="ignore"):
        accuracy = acc_sum / counts
        mean_conf = conf_sum / counts
    value = math.fsum(np.abs(acc_sum - conf_sum)) / labels.size
    return CalibrationReport(edges, accuracy, mean_conf, counts, value)
