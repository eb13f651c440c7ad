"""OOD score functions. Higher always means more in-distribution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .losses import MetricHead, cosine_logits, plain_logits, softmax
from .nn import Mlp, NumericError

SCORE_KINDS = ("msp", "energy", "mahalanobis", "maxcos")


def msp_score(probabilities) -> np.ndarray | float:
    """Maximum class probability. Accepts one C-vector or an (n, C) batch."""
    p = np.asarray(probabilities, dtype=float)
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("probabilities must be non-negative and sum to 1")
    return p.max(axis=-1)


def energy_score(logits, T: float = 1.0):
    """T * logsumexp(logits / T) along the class axis."""
    if T <= 0:
        raise ValueError("temperature must be positive")
    return T * logsumexp(np.asarray(logits, dtype=float) / T, axis=-1)


@dataclass(frozen=True)
class GaussianStats:
    means: np.ndarray       # (C, d)
    covariance: np.ndarray  # (d, d), ridge included
    precision: np.ndarray
    ridge: float


def fit_gaussian_stats(features, labels) -> GaussianStats:
    """Class means and one pooled covariance of the class-centred features, with a
    small ridge (1e-6 * mean variance) for conditioning."""
    X = np.asarray(features, dtype=float)
    y = np.asarray(labels).astype(int)
    classes = np.unique(y)
    if np.any(classes < 0):
        raise ValueError("OOD rows (label -1) cannot be used to fit class statistics")
    counts = np.bincount(y)
    if np.any(counts[classes] < 2):
        raise ValueError("need at least two samples per class")
    n_classes = int(classes.max()) + 1
    means = np.zeros((n_classes, X.shape[1]))
    centered = np.empty_like(X)
    for c in classes:
        rows = y == c
        means[c] = X[rows].mean(axis=0)
        centered[rows] = X[rows] - means[c]
    cov = centered.T @ centered / len(X)
    d = X.shape[1]
    ridge = 1e-6 * np.trace(cov) / d
    if ridge <= 0:
        ridge = 1e-12
    for _ in range(4):
        reg = cov + ridge * np.eye(d)
        try:
            np.linalg.cholesky(reg)
            precision = np.linalg.inv(reg)
            if np.all(np.isfinite(precision)):
                return GaussianStats(means, reg, precision, ridge)
        except np.linalg.LinAlgError:
            pass
        ridge *= 10
    raise NumericError("pooled covariance is singular even after ridge regularisation")


def mahalanobis_score(z, stats: GaussianStats):
    """Negative smallest squared Mahalanobis distance to any class mean."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    diff = z[:, None, :] - stats.means[None, :, :]
    d2 = np.einsum("ncd,de,nce->nc", diff, stats.precision, diff)
    out = -np.maximum(d2.min(axis=1), 0.0)
    return float(out[0]) if single else out


def max_cosine_score(z, head: MetricHead):
    z = np.asarray(z, dtype=float)
    out = cosine_logits(np.atleast_2d(z), head).max(axis=1)
    return float(out[0]) if z.ndim == 1 else out


def compute_scores(kind: str, z, head: MetricHead, stats: GaussianStats | None = None,
                   temperature: float = 1.0) -> np.ndarray:
    """Batch scores of penultimate features ``z`` for one score kind."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if kind == "msp":
        return msp_score(softmax(plain_logits(z, head)))
    if kind == "energy":
        return energy_score(plain_logits(z, head), temperature)
    if kind == "mahalanobis":
        if stats is None:
            raise ValueError("mahalanobis scoring needs fitted GaussianStats")
        return mahalanobis_score(z, stats)
    if kind == "maxcos":
        return max_cosine_score(z, head)
    raise ValueError(f"unknown score kind {kind!r}")


def default_score(head: MetricHead) -> str:
    """Detection score used by the decision rule: MSP for softmax heads, max cosine
    for the metric-learning heads."""
    return "msp" if head.kind == "softmax" else "maxcos"


def score_inputs(kind: str, model: Mlp, head: MetricHead, x, stats=None, temperature=1.0):
    return compute_scores(kind, model(x), head, stats, temperature)
