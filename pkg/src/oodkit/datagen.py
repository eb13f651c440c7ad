"""Synthetic ID/OOD datasets and the CSV format they are stored in."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .nn import Rng

OOD_LABEL = -1


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray    # (n,) ints; -1 marks OOD
    name: str = "data"

    def __post_init__(self):
        if self.features.ndim != 2 or len(self.features) == 0:
            raise ValueError(f"{self.name}: need a non-empty (n, d) feature matrix")
        if self.labels.shape != (len(self.features),):
            raise ValueError(f"{self.name}: one label per row required")
        if np.any(self.labels < OOD_LABEL):
            raise ValueError(f"{self.name}: labels must be -1 or a class index")
        if not np.all(np.isfinite(self.features)):
            raise ValueError(f"{self.name}: non-finite features")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_ood(self) -> bool:
        return bool(np.all(self.labels == OOD_LABEL))

    def subset(self, idx, name=None) -> "LabeledDataset":
        return LabeledDataset(self.features[idx], self.labels[idx], name or self.name)


def circle_means(n_classes: int, radius: float = 4.0, dims: int = 2, phase: float = 0.0) -> np.ndarray:
    """Class centres evenly spaced on a circle in the first two coordinates."""
    angles = phase + 2 * np.pi * np.arange(n_classes) / n_classes
    means = np.zeros((n_classes, dims))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def gaussian_mixture_id(n_classes, means, shared_sigma, n_per_class, rng: Rng, name="id") -> LabeledDataset:
    means = np.atleast_2d(np.asarray(means, dtype=float))
    if len(means) != n_classes:
        raise ValueError("one mean per class required")
    if shared_sigma <= 0:
        raise ValueError("sigma must be positive")
    if len(np.unique(means, axis=0)) != n_classes:
        raise ValueError("class means must be pairwise distinct")
    X = np.concatenate([mu + shared_sigma * rng.normal((n_per_class, means.shape[1])) for mu in means])
    y = np.repeat(np.arange(n_classes), n_per_class)
    return LabeledDataset(X, y, name)


def _ood(X, name):
    return LabeledDataset(np.asarray(X, dtype=float), np.full(len(X), OOD_LABEL), name)


def inflated_bounds(features, factor: float = 2.0):
    """Bounding box of ``features`` scaled by ``factor`` about its centre."""
    lo, hi = features.min(axis=0), features.max(axis=0)
    centre, half = (lo + hi) / 2, (hi - lo) / 2
    return centre - factor * half, centre + factor * half


def uniform_noise_ood(bounds, n, rng: Rng, name="uniform_noise") -> LabeledDataset:
    if n <= 0:
        raise ValueError("n must be positive")
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    return _ood(rng.uniform(lo, hi, (n, len(lo))), name)


def id_spread(features) -> float:
    """Root-mean-square per-coordinate standard deviation of a feature matrix."""
    return float(np.sqrt(np.mean(np.var(np.asarray(features, dtype=float), axis=0))))


def gaussian_noise_ood(mu, sigma, n, rng: Rng, name="gaussian_noise", reference=None) -> LabeledDataset:
    """Isotropic noise around ``mu``; ``sigma=None`` means twice the spread of ``reference``."""
    if n <= 0:
        raise ValueError("n must be positive")
    if sigma is None:
        if reference is None:
            raise ValueError("sigma=None needs reference ID features")
        sigma = 2.0 * id_spread(reference)
    mu = np.asarray(mu, dtype=float)
    return _ood(mu + sigma * rng.normal((n, len(mu))), name)


def held_out_cluster_ood(means_ood, sigma, n, rng: Rng, id_means=None, name="held_out_cluster") -> LabeledDataset:
    """Gaussian clusters of OOD points; ``n`` is split evenly over the clusters."""
    if n <= 0:
        raise ValueError("n must be positive")
    means_ood = np.atleast_2d(np.asarray(means_ood, dtype=float))
    if id_means is not None:
        gap = np.linalg.norm(means_ood[:, None] - np.atleast_2d(id_means)[None], axis=-1).min()
        if gap < 3 * sigma:
            raise ValueError(f"OOD cluster only {gap:.3g} from an ID mean (< 3 sigma)")
    parts = np.array_split(np.arange(n), len(means_ood))
    X = np.concatenate([mu + sigma * rng.normal((len(p), means_ood.shape[1])) for mu, p in zip(means_ood, parts)])
    return _ood(X, name)


def train_val_split(dataset: LabeledDataset, val_fraction: float, rng: Rng):
    """Stratified split: every class contributes round(val_fraction * n_c) rows."""
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must lie in (0, 1)")
    val_idx = []
    for c in np.unique(dataset.labels):
        rows = np.flatnonzero(dataset.labels == c)
        k = int(round(val_fraction * len(rows)))
        val_idx.append(rows[rng.permutation(len(rows))[:k]])
    val_idx = np.sort(np.concatenate(val_idx))
    mask = np.zeros(len(dataset), dtype=bool)
    mask[val_idx] = True
    return (dataset.subset(np.flatnonzero(~mask), f"{dataset.name}_train"),
            dataset.subset(val_idx, f"{dataset.name}_val"))


def write_csv(dataset: LabeledDataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(dataset.dim)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def read_csv(path, name=None) -> LabeledDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if not header or header[-1] != "label" or header[:-1] != [f"f{i}" for i in range(len(header) - 1)]:
        raise ValueError(f"{path}: expected header f0,...,f(d-1),label")
    data = rows[1:]
    X = np.array([[float(v) for v in r[:-1]] for r in data])
    y = np.array([int(r[-1]) for r in data], dtype=int)
    if name is None:
        name = os.path.splitext(os.path.basename(str(path)))[0]
    return LabeledDataset(X, y, name)
