"""Classifier training with or without outlier exposure."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .datagen import LabeledDataset
from .losses import MetricHead, make_head, outlier_exposure_loss
from .nn import SGD, Mlp, NumericError, Rng, init_mlp

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    hidden: tuple = (64, 64)
    feature_dim: int = 16
    epochs: int = 40
    batch: int = 64
    lr: float = 0.02
    momentum: float = 0.9
    oe_lambda: float = 0.5


@dataclass
class TrainedClassifier:
    model: Mlp
    head: MetricHead
    history: list = field(default_factory=list)  # (epoch, mean loss)


def train_classifier(train: LabeledDataset, head_kind: str, config: TrainConfig | None, rng: Rng,
                     ood: LabeledDataset | None = None, m=None, s=None, s_learnable=None,
                     n_classes: int | None = None) -> TrainedClassifier:
    """Minibatch SGD on the head's loss; when ``ood`` is given, every ID batch is
    paired with an OOD batch of proportional size and the outlier-exposure term
    is added with weight ``config.oe_lambda``."""
    config = config or TrainConfig()
    n_classes = n_classes or int(train.labels.max()) + 1
    init_rng, order_rng = rng.split(0), rng.split(1)
    model = init_mlp([train.dim, *config.hidden, config.feature_dim], "relu", init_rng.split(0))
    head = make_head(head_kind, config.feature_dim, n_classes, init_rng.split(1), m=m, s=s,
                     s_learnable=s_learnable)
    opt = SGD(lr=config.lr, momentum=config.momentum)
    params = {**model.parameters(), **head.parameters()}

    n = len(train)
    n_batches = max(1, int(np.ceil(n / config.batch)))
    ood_batch = 0
    if ood is not None and len(ood):
        ood_batch = max(1, int(round(len(ood) / n_batches)))
    history = []
    for epoch in range(config.epochs):
        perm = order_rng.permutation(n)
        ood_perm = order_rng.permutation(len(ood)) if ood_batch else None
        total = 0.0
        for k in range(n_batches):
            idx = perm[k * config.batch:(k + 1) * config.batch]
            xo = None
            if ood_batch:
                j = np.take(ood_perm, np.arange(k * ood_batch, (k + 1) * ood_batch), mode="wrap")
                xo = ood.features[j]
            lv = outlier_exposure_loss(train.features[idx], train.labels[idx], xo, model, head,
                                       config.oe_lambda)
            if not np.isfinite(lv.loss):
                raise NumericError(f"training loss became non-finite in epoch {epoch}")
            total += lv.loss * len(idx)
            params = opt.step(params, lv.grads)
            model = model.with_parameters(params)
            head = head.with_parameters(params)
            if head.s_learnable:
                params["head.s"] = np.array([head.s])
        history.append((epoch, total / n))
    return TrainedClassifier(model, head, history)
