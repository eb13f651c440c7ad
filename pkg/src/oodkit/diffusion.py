"""Class-conditional DDPM on low-dimensional vectors and label-mixup outlier generation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .datagen import OOD_LABEL, LabeledDataset
from .losses import LossValue
from .nn import Adam, ConfigError, Mlp, NumericError, Rng, init_mlp, mlp_backward, mlp_forward

log = logging.getLogger(__name__)

N_FREQS = 8
TIME_FREQS = np.geomspace(1.0, 64.0, N_FREQS)


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray

    def __post_init__(self):
        b = self.beta
        if b.ndim != 1 or b.size < 1:
            raise ConfigError("beta must be a non-empty vector")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ConfigError("every beta must lie in (0, 1)")
        if np.any(np.diff(b) < 0):
            raise ConfigError("beta must be non-decreasing")

    @property
    def T(self) -> int:
        return self.beta.size

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    def posterior_variance(self) -> np.ndarray:
        """beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t); zero at t = 1."""
        ab = self.alpha_bar
        prev = np.r_[1.0, ab[:-1]]
        return self.beta * (1 - prev) / (1 - ab)


def make_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.04) -> DiffusionSchedule:
    """Linear beta schedule. The default ends at alpha_bar_T ~ 0.017."""
    if T < 2:
        raise ConfigError("T must be at least 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    sched = DiffusionSchedule(np.linspace(beta_start, beta_end, T))
    if sched.alpha_bar[-1] >= 0.05:
        log.warning("alpha_bar_T = %.3f; x_T is not close to pure noise", sched.alpha_bar[-1])
    return sched


def forward_noise(x0, t, eps, schedule: DiffusionSchedule):
    """Sample of q(x_t | x_0) given the noise: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.
    ``t`` is 1-based, scalar or one per row."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"t must lie in [1, {schedule.T}]")
    ab = schedule.alpha_bar[t - 1]
    if ab.ndim:
        ab = ab[:, None]
    return np.sqrt(ab) * np.asarray(x0, dtype=float) + np.sqrt(1 - ab) * np.asarray(eps, dtype=float)


def time_embedding(t, T: int) -> np.ndarray:
    """[t/T, sin(f t/T), cos(f t/T)] for 8 geometric frequencies f."""
    u = np.asarray(t, dtype=float).reshape(-1, 1) / T
    return np.hstack([u, np.sin(u * TIME_FREQS), np.cos(u * TIME_FREQS)])


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def mixup_label(n_classes: int, class_a: int, class_b: int, weight: float | None = None) -> np.ndarray:
    """Sum of the two one-hot vectors, or (w, 1 - w) if an interpolation weight is given."""
    if class_a == class_b:
        raise ValueError("mixup needs two different classes")
    v = np.zeros(n_classes)
    if weight is None:
        v[class_a] = v[class_b] = 1.0
    else:
        v[class_a], v[class_b] = weight, 1.0 - weight
    return v


@dataclass(frozen=True)
class Denoiser:
    """Noise predictor eps(x_t, label, t). Data are standardised with
    ``shift``/``scale`` before diffusion and mapped back after sampling."""
    net: Mlp
    n_classes: int
    data_dim: int
    T: int
    shift: np.ndarray
    scale: np.ndarray

    def inputs(self, x_t, labels, t):
        labels = np.broadcast_to(np.atleast_2d(labels), (len(x_t), self.n_classes))
        return np.hstack([x_t, labels, time_embedding(np.broadcast_to(t, (len(x_t),)), self.T)])

    def predict_eps(self, x_t, labels, t):
        return self.net(self.inputs(x_t, labels, t))

    def with_net(self, net: Mlp) -> "Denoiser":
        return Denoiser(net, self.n_classes, self.data_dim, self.T, self.shift, self.scale)


def init_denoiser(data_dim: int, n_classes: int, T: int, rng: Rng, hidden=(128, 128, 128),
                  shift=None, scale=None) -> Denoiser:
    in_dim = data_dim + n_classes + 1 + 2 * N_FREQS
    net = init_mlp([in_dim, *hidden, data_dim], "smooth-relu", rng)
    shift = np.zeros(data_dim) if shift is None else np.asarray(shift, dtype=float)
    scale = np.ones(data_dim) if scale is None else np.asarray(scale, dtype=float)
    return Denoiser(net, n_classes, data_dim, T, shift, scale)


def denoiser_mse(denoiser: Denoiser, x_t, labels, t, eps) -> LossValue:
    """Mean squared noise-prediction error over all entries, with the network tape in ``grads``."""
    out, cache = mlp_forward(denoiser.net, denoiser.inputs(x_t, labels, t))
    diff = out - eps
    loss = float(np.mean(diff ** 2))
    g = 2.0 * diff / diff.size
    tape = mlp_backward(denoiser.net, cache, g)
    tape.pop("input")
    return LossValue(loss, g, tape)


@dataclass
class DenoiserConfig:
    hidden: tuple = (128, 128, 128)
    steps: int = 6000
    batch: int = 256
    lr: float = 2e-3
    lr_final: float = 1e-4
    normalize: bool = True


@dataclass
class TrainedDenoiser:
    denoiser: Denoiser
    initial_loss: float
    final_loss: float
    history: list = field(default_factory=list)


def _noisy_batch(x0, schedule, rng):
    t = rng.integers(1, schedule.T + 1, size=len(x0))
    eps = rng.normal(x0.shape)
    return forward_noise(x0, t, eps, schedule), t, eps


def train_denoiser(dataset: LabeledDataset, schedule: DiffusionSchedule, config: DenoiserConfig | None,
                   rng: Rng, n_classes: int | None = None) -> TrainedDenoiser:
    """Fit the noise predictor on ID data with one-hot conditioning (Adam, cosine-decayed lr).

    Progress is measured on a fixed held-out noise batch drawn before training.
    """
    config = config or DenoiserConfig()
    if np.any(dataset.labels < 0):
        raise ValueError("denoiser training data must contain ID classes only")
    n_classes = n_classes or int(dataset.labels.max()) + 1
    X = dataset.features
    if config.normalize:
        shift = X.mean(axis=0)
        scale = X.std(axis=0)
        scale = np.where(scale > 1e-8, scale, 1.0)
    else:
        shift, scale = np.zeros(X.shape[1]), np.ones(X.shape[1])
    x0_all = (X - shift) / scale
    labels_all = one_hot(dataset.labels, n_classes)

    init_rng, hold_rng, batch_rng = rng.split(0), rng.split(1), rng.split(2)
    den = init_denoiser(X.shape[1], n_classes, schedule.T, init_rng, config.hidden, shift, scale)

    hold_idx = hold_rng.integers(0, len(X), size=min(1024, 4 * len(X)))
    h_xt, h_t, h_eps = _noisy_batch(x0_all[hold_idx], schedule, hold_rng)
    h_lab = labels_all[hold_idx]

    def held_out(d):
        return float(np.mean((d.net(d.inputs(h_xt, h_lab, h_t)) - h_eps) ** 2))

    initial = held_out(den)
    opt = Adam(lr=config.lr)
    params = den.net.parameters()
    history = []
    last_good = den
    for step in range(config.steps):
        frac = step / max(config.steps - 1, 1)
        opt.lr = config.lr_final + 0.5 * (config.lr - config.lr_final) * (1 + np.cos(np.pi * frac))
        idx = batch_rng.integers(0, len(X), size=config.batch)
        x_t, t, eps = _noisy_batch(x0_all[idx], schedule, batch_rng)
        lv = denoiser_mse(den, x_t, labels_all[idx], t, eps)
        if not np.isfinite(lv.loss):
            err = NumericError(f"denoiser loss became non-finite at step {step}")
            err.last_good = last_good
            raise err
        if step % 500 == 0:
            last_good = den
            history.append((step, lv.loss))
        params = opt.step(params, lv.grads)
        den = den.with_net(den.net.with_parameters(params))
    final = held_out(den)
    log.info("denoiser held-out mse %.4f -> %.4f", initial, final)
    return TrainedDenoiser(den, initial, final, history)


def sample(denoiser: Denoiser, label, schedule: DiffusionSchedule, n: int, rng: Rng) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0, conditioning every step on ``label``."""
    label = np.asarray(label, dtype=float).reshape(1, -1)
    if label.shape[1] != denoiser.n_classes:
        raise ValueError(f"label vector must have {denoiser.n_classes} entries")
    if schedule.T != denoiser.T:
        raise ConfigError(f"schedule has T={schedule.T} but the denoiser was trained with T={denoiser.T}")
    beta, alpha, ab = schedule.beta, schedule.alpha, schedule.alpha_bar
    sigma = np.sqrt(schedule.posterior_variance())
    x = rng.normal((n, denoiser.data_dim))
    for t in range(schedule.T, 0, -1):
        eps = denoiser.predict_eps(x, label, t)
        x = (x - beta[t - 1] / np.sqrt(1 - ab[t - 1]) * eps) / np.sqrt(alpha[t - 1])
        if t > 1:
            x = x + sigma[t - 1] * rng.normal(x.shape)
    return x * denoiser.scale + denoiser.shift


def generate_label_mixup(denoiser: Denoiser, class_a: int, class_b: int, n: int,
                         schedule: DiffusionSchedule, rng: Rng, weight: float | None = None) -> np.ndarray:
    label = mixup_label(denoiser.n_classes, class_a, class_b, weight)
    return sample(denoiser, label, schedule, n, rng)


def mixup_dataset(denoiser: Denoiser, schedule: DiffusionSchedule, n_total: int, rng: Rng,
                  pairs=None, weight=None, name="ddpm_mixup") -> LabeledDataset:
    """Outliers from every requested class pair (default: all unordered pairs), balanced."""
    if pairs is None:
        C = denoiser.n_classes
        pairs = [(a, b) for a in range(C) for b in range(a + 1, C)]
    counts = [len(p) for p in np.array_split(np.arange(n_total), len(pairs))]
    X = [generate_label_mixup(denoiser, a, b, k, schedule, rng.split(i), weight)
         for i, ((a, b), k) in enumerate(zip(pairs, counts)) if k]
    X = np.vstack(X)
    return LabeledDataset(X, np.full(len(X), OOD_LABEL), name)
