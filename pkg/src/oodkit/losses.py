"""Classification heads and their training objectives.

Every loss returns a :class:`LossValue` carrying the mean loss over the batch and
exact gradients with respect to the features and the head parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .nn import ConfigError, Mlp, Rng, mlp_backward, mlp_forward

log = logging.getLogger(__name__)

KINDS = ("softmax", "scaled_cosine", "sphereface", "cosface", "arcface", "adacos")

COS_CLAMP = 1e-7
NORM_GUARD = 1e-12

DEFAULT_M = {"sphereface": 2, "cosface": 0.2, "arcface": 0.3, "adacos": 0.3}
DEFAULT_S = {"scaled_cosine": 10.0, "cosface": 10.0, "arcface": 10.0}


@dataclass(frozen=True)
class MetricHead:
    """Linear classification head.

    ``W`` is (feature_dim, C). For every kind except softmax the columns are
    normalised before use and ``b`` is ignored. ``m`` is the margin: an integer
    multiplier for sphereface, radians for arcface/adacos, cosine units for cosface.
    """
    kind: str
    W: np.ndarray
    b: np.ndarray
    s: float = 1.0
    m: float = 0.0
    s_learnable: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.b.shape != (self.W.shape[1],):
            raise ConfigError("bias length must equal the number of classes")
        if not self.s > 0:
            raise ConfigError("scale s must be positive")
        if self.kind == "sphereface" and (self.m < 1 or int(self.m) != self.m):
            raise ConfigError("sphereface margin must be a positive integer")
        if self.kind in ("arcface", "adacos") and not 0 <= self.m < math.pi / 2:
            raise ConfigError("arcface margin must lie in [0, pi/2)")
        if self.kind == "cosface" and not 0 <= self.m < 1:
            raise ConfigError("cosface margin must lie in [0, 1)")

    @property
    def n_classes(self) -> int:
        return self.W.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.W.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"head.W": self.W}
        if self.kind == "softmax":
            params["head.b"] = self.b
        if self.s_learnable:
            params["head.s"] = np.array([self.s], dtype=float)
        return params

    def with_parameters(self, params) -> "MetricHead":
        s = self.s
        if "head.s" in params:
            s = float(np.asarray(params["head.s"]).reshape(-1)[0])
            if s <= 0:
                log.warning("scale s driven to %g by the optimiser; clamping to 1e-3", s)
                s = 1e-3
        return replace(self, W=np.asarray(params["head.W"], dtype=float),
                       b=np.asarray(params.get("head.b", self.b), dtype=float), s=s)


def make_head(kind: str, feature_dim: int, n_classes: int, rng: Rng, m=None, s=None,
              s_learnable=None) -> MetricHead:
    """Head with kind-specific defaults for margin and scale."""
    if kind not in KINDS:
        raise ConfigError(f"unknown loss kind {kind!r}")
    if m is None:
        m = DEFAULT_M.get(kind, 0.0)
    if s is None:
        s = adacos_scale(n_classes) if kind == "adacos" else DEFAULT_S.get(kind, 1.0)
    if s_learnable is None:
        s_learnable = kind == "scaled_cosine"
    if kind == "sphereface":
        m = int(m)
    W = rng.normal((feature_dim, n_classes)) / np.sqrt(feature_dim)
    return MetricHead(kind, W, np.zeros(n_classes), float(s), m, bool(s_learnable))


@dataclass
class LossValue:
    loss: float
    grad_z: np.ndarray
    grads: dict[str, np.ndarray] = field(default_factory=dict)


# --- building blocks -------------------------------------------------------

def _norms(z):
    r = np.linalg.norm(z, axis=-1, keepdims=True)
    return np.where(r < NORM_GUARD, r + NORM_GUARD, r)


def _normalized(z, W):
    z = np.asarray(z, dtype=float)
    zr = _norms(z)
    wr = _norms(W.T).T
    return z / zr, W / wr, zr, wr


def cosine_logits(z, head: MetricHead) -> np.ndarray:
    """cos of the angle between each feature row and each class column, clamped
    away from +-1 so that arccos stays differentiable."""
    zh, Wh, _, _ = _normalized(z, head.W)
    return np.clip(zh @ Wh, -1 + COS_CLAMP, 1 - COS_CLAMP)


def _cosine_backward(z, head, gcos):
    """Pull d(loss)/d(cos) back to the raw features and raw weight columns."""
    zh, Wh, zr, wr = _normalized(z, head.W)
    raw = zh @ Wh
    gcos = gcos * ((raw > -1 + COS_CLAMP) & (raw < 1 - COS_CLAMP))
    g_zh = gcos @ Wh.T
    g_z = (g_zh - zh * np.sum(zh * g_zh, axis=1, keepdims=True)) / zr
    g_Wh = zh.T @ gcos
    g_W = (g_Wh - Wh * np.sum(Wh * g_Wh, axis=0, keepdims=True)) / wr
    return g_z, g_W


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return labels.astype(int)


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(_log_softmax(np.asarray(logits, dtype=float)))


def _ce(logits, labels):
    """Mean cross-entropy and its gradient with respect to the logits."""
    n = logits.shape[0]
    logp = _log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    g = np.exp(logp)
    g[rows, labels] -= 1.0
    return float(loss), g / n


def softmax_ce(logits, labels) -> LossValue:
    """Mean negative log-likelihood of ``labels``; ``grad_z`` holds d/d(logits)."""
    logits = np.asarray(logits, dtype=float)
    labels = _check_labels(labels, logits.shape[1])
    loss, g = _ce(logits, labels)
    return LossValue(loss, g)


# --- heads ----------------------------------------------------------------

def _softmax_head_loss(z, head, labels):
    z = np.asarray(z, dtype=float)
    loss, g = _ce(z @ head.W + head.b, labels)
    return LossValue(loss, g @ head.W.T, {"head.W": z.T @ g, "head.b": g.sum(axis=0)})


def scaled_cosine_loss(z, head: MetricHead, labels) -> LossValue:
    """Cross-entropy over s*cos logits. The gradient for s is included when the
    head's scale is learnable."""
    labels = _check_labels(labels, head.n_classes)
    cos = cosine_logits(z, head)
    loss, g = _ce(head.s * cos, labels)
    g_z, g_W = _cosine_backward(z, head, head.s * g)
    grads = {"head.W": g_W}
    if head.s_learnable:
        grads["head.s"] = np.array([np.sum(g * cos)])
    return LossValue(loss, g_z, grads)


def cosface_loss(z, head: MetricHead, labels) -> LossValue:
    labels = _check_labels(labels, head.n_classes)
    cos = cosine_logits(z, head)
    rows = np.arange(len(labels))
    target = cos.copy()
    target[rows, labels] -= head.m
    loss, g = _ce(head.s * target, labels)
    g_z, g_W = _cosine_backward(z, head, head.s * g)
    grads = {"head.W": g_W}
    if head.s_learnable:
        grads["head.s"] = np.array([np.sum(g * target)])
    return LossValue(loss, g_z, grads)


def _arc_margin(cos_true, m):
    """cos(theta + m) and its derivative in cos(theta). Where theta + m would pass
    pi the curve continues as cos(theta) - m*sin(m), which keeps it monotone."""
    theta = np.arccos(cos_true)
    wrapped = theta + m > math.pi
    if np.any(wrapped):
        log.debug("arcface: %d samples with theta + m > pi use the linear fallback", int(wrapped.sum()))
    val = np.where(wrapped, cos_true - m * math.sin(m), np.cos(theta + m))
    dval = np.where(wrapped, 1.0, np.sin(theta + m) / np.sin(theta))
    return val, dval


def arcface_loss(z, head: MetricHead, labels) -> LossValue:
    labels = _check_labels(labels, head.n_classes)
    cos = cosine_logits(z, head)
    rows = np.arange(len(labels))
    target = cos.copy()
    val, dval = _arc_margin(cos[rows, labels], head.m)
    target[rows, labels] = val
    loss, g = _ce(head.s * target, labels)
    gcos = head.s * g
    gcos[rows, labels] *= dval
    g_z, g_W = _cosine_backward(z, head, gcos)
    grads = {"head.W": g_W}
    if head.s_learnable:
        grads["head.s"] = np.array([np.sum(g * target)])
    return LossValue(loss, g_z, grads)


def sphere_psi(theta, m: int):
    """Monotone extension of cos(m*theta) on [0, pi]:
    psi = (-1)^k cos(m*theta) - 2k for theta in [k*pi/m, (k+1)*pi/m]."""
    theta = np.asarray(theta, dtype=float)
    k = np.minimum(np.floor(m * theta / math.pi), m - 1)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    return sign * np.cos(m * theta) - 2 * k


def _sphere_margin(cos_true, m):
    theta = np.arccos(cos_true)
    k = np.minimum(np.floor(m * theta / math.pi), m - 1)
    sign = np.where(k % 2 == 0, 1.0, -1.0)
    val = sign * np.cos(m * theta) - 2 * k
    dval = sign * m * np.sin(m * theta) / np.sin(theta)
    return val, dval


def sphereface_loss(z, head: MetricHead, labels) -> LossValue:
    """Multiplicative angular margin on un-normalised features: logits are
    |z| psi(theta_true) for the target and |z| cos(theta_j) elsewhere."""
    labels = _check_labels(labels, head.n_classes)
    z = np.asarray(z, dtype=float)
    cos = cosine_logits(z, head)
    r = _norms(z)
    rows = np.arange(len(labels))
    f = cos.copy()
    val, dval = _sphere_margin(cos[rows, labels], int(head.m))
    f[rows, labels] = val
    loss, g = _ce(r * f, labels)
    gcos = g * r
    gcos[rows, labels] *= dval
    g_z, g_W = _cosine_backward(z, head, gcos)
    g_z = g_z + np.sum(g * f, axis=1, keepdims=True) * z / r
    return LossValue(loss, g_z, {"head.W": g_W})


def adacos_scale(n_classes: int) -> float:
    """Fixed scale sqrt(2) * ln(C - 1). C = 2 gives 0, which is replaced by 1."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    s = math.sqrt(2.0) * math.log(n_classes - 1)
    if s <= 0:
        log.warning("adacos scale is %g for C=%d; using 1.0", s, n_classes)
        return 1.0
    return s


_LOSSES = {
    "softmax": _softmax_head_loss,
    "scaled_cosine": scaled_cosine_loss,
    "cosface": cosface_loss,
    "arcface": arcface_loss,
    "adacos": arcface_loss,
    "sphereface": sphereface_loss,
}


def head_loss(z, head: MetricHead, labels) -> LossValue:
    return _LOSSES[head.kind](z, head, labels)


def plain_logits(z, head: MetricHead) -> np.ndarray:
    """Margin-free logits: what the head outputs when no true class is known.
    Used for prediction, probability-based scores, and the outlier term."""
    z = np.asarray(z, dtype=float)
    if head.kind == "softmax":
        return z @ head.W + head.b
    if head.kind == "sphereface":
        return _norms(z) * cosine_logits(z, head)
    return head.s * cosine_logits(z, head)


def _plain_logits_backward(z, head, glog):
    z = np.asarray(z, dtype=float)
    if head.kind == "softmax":
        return glog @ head.W.T, {"head.W": z.T @ glog, "head.b": glog.sum(axis=0)}
    cos = cosine_logits(z, head)
    if head.kind == "sphereface":
        r = _norms(z)
        g_z, g_W = _cosine_backward(z, head, glog * r)
        g_z = g_z + np.sum(glog * cos, axis=1, keepdims=True) * z / r
        return g_z, {"head.W": g_W}
    g_z, g_W = _cosine_backward(z, head, head.s * glog)
    grads = {"head.W": g_W}
    if head.s_learnable:
        grads["head.s"] = np.array([np.sum(glog * cos)])
    return g_z, grads


def uniform_cross_entropy(z, head: MetricHead) -> LossValue:
    """Mean over rows of H(U, p) = -(1/C) sum_c log p_c, with p from the head's
    margin-free logits. Equals KL(U || p) + ln C."""
    z = np.asarray(z, dtype=float)
    n = z.shape[0]
    logits = plain_logits(z, head)
    logp = _log_softmax(logits)
    loss = float(-logp.mean(axis=1).mean())
    glog = (np.exp(logp) - 1.0 / head.n_classes) / n
    g_z, grads = _plain_logits_backward(z, head, glog)
    return LossValue(loss, g_z, grads)


def _add_grads(a, b, scale=1.0):
    out = dict(a)
    for k, v in b.items():
        out[k] = out[k] + scale * v if k in out else scale * v
    return out


def outlier_exposure_loss(id_batch, id_labels, ood_batch, model: Mlp, head: MetricHead,
                          lam: float = 0.5) -> LossValue:
    """Base head loss on the ID batch plus ``lam`` times the uniform cross-entropy
    on the OOD batch. Runs the encoder, so ``grads`` also holds the encoder tape
    (keys ``layers.*``); ``grad_z`` holds the feature gradient of both batches
    stacked ID-first."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    id_batch = np.asarray(id_batch, dtype=float)
    ood_batch = np.zeros((0, id_batch.shape[1])) if ood_batch is None else np.asarray(ood_batch, dtype=float)
    n_id = id_batch.shape[0]
    z, cache = mlp_forward(model, np.vstack([id_batch, ood_batch]))
    base = head_loss(z[:n_id], head, id_labels)
    loss, grads = base.loss, dict(base.grads)
    g_z = np.zeros_like(z)
    g_z[:n_id] = base.grad_z
    if len(ood_batch) and lam > 0:
        oe = uniform_cross_entropy(z[n_id:], head)
        loss += lam * oe.loss
        g_z[n_id:] = lam * oe.grad_z
        grads = _add_grads(grads, oe.grads, lam)
    tape = mlp_backward(model, cache, g_z)
    tape.pop("input")
    grads.update(tape)
    return LossValue(loss, g_z, grads)
