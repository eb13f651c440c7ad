"""Small dense networks in plain numpy: forward/backward, optimizers, RNG, checkpoints."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("relu", "smooth-relu", "identity")

MAGIC = b"OODKIT"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration or incompatible shapes."""


class NumericError(FloatingPointError):
    """A loss or gradient stopped being finite."""


class Rng:
    """Counter-based random stream (Philox) keyed by a seed and a stream path.

    ``split(k)`` gives a reproducible child stream that never overlaps its parent,
    so the order in which sub-streams are consumed does not change results.
    """

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        self._bitgen = np.random.Philox(ss)
        self.generator = np.random.Generator(self._bitgen)

    @property
    def counter(self) -> int:
        c = self._bitgen.state["state"]["counter"]
        return int(sum(int(v) << (64 * i) for i, v in enumerate(c)))

    def split(self, k: int) -> "Rng":
        return Rng(self.seed, self.stream + (k,))

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self.generator.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)


def activate(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(a, 0.0)
    if kind == "smooth-relu":
        return a * expit(a)
    if kind == "identity":
        return a
    raise ConfigError(f"unknown activation {kind!r}")


def activate_grad(kind: str, a: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (a > 0).astype(a.dtype)
    if kind == "smooth-relu":
        sg = expit(a)
        return sg * (1.0 + a * (1.0 - sg))
    if kind == "identity":
        return np.ones_like(a)
    raise ConfigError(f"unknown activation {kind!r}")


@dataclass(frozen=True)
class Layer:
    W: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)
    activation: str = "relu"


@dataclass(frozen=True)
class Mlp:
    layers: tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("an Mlp needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.activation not in ACTIVATIONS:
                raise ConfigError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.b.shape != (layer.W.shape[1],):
                raise ConfigError(f"layer {i}: bias shape {layer.b.shape} != ({layer.W.shape[1]},)")
            if i and self.layers[i - 1].W.shape[1] != layer.W.shape[0]:
                raise ConfigError(f"layer {i}: input width {layer.W.shape[0]} does not chain "
                                  f"with previous output {self.layers[i - 1].W.shape[1]}")

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].W.shape[1]

    @property
    def sizes(self) -> list[int]:
        return [self.input_dim] + [layer.W.shape[1] for layer in self.layers]

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, layer in enumerate(self.layers):
            params[f"layers.{i}.W"] = layer.W
            params[f"layers.{i}.b"] = layer.b
        return params

    def with_parameters(self, params: dict[str, np.ndarray]) -> "Mlp":
        return Mlp(tuple(
            Layer(np.asarray(params[f"layers.{i}.W"], dtype=float),
                  np.asarray(params[f"layers.{i}.b"], dtype=float),
                  layer.activation)
            for i, layer in enumerate(self.layers)))

    def __call__(self, x):
        return mlp_forward(self, x)[0]


def init_mlp(sizes, activations, rng: Rng) -> Mlp:
    """He-style init. ``activations`` is one tag per layer, or one tag for hidden
    layers with the last layer left as identity."""
    n_layers = len(sizes) - 1
    if isinstance(activations, str):
        activations = [activations] * (n_layers - 1) + ["identity"]
    if len(activations) != n_layers:
        raise ConfigError(f"{n_layers} layers but {len(activations)} activations")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = rng.normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        layers.append(Layer(W, np.zeros(fan_out), activations[i]))
    return Mlp(tuple(layers))


def mlp_forward(model: Mlp, batch) -> tuple[np.ndarray, list]:
    """Returns the output features and a cache of (input, pre-activation) per layer."""
    x = np.asarray(batch, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ConfigError(f"batch shape {x.shape} does not match input width {model.input_dim}")
    cache = []
    for layer in model.layers:
        a = x @ layer.W + layer.b
        cache.append((x, a))
        x = activate(layer.activation, a)
    return x, cache


def mlp_backward(model: Mlp, layer_cache, output_grad) -> dict[str, np.ndarray]:
    """Chain rule back through the cached forward pass. Returns a gradient tape keyed
    like ``model.parameters()``; the input gradient is stored under ``"input"``."""
    if not layer_cache or len(layer_cache) != len(model.layers):
        raise ConfigError("mlp_backward needs the cache from mlp_forward on the same model")
    g = np.asarray(output_grad, dtype=float)
    if g.shape[1] != model.feature_dim:
        raise ConfigError(f"output_grad width {g.shape[1]} != feature_dim {model.feature_dim}")
    tape = {}
    for i in reversed(range(len(model.layers))):
        layer = model.layers[i]
        x, a = layer_cache[i]
        da = g * activate_grad(layer.activation, a)
        tape[f"layers.{i}.W"] = x.T @ da
        tape[f"layers.{i}.b"] = da.sum(axis=0)
        g = da @ layer.W.T
    tape["input"] = g
    return tape


def finite_diff_grad(loss_fn, params: dict[str, np.ndarray], epsilon: float = 1e-5) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``loss_fn(params)`` for every entry of every array.

    ``params`` maps names to float arrays; they are perturbed in place and restored.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p, dtype=float)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            hi = float(loss_fn(params))
            flat[k] = orig - epsilon
            lo = float(loss_fn(params))
            flat[k] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NumericError(f"non-finite loss while perturbing {name}[{k}]")
            gflat[k] = (hi - lo) / (2 * epsilon)
        grads[name] = g
    return grads


def relative_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def _check_finite(grads):
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")


@dataclass
class SGD:
    """SGD with heavy-ball momentum: v <- mu*v + g ; p <- p - lr*v."""
    lr: float = 0.05
    momentum: float = 0.9
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        _check_finite({k: grads[k] for k in params if k in grads})
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            v = self.momentum * self.velocity.get(name, 0.0) + g
            self.velocity[name] = v
            out[name] = p - self.lr * v
        return out


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, grads):
        _check_finite({k: grads[k] for k in params if k in grads})
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = p
                continue
            m = self.beta1 * self.m.get(name, 0.0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = p - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def optimizer_step(model: Mlp, tape: dict, lr: float, momentum_state: SGD | None = None,
                   momentum: float = 0.9) -> Mlp:
    """One SGD+momentum update of ``model``. Pass the same ``momentum_state`` across steps."""
    if momentum_state is None:
        momentum_state = SGD(lr=lr, momentum=momentum)
    momentum_state.lr = lr
    return model.with_parameters(momentum_state.step(model.parameters(), tape))


# --- checkpoints -----------------------------------------------------------

def save_checkpoint(path, model: Mlp, extra_arrays: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Binary layout: magic, uint32 version, uint32 header length, JSON header
    (layer sizes, activations, extra array shapes, free-form metadata), then every
    array as little-endian float32 in layer order followed by the extras."""
    extra_arrays = extra_arrays or {}
    header = {
        "sizes": model.sizes,
        "activations": [layer.activation for layer in model.layers],
        "extra": [[name, list(np.shape(a))] for name, a in extra_arrays.items()],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob]
    for layer in model.layers:
        chunks.append(np.asarray(layer.W, dtype="<f4").tobytes())
        chunks.append(np.asarray(layer.b, dtype="<f4").tobytes())
    for a in extra_arrays.values():
        chunks.append(np.asarray(a, dtype="<f4").tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[Mlp, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:len(MAGIC)] != MAGIC:
        raise ConfigError(f"{path}: not an OODKIT checkpoint")
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<II", data, pos)
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    pos += 8
    header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    pos += hlen

    def take(shape):
        nonlocal pos
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).astype(float).reshape(shape)
        pos += 4 * n
        return arr

    sizes = header["sizes"]
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], header["activations"]):
        W = take((fan_in, fan_out))
        layers.append(Layer(W, take((fan_out,)), act))
    extras = {name: take(tuple(shape)) for name, shape in header["extra"]}
    if pos != len(data):
        raise ConfigError(f"{path}: {len(data) - pos} trailing bytes")
    return Mlp(tuple(layers)), extras, header["meta"]
