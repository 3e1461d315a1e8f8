"""Dense primitives for the two-part network: MLP feature extractor + linear classifier.

Gradients are hand-derived reverse mode. Loss terms hand back ``dL/dfeatures`` and
``dL/dlogits`` and :func:`backward` pushes them through the network.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

LOG_EPS = 1e-12
_LOG_FLOOR = np.log(LOG_EPS)

CHECKPOINT_MAGIC = b"FOSSLCK1"


class ConfigurationError(ValueError):
    """Invalid shapes, sizes or hyperparameters."""


Gradient = list  # list[np.ndarray], congruent with Model.parameters()


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda out: 1.0 - out * out),
    "identity": (lambda a: a, lambda out: np.ones_like(out)),
}


@dataclass(frozen=True)
class Model:
    """Feature extractor g (stack of affine+activation layers) and linear classifier h.

    Parameters are treated as immutable: every update returns a new ``Model``.
    """

    extractor: tuple[tuple[np.ndarray, np.ndarray], ...]
    classifier: tuple[np.ndarray, np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        width = None
        for k, (w, b) in enumerate(self.extractor):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ConfigurationError(f"extractor layer {k}: bad shapes {w.shape}, {b.shape}")
            if width is not None and w.shape[0] != width:
                raise ConfigurationError(
                    f"extractor layer {k} expects width {w.shape[0]}, previous layer gives {width}"
                )
            width = w.shape[1]
        w, b = self.classifier
        if width is not None and w.shape[0] != width:
            raise ConfigurationError(f"classifier expects width {w.shape[0]}, extractor gives {width}")
        if b.shape != (w.shape[1],):
            raise ConfigurationError("classifier bias does not match weight columns")

    @property
    def input_dim(self) -> int:
        if self.extractor:
            return self.extractor[0][0].shape[0]
        return self.classifier[0].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.classifier[0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.classifier[0].shape[1]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in self.extractor:
            out += [w, b]
        out += list(self.classifier)
        return out

    def with_parameters(self, params: Sequence[np.ndarray]) -> "Model":
        params = list(params)
        if len(params) != 2 * len(self.extractor) + 2:
            raise ConfigurationError("parameter list does not match model structure")
        layers = tuple((params[2 * k], params[2 * k + 1]) for k in range(len(self.extractor)))
        return Model(layers, (params[-2], params[-1]), self.activation)

    def zeros_like(self) -> Gradient:
        return [np.zeros_like(p) for p in self.parameters()]


def init_model(
    input_dim: int,
    hidden: Sequence[int],
    feature_dim: int,
    num_classes: int,
    rng: np.random.Generator,
    activation: str = "tanh",
) -> Model:
    """Glorot-uniform extractor layers and a small-scale classifier."""
    widths = [input_dim, *hidden, feature_dim]
    layers = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)))
    bound = np.sqrt(6.0 / (feature_dim + num_classes))
    clf = (rng.uniform(-bound, bound, size=(feature_dim, num_classes)), np.zeros(num_classes))
    return Model(tuple(layers), clf, activation)


@dataclass
class ForwardCache:
    inputs: np.ndarray
    activations: list[np.ndarray]  # output of each extractor layer
    features: np.ndarray
    logits: np.ndarray


def _as_batch(model: Model, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ConfigurationError(
            f"batch has shape {x.shape}, model expects {model.input_dim} columns"
        )
    return x


def forward_cached(model: Model, batch) -> ForwardCache:
    x = _as_batch(model, batch)
    act, _ = _ACTIVATIONS[model.activation]
    h = x
    outs = []
    for w, b in model.extractor:
        h = act(h @ w + b)
        outs.append(h)
    w, b = model.classifier
    return ForwardCache(x, outs, h, h @ w + b)


def forward(model: Model, batch) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(features, logits)``, one row per input row."""
    c = forward_cached(model, batch)
    return c.features, c.logits


def backward(
    model: Model,
    cache: ForwardCache,
    d_features: np.ndarray | None = None,
    d_logits: np.ndarray | None = None,
) -> Gradient:
    """Reverse-mode pass given upstream gradients on features and/or logits."""
    n = cache.inputs.shape[0]
    if d_logits is None:
        d_logits = np.zeros((n, model.num_classes))
    if d_features is None:
        d_features = np.zeros((n, model.feature_dim))
    w, _ = model.classifier
    grads_clf = [cache.features.T @ d_logits, d_logits.sum(axis=0)]
    delta = d_features + d_logits @ w.T
    _, dact = _ACTIVATIONS[model.activation]
    grads_ext: list[np.ndarray] = []
    for k in range(len(model.extractor) - 1, -1, -1):
        wk, _ = model.extractor[k]
        out = cache.activations[k]
        prev = cache.activations[k - 1] if k > 0 else cache.inputs
        pre = delta * dact(out)
        grads_ext = [prev.T @ pre, pre.sum(axis=0)] + grads_ext
        delta = pre @ wk.T
    return grads_ext + grads_clf


# --- probability primitives -------------------------------------------------

def softmax(logits) -> np.ndarray:
    """Row-wise softmax with max subtraction; accepts a vector or a matrix."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(target, predicted) -> float:
    """H(t, p) = -sum t log max(p, 1e-12)."""
    t = np.asarray(target, dtype=np.float64)
    p = np.asarray(predicted, dtype=np.float64)
    if t.shape != p.shape:
        raise ConfigurationError(f"length mismatch: {t.shape} vs {p.shape}")
    return float(-(t * np.log(np.maximum(p, LOG_EPS))).sum())


def ce_rows_from_logits(target: np.ndarray, logits: np.ndarray):
    """Row-wise H(target, softmax(logits)) with log clamping.

    Returns ``(values, d_target, d_logits)`` where the derivatives are of the
    row values (not averaged). The clamp has zero derivative where active.
    """
    logp = log_softmax(logits)
    live = logp > _LOG_FLOOR
    clamped = np.where(live, logp, _LOG_FLOOR)
    values = -(target * clamped).sum(axis=1)
    d_target = -clamped
    tm = target * live
    d_logits = -tm + np.exp(logp) * tm.sum(axis=1, keepdims=True)
    return values, d_target, d_logits


def softmax_backward(probs: np.ndarray, d_probs: np.ndarray) -> np.ndarray:
    return probs * (d_probs - (probs * d_probs).sum(axis=1, keepdims=True))


# --- optimizer ---------------------------------------------------------------

@dataclass
class OptimizerState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: list[np.ndarray] | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigurationError("weight decay must be nonnegative")

    def reset(self) -> None:
        self.buffers = None


def sgd_step(model: Model, grad: Gradient, state: OptimizerState,
             frozen: Sequence[bool] | None = None) -> Model:
    """Heavy-ball SGD: v <- mu v + (g + lambda theta); theta <- theta - eta v.

    ``frozen[k]`` skips parameter k entirely (no decay, no buffer update).
    """
    params = model.parameters()
    if len(grad) != len(params):
        raise ConfigurationError("gradient is not congruent with model")
    if state.buffers is None:
        state.buffers = [np.zeros_like(p) for p in params]
    new = []
    for k, (p, g) in enumerate(zip(params, grad)):
        if frozen is not None and frozen[k]:
            new.append(p)
            continue
        v = state.momentum * state.buffers[k] + (g + state.weight_decay * p)
        state.buffers[k] = v
        new.append(p - state.learning_rate * v)
    return model.with_parameters(new)


# --- gradient checking -----------------------------------------------------

def finite_difference_check(
    model: Model,
    loss_fn: Callable[[Model], tuple[float, Gradient]],
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(model)`` must return ``(value, grads)``; any stop-gradient targets
    it uses have to be frozen inside the closure.
    """
    if step <= 0:
        raise ConfigurationError("step must be positive")
    _, analytic = loss_fn(model)
    params = [p.copy() for p in model.parameters()]
    worst = 0.0
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        a_flat = np.asarray(analytic[k]).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up, _ = loss_fn(model.with_parameters(params))
            flat[i] = orig - step
            down, _ = loss_fn(model.with_parameters(params))
            flat[i] = orig
            num = (up - down) / (2.0 * step)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


# --- checkpoint --------------------------------------------------------------

def save_checkpoint(model: Model, path) -> None:
    """Versioned binary dump: magic, JSON header of shapes, raw little-endian float64."""
    params = model.parameters()
    header = json.dumps({
        "version": 1,
        "activation": model.activation,
        "n_extractor_layers": len(model.extractor),
        "shapes": [list(p.shape) for p in params],
    }).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Model:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12:12 + hlen])
    if header.get("version") != 1:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {header.get('version')}")
    offset = 12 + hlen
    params = []
    for shape in header["shapes"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        params.append(arr.astype(np.float64))
        offset += 8 * count
    n = header["n_extractor_layers"]
    layers = tuple((params[2 * k], params[2 * k + 1]) for k in range(n))
    return Model(layers, (params[-2], params[-1]), header["activation"])
