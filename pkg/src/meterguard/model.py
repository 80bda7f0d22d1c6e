"""Window-to-window convolutional regressor with exact reverse-mode Jacobians.

The network maps a normalized aggregate window of length ``w`` to a
normalized appliance window of the same length.  Everything is plain numpy:
each layer knows its forward pass and how to pull a cotangent back through
it, which is all training, the Jacobian and the gradient attacks need.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from meterguard.errors import (
    ConfigError,
    DataError,
    DivergenceError,
    EmptyInputError,
    NumericError,
    ParseError,
    ShapeError,
)
from meterguard.signal import Unit, Window

ACTIVATIONS = ("relu", "linear")


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(pre, 0.0)
    return pre


def _activate_backward(grad: np.ndarray, pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        # derivative at exactly 0 is taken as 0
        return grad * (pre > 0.0)
    return grad


@dataclass(eq=False)
class Conv1d:
    """Same-padded 1-D convolution. ``weight`` has shape (out, in, kernel)."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "relu"
    kind = "conv"

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: np.ndarray):
        b, c, length = x.shape
        k = self.kernel
        left = (k - 1) // 2
        xp = np.pad(x, ((0, 0), (0, 0), (left, k - 1 - left)))
        # (B, C, L, k) -> (B*L, C*k)
        cols = sliding_window_view(xp, k, axis=2).transpose(0, 2, 1, 3).reshape(b * length, c * k)
        wf = self.weight.reshape(self.weight.shape[0], -1)
        pre = (cols @ wf.T).reshape(b, length, -1).transpose(0, 2, 1) + self.bias[None, :, None]
        return _activate(pre, self.activation), (cols, pre, x.shape)

    def backward(self, grad: np.ndarray, cache, param_grads: bool = True):
        cols, pre, (b, c, length) = cache
        k = self.kernel
        left = (k - 1) // 2
        g = _activate_backward(grad, pre, self.activation)
        gt = g.transpose(0, 2, 1).reshape(b * length, -1)
        grads = None
        if param_grads:
            grads = {"weight": (gt.T @ cols).reshape(self.weight.shape), "bias": g.sum(axis=(0, 2))}
        gcols = (gt @ self.weight.reshape(self.weight.shape[0], -1)).reshape(b, length, c, k)
        gxp = np.zeros((b, c, length + k - 1))
        for j in range(k):
            gxp[:, :, j:j + length] += gcols[:, :, :, j].transpose(0, 2, 1)
        return gxp[:, :, left:left + length], grads


@dataclass(eq=False)
class Dense:
    """Fully connected layer. ``weight`` has shape (out, in)."""

    weight: np.ndarray
    bias: np.ndarray
    activation: str = "linear"
    kind = "dense"

    def params(self) -> dict[str, np.ndarray]:
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x: np.ndarray):
        shape = x.shape
        flat = x.reshape(shape[0], -1)
        pre = flat @ self.weight.T + self.bias
        return _activate(pre, self.activation), (flat, pre, shape)

    def backward(self, grad: np.ndarray, cache, param_grads: bool = True):
        flat, pre, shape = cache
        g = _activate_backward(grad, pre, self.activation)
        grads = None
        if param_grads:
            grads = {"weight": g.T @ flat, "bias": g.sum(axis=0)}
        return (g @ self.weight).reshape(shape), grads


LAYER_TYPES = {"conv": Conv1d, "dense": Dense}


@dataclass(eq=False)
class NilmModel:
    """Regressor ``f`` for one target appliance.

    ``norm_mean`` / ``norm_std`` are the aggregate statistics of the training
    split; both the input and output windows live in that normalized space.
    """

    layers: list
    window_len: int
    norm_mean: float = 0.0
    norm_std: float = 1.0
    appliance_id: str = ""
    rng_seed: int = 0
    loss_history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.window_len < 1:
            raise ConfigError(f"window_len must be >= 1, got {self.window_len}")
        if not self.norm_std > 0:
            raise ConfigError(f"norm_std must be positive, got {self.norm_std}")
        if not self.layers or self.layers[-1].kind != "dense":
            raise ConfigError("the last layer must be dense")
        if self.layers[-1].weight.shape[0] != self.window_len:
            raise ShapeError(
                f"output width {self.layers[-1].weight.shape[0]} != window_len {self.window_len}"
            )
        for layer in self.layers:
            if layer.activation not in ACTIVATIONS:
                raise ConfigError(f"unknown activation {layer.activation!r}")

    # construction

    @classmethod
    def build(
        cls,
        window_len: int,
        conv: Sequence[tuple[int, int]] = ((9, 8), (5, 8)),
        *,
        appliance_id: str = "",
        seed: int = 0,
        norm_mean: float = 0.0,
        norm_std: float = 1.0,
    ) -> NilmModel:
        """Conv stack ``conv`` of (kernel, channels) pairs, ReLU, then dense(w).

        Weights are drawn uniformly from [-1/sqrt(fan_in), 1/sqrt(fan_in)].
        """
        if window_len < 2:
            raise ConfigError(f"window_len must be >= 2, got {window_len}")
        rng = np.random.default_rng(seed)
        layers = []
        in_ch = 1
        for kernel, channels in conv:
            if kernel < 1 or channels < 1:
                raise ConfigError(f"bad conv layer (kernel={kernel}, channels={channels})")
            bound = 1.0 / math.sqrt(in_ch * kernel)
            layers.append(
                Conv1d(
                    rng.uniform(-bound, bound, size=(channels, in_ch, kernel)),
                    rng.uniform(-bound, bound, size=channels),
                    "relu",
                )
            )
            in_ch = channels
        fan_in = in_ch * window_len
        bound = 1.0 / math.sqrt(fan_in)
        layers.append(
            Dense(
                rng.uniform(-bound, bound, size=(window_len, fan_in)),
                rng.uniform(-bound, bound, size=window_len),
                "linear",
            )
        )
        return cls(layers, window_len, float(norm_mean), float(norm_std), appliance_id, seed)

    @classmethod
    def from_dense(cls, weights: Sequence, biases: Sequence, **kwargs) -> NilmModel:
        """A stack of linear dense layers, mostly for testing."""
        layers = [
            Dense(np.array(wt, dtype=np.float64), np.array(b, dtype=np.float64), "linear")
            for wt, b in zip(weights, biases)
        ]
        return cls(layers, layers[-1].weight.shape[0], **kwargs)

    @property
    def architecture(self) -> list[dict]:
        out = []
        for layer in self.layers:
            desc = {"kind": layer.kind, "activation": layer.activation, "shape": list(layer.weight.shape)}
            out.append(desc)
        return out

    @property
    def input_len(self) -> int:
        first = self.layers[0]
        if first.kind == "dense":
            return first.weight.shape[1]
        return self.window_len

    def copy(self) -> NilmModel:
        layers = [type(layer)(layer.weight.copy(), layer.bias.copy(), layer.activation) for layer in self.layers]
        return replace(self, layers=layers)

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in (layer.weight, layer.bias)]

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()

    # evaluation

    def _check_batch(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_len:
            raise ShapeError(f"expected input batch of shape (B, {self.input_len}), got {x.shape}")
        return x

    def forward_batch(self, x, keep_cache: bool = False):
        """Run a (B, w) batch of normalized windows through the network."""
        h = self._check_batch(x)
        if self.layers[0].kind == "conv":
            h = h[:, None, :]
        caches = []
        for layer in self.layers:
            h, cache = layer.forward(h)
            caches.append(cache)
        if keep_cache:
            return h, caches
        return h

    def backward_batch(self, grad_out: np.ndarray, caches, param_grads: bool = True, check: bool = False):
        """Pull ``grad_out`` back to the input; returns (input grad, per-layer param grads)."""
        g = grad_out
        all_grads = [None] * len(self.layers)
        for idx in range(len(self.layers) - 1, -1, -1):
            g, grads = self.layers[idx].backward(g, caches[idx], param_grads)
            if check and not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient in layer {idx} ({self.layers[idx].kind})")
            all_grads[idx] = grads
        return g.reshape(g.shape[0], -1), all_grads

    def __call__(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            return self.forward_batch(x[None, :])[0]
        return self.forward_batch(x)


def forward(model: NilmModel, window: Window) -> Window:
    """Predict the normalized appliance window for a normalized aggregate window."""
    window.expect(Unit.NORMALIZED)
    if len(window) != model.input_len:
        raise ShapeError(f"window length {len(window)} != model input length {model.input_len}")
    return window.replace(model.forward_batch(window.values[None, :])[0])


def input_gradient(model: NilmModel, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product: gradient of ``<grad_out, f(x)>`` w.r.t. a (B, w) batch ``x``."""
    _, caches = model.forward_batch(x, keep_cache=True)
    g, _ = model.backward_batch(np.asarray(grad_out, dtype=np.float64), caches, param_grads=False)
    return g


def mse(model: NilmModel, inputs: np.ndarray, targets: np.ndarray, batch_size: int = 1024) -> float:
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    total = 0.0
    for s in range(0, inputs.shape[0], batch_size):
        d = model.forward_batch(inputs[s:s + batch_size]) - targets[s:s + batch_size]
        total += float(np.sum(d * d))
    return total / targets.size


# training


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 5
    learning_rate: float = 0.01
    optimizer: str = "sgd"
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")


class _Adam:
    def __init__(self, params, lr, beta1, beta2, eps):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def train(
    model: NilmModel,
    inputs,
    targets,
    cfg: TrainConfig,
    on_epoch: Callable[[int, float], None] | None = None,
) -> NilmModel:
    """Minimize mean squared error between ``model(inputs)`` and ``targets``.

    Inputs and targets are (N, w) arrays of normalized windows.  The model is
    not modified; a trained copy is returned with ``loss_history`` holding the
    mean minibatch loss of every epoch.  Shuffling is seeded by ``cfg.seed``.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if inputs.ndim != 2 or inputs.shape[0] == 0:
        raise EmptyInputError("training set is empty")
    if targets.shape != (inputs.shape[0], model.window_len):
        raise ShapeError(f"targets shape {targets.shape} does not match {(inputs.shape[0], model.window_len)}")
    model._check_batch(inputs[:1])

    trained = model.copy()
    params = trained.parameters()
    adam = None
    if cfg.optimizer == "adam":
        adam = _Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon)
    rng = np.random.default_rng(cfg.seed)
    n = inputs.shape[0]
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            pred, caches = trained.forward_batch(inputs[idx], keep_cache=True)
            diff = pred - targets[idx]
            total += float(np.sum(diff * diff))
            _, layer_grads = trained.backward_batch(2.0 * diff / diff.size, caches)
            grads = [g for lg in layer_grads for g in (lg["weight"], lg["bias"])]
            if adam is not None:
                adam.step(params, grads)
            else:
                for p, g in zip(params, grads):
                    p -= cfg.learning_rate * g
        loss = total / targets.size
        if not math.isfinite(loss) or not all(np.all(np.isfinite(p)) for p in params):
            raise DivergenceError(f"training diverged at epoch {epoch} (loss={loss})", epoch=epoch)
        history.append(loss)
        if on_epoch is not None:
            on_epoch(epoch, loss)
    trained.loss_history = tuple(history)
    return trained


# Jacobians


@dataclass(frozen=True, eq=False)
class JacobianMatrix:
    """``entries[r, c]`` is d output_r / d input_c at the fingerprinted input."""

    entries: np.ndarray
    input_fingerprint: str = ""

    def __post_init__(self):
        e = np.array(self.entries, dtype=np.float64)
        if e.ndim != 2:
            raise ShapeError(f"Jacobian must be 2-D, got shape {e.shape}")
        if not np.all(np.isfinite(e)):
            raise NumericError("Jacobian has non-finite entries")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)


def fingerprint(x: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(x, dtype="<f8").tobytes()).hexdigest()[:16]


def _as_input(model: NilmModel, x) -> np.ndarray:
    if isinstance(x, Window):
        x.expect(Unit.NORMALIZED)
        x = x.values
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.input_len,):
        raise ShapeError(f"expected an input of length {model.input_len}, got shape {x.shape}")
    return x


def jacobian(model: NilmModel, x) -> JacobianMatrix:
    """Exact Jacobian by reverse accumulation, one seeded backward pass per output.

    The ``w`` passes share one forward pass over ``w`` copies of ``x``, so row
    ``r`` is the pullback of the ``r``-th unit cotangent.
    """
    x = _as_input(model, x)
    w_out = model.window_len
    batch = np.broadcast_to(x, (w_out, x.size))
    _, caches = model.forward_batch(batch, keep_cache=True)
    rows, _ = model.backward_batch(np.eye(w_out), caches, param_grads=False, check=True)
    return JacobianMatrix(rows, fingerprint(x))


def fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], x, h: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian of a batched map ``fn: (B, n) -> (B, m)``."""
    if not h > 0:
        raise ConfigError(f"step h must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    eye = np.eye(x.size)
    plus = np.asarray(fn(x + h * eye))
    minus = np.asarray(fn(x - h * eye))
    return ((plus - minus) / (2.0 * h)).T.reshape(-1, x.size)


def jacobian_fd(model: NilmModel, x, h: float = 1e-4) -> JacobianMatrix:
    x = _as_input(model, x)
    return JacobianMatrix(fd_jacobian(model.forward_batch, x, h), fingerprint(x))


def activation_pattern(model: NilmModel, x) -> np.ndarray:
    """Boolean on/off state of every ReLU unit, one row per input in the batch."""
    _, caches = model.forward_batch(np.atleast_2d(x), keep_cache=True)
    masks = [
        (cache[1] > 0.0).reshape(cache[1].shape[0], -1)
        for layer, cache in zip(model.layers, caches)
        if layer.activation == "relu"
    ]
    if not masks:
        return np.zeros((np.atleast_2d(x).shape[0], 0), dtype=bool)
    return np.concatenate(masks, axis=1)


def fd_stencil_is_smooth(model: NilmModel, x, h: float = 1e-4) -> bool:
    """True when no central-difference probe around ``x`` flips a ReLU unit.

    Only then is the finite-difference Jacobian a valid oracle for the
    reverse-mode one; across a kink it measures a secant, not a derivative.
    """
    x = _as_input(model, x)
    eye = np.eye(x.size)
    base = activation_pattern(model, x)
    probes = activation_pattern(model, np.concatenate([x + h * eye, x - h * eye]))
    return bool(np.all(probes == base))


# checkpoints

_MAGIC = b"MGCKPT1\n"


def save_checkpoint(model: NilmModel, path) -> None:
    """Write a self-describing binary checkpoint.

    Layout: magic line, 8-byte little-endian header length, UTF-8 JSON header
    (architecture and scalars, reals as float.hex), then every parameter array
    as little-endian float64 in header order.  Output is byte-deterministic.
    """
    header = {
        "format": 1,
        "window_len": model.window_len,
        "norm_mean": float(model.norm_mean).hex(),
        "norm_std": float(model.norm_std).hex(),
        "appliance_id": model.appliance_id,
        "rng_seed": model.rng_seed,
        "layers": [
            {
                "kind": layer.kind,
                "activation": layer.activation,
                "weight_shape": list(layer.weight.shape),
                "bias_shape": list(layer.bias.shape),
            }
            for layer in model.layers
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for p in model.parameters():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path) -> NilmModel:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(_MAGIC):
        raise ParseError("not a checkpoint file (bad magic)", path=str(path))
    pos = len(_MAGIC)
    try:
        (hlen,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (struct.error, ValueError) as exc:
        raise ParseError(f"corrupt checkpoint header: {exc}", path=str(path)) from exc
    pos += hlen

    def take(shape):
        nonlocal pos
        count = int(np.prod(shape))
        end = pos + 8 * count
        if end > len(raw):
            raise ParseError("checkpoint truncated", path=str(path))
        arr = np.frombuffer(raw[pos:end], dtype="<f8").astype(np.float64).reshape(shape)
        pos = end
        return arr

    layers = []
    for spec in header["layers"]:
        cls = LAYER_TYPES.get(spec["kind"])
        if cls is None:
            raise ParseError(f"unknown layer kind {spec['kind']!r}", path=str(path))
        weight = take(spec["weight_shape"])
        bias = take(spec["bias_shape"])
        layers.append(cls(weight, bias, spec["activation"]))
    if pos != len(raw):
        raise ParseError("trailing bytes after parameters", path=str(path))
    return NilmModel(
        layers,
        header["window_len"],
        float.fromhex(header["norm_mean"]),
        float.fromhex(header["norm_std"]),
        header["appliance_id"],
        header["rng_seed"],
    )
