"""Small dense / 1-D convolutional network engine on numpy.

All arithmetic runs in float64. Parameters are kept float32-representable
(they are rounded after initialization and after every training run) so a
model written to disk and read back is bit-identical to the one in memory.

Shapes: a batch of dense inputs is ``(B, N)``; a batch of sequence inputs is
``(B, L, C)``. Dense weights are stored ``(in, out)`` so that ``y = W^T v + b``
becomes ``X @ W + b`` for a batch. Conv1d weights are stored
``(width, in_channels, kernels)``.
"""

from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, FormatError, NumericError, ValidationError, VersionError

LAYER_KINDS = ("dense", "conv1d", "relu", "softmax", "flatten")
MODEL_MAGIC = b"OWNN"
MODEL_VERSION = 1
MOMENTUM = 0.9


@dataclass
class Layer:
    kind: str
    weights: Optional[np.ndarray] = None
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("dense", "conv1d"):
            if self.weights is None or self.bias is None:
                raise ValidationError(f"{self.kind} layer needs weights and bias")
            self.weights = np.asarray(self.weights, dtype=np.float64)
            self.bias = np.asarray(self.bias, dtype=np.float64)
            want_w = 2 if self.kind == "dense" else 3
            if self.weights.ndim != want_w or self.bias.shape != (self.weights.shape[-1],):
                raise DimensionError(
                    f"{self.kind} weights {self.weights.shape} / bias {self.bias.shape} are inconsistent"
                )

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv1d")

    @property
    def kernel_width(self) -> int:
        return self.weights.shape[0]

    @property
    def kernel_count(self) -> int:
        return self.weights.shape[2]

    def output_shape(self, in_shape: tuple) -> tuple:
        if self.kind == "dense":
            if len(in_shape) != 1 or in_shape[0] != self.weights.shape[0]:
                raise DimensionError(f"dense layer expects ({self.weights.shape[0]},), got {in_shape}")
            return (self.weights.shape[1],)
        if self.kind == "conv1d":
            if len(in_shape) != 2 or in_shape[1] != self.weights.shape[1]:
                raise DimensionError(f"conv1d layer expects (L, {self.weights.shape[1]}), got {in_shape}")
            if in_shape[0] < self.kernel_width:
                raise DimensionError(f"sequence length {in_shape[0]} shorter than kernel {self.kernel_width}")
            return (in_shape[0] - self.kernel_width + 1, self.kernel_count)
        if self.kind == "flatten":
            return (int(np.prod(in_shape)),)
        return in_shape

    def describe(self) -> dict:
        if self.kind == "dense":
            return {"kind": "dense", "in": self.weights.shape[0], "out": self.weights.shape[1]}
        if self.kind == "conv1d":
            w, c, k = self.weights.shape
            return {"kind": "conv1d", "width": w, "in_channels": c, "kernels": k, "stride": 1}
        return {"kind": self.kind}


@dataclass
class NeuralModel:
    layers: list
    input_shape: tuple
    class_count: int
    feature_tap: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if not self.layers or self.layers[-1].kind != "softmax":
            raise ValidationError("last layer must be softmax")
        dense_idx = [i for i, layer in enumerate(self.layers) if layer.kind == "dense"]
        if not dense_idx:
            raise ValidationError("model needs at least one dense layer")
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if shape != (self.class_count,):
            raise ValidationError(
                f"class_count {self.class_count} does not match final layer width {shape}"
            )
        if self.feature_tap not in dense_idx or self.feature_tap >= dense_idx[-1]:
            raise ValidationError("feature_tap must index a dense layer before the final dense layer")

    @property
    def final_dense(self) -> int:
        return max(i for i, layer in enumerate(self.layers) if layer.kind == "dense")

    @property
    def feature_width(self) -> int:
        return self.layers[self.feature_tap].weights.shape[1]

    @property
    def parameter_count(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.layers if l.has_params)

    def param_arrays(self) -> list:
        out = []
        for layer in self.layers:
            if layer.has_params:
                out.extend([layer.weights, layer.bias])
        return out

    def copy(self) -> "NeuralModel":
        return copy.deepcopy(self)


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "sgd_momentum"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs < 0:
            raise ValidationError("learning_rate and batch_size must be positive, epochs non-negative")
        if self.optimizer not in ("sgd", "sgd_momentum"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")


# ---------------------------------------------------------------------------
# Single-layer kernels
# ---------------------------------------------------------------------------


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def softmax(y: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, shifted by the max for overflow safety."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[-1] < 1:
        raise DimensionError("softmax of an empty vector")
    z = np.exp(y - y.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def dense_forward(v: np.ndarray, layer: Layer) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != layer.weights.shape[0]:
        raise DimensionError(f"dense input width {v.shape[-1]} != {layer.weights.shape[0]}")
    return v @ layer.weights + layer.bias


def _windows(x: np.ndarray, width: int) -> np.ndarray:
    # (B, L, C) -> (B, L-width+1, width*C), tap-major then channel
    win = np.lib.stride_tricks.sliding_window_view(x, width, axis=1)  # (B, Lout, C, W)
    win = win.transpose(0, 1, 3, 2)
    return win.reshape(x.shape[0], win.shape[1], width * x.shape[2])


def conv1d_forward(x: np.ndarray, layer: Layer) -> np.ndarray:
    """Valid, stride-1 convolution.

    ``out[b, i, k] = bias[k] + sum_{t, c} W[t, c, k] * x[b, i + t, c]``.
    Accepts ``(L, C)``, ``(B, L, C)`` or a plain ``(L,)`` vector (one channel).
    """
    if layer.kind != "conv1d":
        raise ValidationError("conv1d_forward needs a conv1d layer")
    x = np.asarray(x, dtype=np.float64)
    _check_finite(x, "conv1d input")
    single = x.ndim <= 2
    if x.ndim == 1:
        x = x[:, None]
    if single:
        x = x[None]
    width, channels, kernels = layer.weights.shape
    if x.ndim != 3 or x.shape[2] != channels:
        raise DimensionError(f"conv1d expects {channels} channels, got shape {x.shape}")
    if x.shape[1] < width:
        raise DimensionError(f"sequence length {x.shape[1]} shorter than kernel width {width}")
    out = _windows(x, width) @ layer.weights.reshape(width * channels, kernels) + layer.bias
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Whole-model passes
# ---------------------------------------------------------------------------


def _as_batch(model: NeuralModel, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    shape = model.input_shape
    if x.shape == shape or (x.ndim == 1 and x.size == int(np.prod(shape))):
        return x.reshape((1,) + shape), True
    if x.ndim >= 2 and x[0].size == int(np.prod(shape)):
        return x.reshape((x.shape[0],) + shape), False
    raise DimensionError(f"input shape {x.shape} does not match model input {shape}")


def _run(model: NeuralModel, x: np.ndarray, keep_cache: bool, stop_before_softmax: bool = False):
    acts = [x]
    tap = None
    for i, layer in enumerate(model.layers):
        if layer.kind == "softmax" and stop_before_softmax:
            break
        if layer.kind == "dense":
            x = dense_forward(x, layer)
        elif layer.kind == "conv1d":
            x = _windows(x, layer.kernel_width) @ layer.weights.reshape(-1, layer.kernel_count) + layer.bias
        elif layer.kind == "relu":
            x = np.maximum(x, 0.0)
        elif layer.kind == "flatten":
            x = x.reshape(x.shape[0], -1)
        else:
            x = softmax(x)
        if i == model.feature_tap:
            tap = x
        elif tap is not None and i == model.feature_tap + 1 and layer.kind == "relu":
            tap = x
        if keep_cache:
            acts.append(x)
    return x, tap, acts


def forward(model: NeuralModel, x: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(probabilities, feature_map)`` for one input or a batch.

    The feature map is the output of the tapped dense layer after its ReLU.
    """
    xb, single = _as_batch(model, x)
    _check_finite(xb, "model input")
    probs, feats = [], []
    for start in range(0, xb.shape[0], batch_size):
        chunk = xb[start:start + batch_size]
        n = chunk.shape[0]
        if n < batch_size:
            # BLAS picks different kernels for different row counts; a fixed
            # chunk shape keeps every row's result independent of batching.
            chunk = np.concatenate([chunk, np.zeros((batch_size - n,) + chunk.shape[1:])])
        p, tap, _ = _run(model, chunk, keep_cache=False)
        probs.append(p[:n])
        feats.append(tap[:n])
    if not probs:
        return np.zeros((0, model.class_count)), np.zeros((0, model.feature_width))
    probs = np.concatenate(probs)
    feats = np.concatenate(feats)
    _check_finite(probs, "model output")
    if single:
        return probs[0], feats[0]
    return probs, feats


def loss_and_gradients(model: NeuralModel, x: np.ndarray, labels: np.ndarray) -> tuple[float, list]:
    """Mean cross-entropy of the softmax head and its gradient per parameter array.

    Gradients come back in ``model.param_arrays()`` order.
    """
    xb, _ = _as_batch(model, x)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = xb.shape[0]
    logits, _, acts = _run(model, xb, keep_cache=True, stop_before_softmax=True)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(logsum - shifted[np.arange(n), labels]))
    if not np.isfinite(loss):
        raise NumericError("loss is not finite")

    grad = np.exp(shifted - logsum[:, None])
    grad[np.arange(n), labels] -= 1.0
    grad /= n

    grads = []
    n_layers = len(model.layers) - 1  # softmax is fused into the loss
    for i in range(n_layers - 1, -1, -1):
        layer = model.layers[i]
        inp, out = acts[i], acts[i + 1]
        if layer.kind == "dense":
            grads.append(grad.sum(axis=0))
            grads.append(inp.T @ grad)
            if i > 0:
                grad = grad @ layer.weights.T
        elif layer.kind == "conv1d":
            width, channels, kernels = layer.weights.shape
            cols = _windows(inp, width)
            g2 = grad.reshape(-1, kernels)
            grads.append(g2.sum(axis=0))
            grads.append((cols.reshape(-1, width * channels).T @ g2).reshape(width, channels, kernels))
            if i > 0:
                dcols = (grad @ layer.weights.reshape(-1, kernels).T).reshape(
                    grad.shape[0], grad.shape[1], width, channels
                )
                dx = np.zeros_like(inp)
                lout = grad.shape[1]
                for t in range(width):
                    dx[:, t:t + lout, :] += dcols[:, :, t, :]
                grad = dx
        elif layer.kind == "relu":
            grad = grad * (out > 0)
        elif layer.kind == "flatten":
            grad = grad.reshape(inp.shape)
    # collected as (bias, weights) walking backwards; flip to forward (weights, bias) order
    grads.reverse()
    return loss, grads


def mean_loss(model: NeuralModel, x: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
    xb, _ = _as_batch(model, x)
    labels = np.asarray(labels, dtype=np.int64)
    total = 0.0
    for start in range(0, xb.shape[0], batch_size):
        logits, _, _ = _run(model, xb[start:start + batch_size], False, stop_before_softmax=True)
        shifted = logits - logits.max(axis=1, keepdims=True)
        lab = labels[start:start + batch_size]
        total += float(np.sum(np.log(np.exp(shifted).sum(axis=1)) - shifted[np.arange(len(lab)), lab]))
    return total / xb.shape[0]


# ---------------------------------------------------------------------------
# Construction and training
# ---------------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def as_float32_exact(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    with np.errstate(over="ignore"):
        out = a.astype(np.float32).astype(np.float64)
    if not np.all(np.isfinite(out[np.isfinite(a)])):
        raise NumericError("parameter magnitude exceeds the float32 range")
    return out


def init_dense(rng: np.random.Generator, n_in: int, n_out: int) -> Layer:
    w = as_float32_exact(glorot_uniform(rng, (n_in, n_out), n_in, n_out))
    return Layer("dense", w, np.zeros(n_out))


def init_conv1d(rng: np.random.Generator, width: int, channels: int, kernels: int) -> Layer:
    w = glorot_uniform(rng, (width, channels, kernels), width * channels, width * kernels)
    return Layer("conv1d", as_float32_exact(w), np.zeros(kernels))


def _round_params(model: NeuralModel) -> None:
    for layer in model.layers:
        if layer.has_params:
            layer.weights = as_float32_exact(layer.weights)
            layer.bias = as_float32_exact(layer.bias)


def train(
    model: NeuralModel,
    inputs: np.ndarray,
    labels: Sequence[int],
    cfg: TrainConfig,
    on_epoch_end: Optional[Callable[[int, NeuralModel], None]] = None,
) -> NeuralModel:
    """Mini-batch gradient descent on mean cross-entropy; returns a new model.

    Shuffling is driven by ``cfg.seed`` only, so the result is a pure function
    of (model, data, cfg). ``on_epoch_end`` receives a float32-rounded snapshot.
    """
    labels = np.asarray(labels, dtype=np.int64)
    xb, _ = _as_batch(model, inputs) if len(labels) else (np.zeros((0,)), False)
    if len(labels) == 0 or xb.shape[0] == 0:
        raise ValidationError("cannot train on an empty dataset")
    if xb.shape[0] != len(labels):
        raise DimensionError(f"{xb.shape[0]} inputs but {len(labels)} labels")
    if labels.min() < 0 or labels.max() >= model.class_count:
        raise ValidationError(f"labels must lie in [0, {model.class_count})")
    _check_finite(xb, "training inputs")

    out = model.copy()
    if cfg.epochs == 0:
        return out
    rng = np.random.default_rng(cfg.seed)
    params = out.param_arrays()
    velocity = [np.zeros_like(p) for p in params]
    n = xb.shape[0]
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            # divergence surfaces as a non-finite loss or parameter below
            with np.errstate(over="ignore", invalid="ignore"):
                _, grads = loss_and_gradients(out, xb[idx], labels[idx])
            for p, g, v in zip(params, grads, velocity):
                if cfg.optimizer == "sgd_momentum":
                    v *= MOMENTUM
                    v -= cfg.learning_rate * g
                    p += v
                else:
                    p -= cfg.learning_rate * g
        for p in params:
            _check_finite(p, "model parameters")
        if on_epoch_end is not None:
            snap = out.copy()
            _round_params(snap)
            on_epoch_end(epoch + 1, snap)
    _round_params(out)
    return out


def _relu_pattern(model: NeuralModel, xb: np.ndarray) -> list:
    _, _, acts = _run(model, xb, keep_cache=True, stop_before_softmax=True)
    return [acts[i] > 0 for i, layer in enumerate(model.layers) if layer.kind == "relu"]


def _same_pattern(a: list, b: list) -> bool:
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def gradient_check_report(model: NeuralModel, x: np.ndarray, label: int, step: float = 1e-4) -> dict:
    """Compare backprop with central finite differences, one parameter at a time.

    Relative error per entry is ``|a - n| / max(|a|, |n|, 1e-6)``. A central
    difference is meaningless when ``+-step`` moves a ReLU input across zero,
    so such entries are retried with ``step / 100``; entries that still cross
    a kink are left out and counted.
    """
    if model.parameter_count > 10_000:
        raise ValidationError("gradient_check is meant for models with at most 1e4 parameters")
    work = model.copy()
    xb, _ = _as_batch(work, np.asarray(x, dtype=np.float64))
    labels = np.array([label])
    _, analytic = loss_and_gradients(work, xb, labels)
    base = _relu_pattern(work, xb)
    worst, checked, kinks = 0.0, 0, 0
    for p, g in zip(work.param_arrays(), analytic):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            num = None
            for h in (step, step / 100):
                flat[j] = orig + h
                up, _ = loss_and_gradients(work, xb, labels)
                smooth = _same_pattern(base, _relu_pattern(work, xb))
                flat[j] = orig - h
                down, _ = loss_and_gradients(work, xb, labels)
                smooth = smooth and _same_pattern(base, _relu_pattern(work, xb))
                flat[j] = orig
                if smooth:
                    num = (up - down) / (2 * h)
                    break
            if num is None:
                kinks += 1
                continue
            checked += 1
            denom = max(abs(gflat[j]), abs(num), 1e-6)
            worst = max(worst, abs(gflat[j] - num) / denom)
    return {"max_relative_error": worst, "checked": checked, "skipped_at_kink": kinks}


def gradient_check(
    model: NeuralModel, x: np.ndarray, label: int, tolerance: Optional[float] = None, step: float = 1e-4
) -> float:
    """Max relative error between backprop and central finite differences.

    See ``gradient_check_report``. If ``tolerance`` is given and exceeded,
    raises ``NumericError``.
    """
    worst = gradient_check_report(model, x, label, step)["max_relative_error"]
    if tolerance is not None and worst >= tolerance:
        raise NumericError(f"gradient check failed: max relative error {worst:.3g} >= {tolerance}")
    return worst


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def model_header(model: NeuralModel) -> dict:
    return {
        "class_count": model.class_count,
        "feature_tap": model.feature_tap,
        "input_shape": list(model.input_shape),
        "layers": [layer.describe() for layer in model.layers],
        "metadata": model.metadata,
    }


def model_to_bytes(model: NeuralModel) -> bytes:
    header = json.dumps(model_header(model), sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<HI", MODEL_VERSION, len(header)))
    buf.write(header)
    for p in model.param_arrays():
        buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    return buf.getvalue()


def save_model(model: NeuralModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def _layer_from_desc(desc: dict, blob: memoryview, offset: int) -> tuple[Layer, int]:
    kind = desc.get("kind")
    if kind == "dense":
        shapes = [(desc["in"], desc["out"]), (desc["out"],)]
    elif kind == "conv1d":
        if desc.get("stride", 1) != 1:
            raise FormatError("only stride 1 is supported")
        shapes = [(desc["width"], desc["in_channels"], desc["kernels"]), (desc["kernels"],)]
    elif kind in LAYER_KINDS:
        return Layer(kind), offset
    else:
        raise FormatError(f"unknown layer kind {kind!r} in header")
    arrays = []
    for shape in shapes:
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(blob):
            raise FormatError("truncated weight blob", offset)
        arrays.append(np.frombuffer(blob[offset:offset + nbytes], dtype="<f4").astype(np.float64).reshape(shape))
        offset += nbytes
    return Layer(kind, arrays[0], arrays[1]), offset


def model_from_bytes(data: bytes) -> NeuralModel:
    if len(data) < 10:
        raise FormatError("file too short for a model header", len(data))
    if data[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", 0)
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != MODEL_VERSION:
        raise VersionError(f"model format version {version}, expected {MODEL_VERSION}", 4)
    if 10 + hlen > len(data):
        raise FormatError("truncated header", len(data))
    try:
        header = json.loads(data[10:10 + hlen].decode("utf-8"))
        descs = header["layers"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}", 10) from None
    blob = memoryview(data)
    offset = 10 + hlen
    try:
        layers = []
        for desc in descs:
            layer, offset = _layer_from_desc(desc, blob, offset)
            layers.append(layer)
        if offset != len(data):
            raise FormatError(f"{len(data) - offset} trailing bytes after weights", offset)
        return NeuralModel(
            layers=layers,
            input_shape=tuple(header["input_shape"]),
            class_count=int(header["class_count"]),
            feature_tap=int(header["feature_tap"]),
            metadata=header.get("metadata", {}),
        )
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError, IndexError, AttributeError, struct.error) as exc:
        # a header that parses as JSON but describes an impossible model
        raise FormatError(f"inconsistent header: {exc!r}", 10) from None


def load_model(path) -> NeuralModel:
    return model_from_bytes(Path(path).read_bytes())
