"""Small differentiable image classifier written directly against numpy.

Images are channel-last ``(N, H, W, C)`` arrays in ``[0, 1]``. The network is a
plain chain of convolution / rectifier / max-pool / dense layers described by
an :class:`ArchSpec`; every layer has a hand-written backward pass so that the
same code yields gradients with respect to the weights (training) and to the
input pixels (attacks).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, InputError

DTYPE = np.float32


@dataclass(frozen=True)
class DatasetMeta:
    height: int
    width: int
    channels: int
    classes: int
    examples: int = 0

    def __post_init__(self):
        for name in ("height", "width", "channels", "classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.examples < 0:
            raise ConfigError("examples must be >= 0")


@dataclass
class ImageBatch:
    """Pixels ``(N, H, W, C)`` in ``[0, 1]`` with integer labels ``(N,)``."""

    pixels: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4:
            raise InputError(f"pixels must be N x H x W x C, got shape {self.pixels.shape}")
        if self.labels.shape != (self.pixels.shape[0],):
            raise InputError(
                f"expected {self.pixels.shape[0]} labels, got shape {self.labels.shape}")

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def __getitem__(self, idx) -> "ImageBatch":
        if isinstance(idx, (int, np.integer)):
            idx = [idx]
        return ImageBatch(self.pixels[idx], self.labels[idx])

    def meta(self, classes: int) -> DatasetMeta:
        n, h, w, c = self.pixels.shape
        return DatasetMeta(h, w, c, classes, n)

    def validate(self, classes: int) -> None:
        if self.pixels.size and (self.pixels.min() < 0 or self.pixels.max() > 1):
            raise InputError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= classes):
            raise InputError(f"labels must lie in [0, {classes})")


# --------------------------------------------------------------------------- #
# Architecture
# --------------------------------------------------------------------------- #

_LAYER_DEFAULTS = {
    "conv": {"out_channels": None, "kernel": 3, "stride": 1, "padding": 0},
    "dense": {"units": None},
    "relu": {},
    "pool": {"window": 2},
}


def _normalize_layer(i: int, layer: Mapping[str, Any]) -> dict:
    kind = layer.get("type")
    if kind not in _LAYER_DEFAULTS:
        raise ConfigError(f"layer {i}: unknown layer type {kind!r}")
    out = {"type": kind}
    for key, default in _LAYER_DEFAULTS[kind].items():
        value = layer.get(key, default)
        if value is None:
            raise ConfigError(f"layer {i} ({kind}): missing {key!r}")
        out[key] = int(value)
    unknown = set(layer) - set(out)
    if unknown:
        raise ConfigError(f"layer {i} ({kind}): unknown fields {sorted(unknown)}")
    return out


@dataclass(frozen=True)
class ArchSpec:
    """Input geometry plus an ordered list of layer descriptors.

    Layer descriptors are plain dicts so that the architecture round-trips
    through JSON unchanged, e.g.::

        {"type": "conv", "out_channels": 16, "kernel": 3, "stride": 1, "padding": 1}
        {"type": "relu"}
        {"type": "pool", "window": 2}
        {"type": "dense", "units": 10}
    """

    height: int
    width: int
    channels: int
    classes: int
    layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        layers = tuple(_normalize_layer(i, l) for i, l in enumerate(self.layers))
        object.__setattr__(self, "layers", layers)
        self.shapes()  # validates the chain

    def shapes(self) -> list[tuple[int, ...]]:
        """Activation shape (without batch axis) before each layer, plus the output."""
        if min(self.height, self.width, self.channels) < 1:
            raise ConfigError("input dimensions must be >= 1")
        if self.classes < 2:
            raise ConfigError("classification needs at least 2 classes")
        if not self.layers:
            raise ConfigError("architecture has no layers")
        shape: tuple[int, ...] = (self.height, self.width, self.channels)
        out = [shape]
        for i, layer in enumerate(self.layers):
            kind = layer["type"]
            if kind == "conv":
                if len(shape) != 3:
                    raise ConfigError(f"layer {i} (conv): input is not spatial")
                h, w, _ = shape
                k, s, p = layer["kernel"], layer["stride"], layer["padding"]
                if k < 1 or s < 1 or p < 0 or layer["out_channels"] < 1:
                    raise ConfigError(f"layer {i} (conv): invalid kernel/stride/padding/channels")
                ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
                if ho < 1 or wo < 1:
                    raise ConfigError(f"layer {i} (conv): kernel {k} does not fit input {h}x{w}")
                shape = (ho, wo, layer["out_channels"])
            elif kind == "pool":
                if len(shape) != 3:
                    raise ConfigError(f"layer {i} (pool): input is not spatial")
                h, w, c = shape
                win = layer["window"]
                if win < 1 or h // win < 1 or w // win < 1:
                    raise ConfigError(f"layer {i} (pool): window {win} does not fit input {h}x{w}")
                shape = (h // win, w // win, c)
            elif kind == "dense":
                if layer["units"] < 1:
                    raise ConfigError(f"layer {i} (dense): units must be >= 1")
                shape = (layer["units"],)
            out.append(shape)
        if out[-1] != (self.classes,):
            raise ConfigError(
                f"layer {len(self.layers) - 1}: network output {out[-1]} does not match "
                f"{self.classes} classes")
        return out

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.height, self.width, self.channels)

    def to_dict(self) -> dict:
        return {"height": self.height, "width": self.width, "channels": self.channels,
                "classes": self.classes, "layers": [dict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ArchSpec":
        try:
            return cls(int(d["height"]), int(d["width"]), int(d["channels"]),
                       int(d["classes"]), tuple(d.get("layers", ())))
        except KeyError as e:
            raise ConfigError(f"architecture is missing field {e.args[0]!r}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def small_cnn(height: int = 16, width: int = 16, channels: int = 3, classes: int = 3) -> ArchSpec:
    """Reference network: conv3x3x16-relu-pool2, conv3x3x32-relu-pool2, dense-K."""
    return ArchSpec(height, width, channels, classes, (
        {"type": "conv", "out_channels": 16, "kernel": 3, "padding": 1},
        {"type": "relu"},
        {"type": "pool", "window": 2},
        {"type": "conv", "out_channels": 32, "kernel": 3, "padding": 1},
        {"type": "relu"},
        {"type": "pool", "window": 2},
        {"type": "dense", "units": classes},
    ))


# --------------------------------------------------------------------------- #
# Parameters
# --------------------------------------------------------------------------- #

@dataclass
class ClassifierParams:
    arch: ArchSpec
    tensors: dict[str, np.ndarray]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def astype(self, dtype) -> "ClassifierParams":
        return ClassifierParams(self.arch, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})


def param_shapes(arch: ArchSpec) -> dict[str, tuple[int, ...]]:
    shapes = arch.shapes()
    out = {}
    for i, layer in enumerate(arch.layers):
        in_shape = shapes[i]
        if layer["type"] == "conv":
            k = layer["kernel"]
            out[f"layer{i}.weight"] = (k, k, in_shape[2], layer["out_channels"])
            out[f"layer{i}.bias"] = (layer["out_channels"],)
        elif layer["type"] == "dense":
            out[f"layer{i}.weight"] = (int(np.prod(in_shape)), layer["units"])
            out[f"layer{i}.bias"] = (layer["units"],)
    return out


def build_model(arch: ArchSpec, seed: int = 0) -> ClassifierParams:
    """Initialise weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases at zero."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(arch).items():
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape, dtype=DTYPE)
        else:
            fan_in = int(np.prod(shape[:-1]))
            bound = 1.0 / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(DTYPE)
    return ClassifierParams(arch, tensors)


def check_params(params: ClassifierParams) -> None:
    expected = param_shapes(params.arch)
    for name, shape in expected.items():
        if name not in params.tensors:
            raise ConfigError(f"missing parameter tensor {name!r}")
        if params.tensors[name].shape != shape:
            raise ConfigError(
                f"tensor {name!r} has shape {params.tensors[name].shape}, expected {shape}")
    extra = set(params.tensors) - set(expected)
    if extra:
        raise ConfigError(f"unexpected parameter tensors {sorted(extra)}")


# --------------------------------------------------------------------------- #
# Layers
# --------------------------------------------------------------------------- #

def _conv_forward(x, w, b, stride, pad):
    n, h, wd, c = x.shape
    k, cout = w.shape[0], w.shape[3]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    ho, wo = win.shape[1], win.shape[2]
    # (N, Ho, Wo, C, k, k) -> (N, Ho*Wo, k*k*C) to match the (k, k, Cin, Cout) weight layout.
    # The matmul stays stacked per image so each output row is bit-identical whatever N is.
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, ho * wo, k * k * c)
    out = (cols @ w.reshape(k * k * c, cout) + b).reshape(n, ho, wo, cout)
    return out, (cols, x.shape, xp.shape)


def _conv_backward(dout, w, cache, stride, pad, need_dx=True):
    cols, xshape, xpshape = cache
    n, h, wd, c = xshape
    k, cout = w.shape[0], w.shape[3]
    ho, wo = dout.shape[1], dout.shape[2]
    d2 = dout.reshape(n, ho * wo, cout)
    dw = (cols.reshape(-1, k * k * c).T @ d2.reshape(-1, cout)).reshape(w.shape)
    db = d2.sum(axis=(0, 1))
    if not need_dx:
        return None, dw, db
    dcols = (d2 @ w.reshape(k * k * c, cout).T).reshape(n, ho, wo, k, k, c)
    dxp = np.zeros(xpshape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, pad:pad + h, pad:pad + wd, :] if pad else dxp
    return dx, dw, db


def _pool_forward(x, win):
    n, h, w, c = x.shape
    ho, wo = h // win, w // win
    blocks = x[:, :ho * win, :wo * win, :].reshape(n, ho, win, wo, win, c)
    blocks = blocks.transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, win * win)
    idx = blocks.argmax(axis=-1)  # first maximum receives the gradient
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def _pool_backward(dout, win, cache):
    idx, xshape = cache
    n, h, w, c = xshape
    ho, wo = dout.shape[1], dout.shape[2]
    dblocks = np.zeros((n, ho, wo, c, win * win), dtype=dout.dtype)
    np.put_along_axis(dblocks, idx[..., None], dout[..., None], axis=-1)
    dblocks = dblocks.reshape(n, ho, wo, c, win, win).transpose(0, 1, 4, 2, 5, 3)
    dx = np.zeros(xshape, dtype=dout.dtype)
    dx[:, :ho * win, :wo * win, :] = dblocks.reshape(n, ho * win, wo * win, c)
    return dx


def _as_pixels(params: ClassifierParams, batch) -> np.ndarray:
    x = batch.pixels if isinstance(batch, ImageBatch) else np.asarray(batch)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[1:] != params.arch.input_shape:
        raise InputError(
            f"input of shape {x.shape} does not match model input {params.arch.input_shape}")
    return x.astype(params.dtype, copy=False)


def _forward(params: ClassifierParams, x: np.ndarray, keep: bool):
    caches = []
    t = params.tensors
    for i, layer in enumerate(params.arch.layers):
        kind = layer["type"]
        if kind == "conv":
            x, cache = _conv_forward(x, t[f"layer{i}.weight"], t[f"layer{i}.bias"],
                                     layer["stride"], layer["padding"])
        elif kind == "relu":
            cache = x > 0
            x = np.where(cache, x, 0).astype(x.dtype, copy=False)
        elif kind == "pool":
            x, cache = _pool_forward(x, layer["window"])
        else:
            cache = x.shape
            flat = x.reshape(x.shape[0], 1, -1)
            x = (flat @ t[f"layer{i}.weight"])[:, 0] + t[f"layer{i}.bias"]
            cache = (flat, cache)
        if keep:
            caches.append(cache)
    return x, caches


def _backward(params: ClassifierParams, dlogits: np.ndarray, caches, need_dx: bool,
              need_params: bool):
    grads = {}
    t = params.tensors
    d = dlogits
    for i in range(len(params.arch.layers) - 1, -1, -1):
        layer = params.arch.layers[i]
        kind, cache = layer["type"], caches[i]
        # the first layer only needs an input gradient when the caller asks for it
        want_dx = need_dx or i > 0
        if kind == "dense":
            flat, shape = cache
            w = t[f"layer{i}.weight"]
            if need_params:
                grads[f"layer{i}.weight"] = flat[:, 0].T @ d
                grads[f"layer{i}.bias"] = d.sum(axis=0)
            d = (d[:, None] @ w.T).reshape(shape) if want_dx else None
        elif kind == "relu":
            d = np.where(cache, d, 0).astype(d.dtype, copy=False)
        elif kind == "pool":
            d = _pool_backward(d, layer["window"], cache)
        else:
            d, dw, db = _conv_backward(d, t[f"layer{i}.weight"], cache, layer["stride"],
                                       layer["padding"], need_dx=want_dx)
            if need_params:
                grads[f"layer{i}.weight"] = dw
                grads[f"layer{i}.bias"] = db
    return d, grads


# --------------------------------------------------------------------------- #
# Public API
# --------------------------------------------------------------------------- #

def forward(params: ClassifierParams, batch) -> np.ndarray:
    """Logits ``(N, K)`` for an :class:`ImageBatch` or a pixel array."""
    logits, _ = _forward(params, _as_pixels(params, batch), keep=False)
    return logits


def _check_labels(labels, n: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got {labels.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise InputError(f"label out of range [0, {classes})")
    return labels


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def per_example_loss_from_logits(logits: np.ndarray, labels) -> np.ndarray:
    logits = np.atleast_2d(logits)
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    return -_log_softmax(logits)[np.arange(logits.shape[0]), labels]


def cross_entropy(logits: np.ndarray, labels) -> float:
    """Mean of ``-log softmax(logits_i)[y_i]`` over the batch."""
    return float(per_example_loss_from_logits(logits, labels).mean())


def _dlogits(logits, labels, scale):
    p = np.exp(_log_softmax(logits))
    p[np.arange(len(labels)), labels] -= 1
    return (p * scale).astype(logits.dtype, copy=False)


def per_example_loss(params: ClassifierParams, x, labels) -> np.ndarray:
    """Cross-entropy of each image against its own label, shape ``(N,)``."""
    return per_example_loss_from_logits(forward(params, x), labels)


def loss_and_input_grad(params: ClassifierParams, x, labels, return_logits: bool = False):
    """Per-example losses and the gradient of each example's loss w.r.t. its pixels."""
    x = _as_pixels(params, x)
    labels = _check_labels(labels, x.shape[0], params.arch.classes)
    logits, caches = _forward(params, x, keep=True)
    losses = -_log_softmax(logits)[np.arange(len(labels)), labels]
    dx, _ = _backward(params, _dlogits(logits, labels, 1.0), caches, need_dx=True,
                      need_params=False)
    if return_logits:
        return losses, dx, logits
    return losses, dx


def input_gradient(params: ClassifierParams, image: np.ndarray, label: int) -> np.ndarray:
    """Gradient ``H x W x C`` of the cross-entropy w.r.t. the pixels of one image."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise InputError(f"expected a single H x W x C image, got shape {image.shape}")
    _, g = loss_and_input_grad(params, image[None], [label])
    return g[0]


def loss_and_param_grad(params: ClassifierParams, x, labels, per_example: bool = False):
    """Mean cross-entropy over the batch and its gradient for every parameter tensor.

    With ``per_example=True`` the first return value is the vector of
    per-example losses instead of their mean.
    """
    x = _as_pixels(params, x)
    labels = _check_labels(labels, x.shape[0], params.arch.classes)
    logits, caches = _forward(params, x, keep=True)
    losses = -_log_softmax(logits)[np.arange(len(labels)), labels]
    _, grads = _backward(params, _dlogits(logits, labels, 1.0 / len(labels)), caches,
                         need_dx=False, need_params=True)
    return (losses if per_example else float(losses.mean())), grads


def param_gradient(params: ClassifierParams, batch: ImageBatch) -> dict[str, np.ndarray]:
    return loss_and_param_grad(params, batch.pixels, batch.labels)[1]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.075
    lr_decay: float = 0.95
    weight_decay: float = 0.001
    epochs: int = 200
    batch_size: int = 100
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must lie in (0, 1]")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** epoch


def sgd_step(params: ClassifierParams, grads: Mapping[str, np.ndarray], cfg: TrainConfig,
             epoch: int) -> ClassifierParams:
    """One step of ``w <- w - lr * decay**epoch * (g + weight_decay * w)``."""
    if set(grads) != set(params.tensors):
        raise RuntimeError(
            f"gradient tensors {sorted(grads)} do not match parameters {sorted(params.tensors)}")
    lr = cfg.lr_at(epoch)
    new = {}
    for name, w in params.tensors.items():
        g = grads[name]
        if g.shape != w.shape:
            raise RuntimeError(f"gradient for {name!r} has shape {g.shape}, expected {w.shape}")
        new[name] = (w - lr * (g + cfg.weight_decay * w)).astype(w.dtype, copy=False)
    return ClassifierParams(params.arch, new)


def predict_batch(params: ClassifierParams, x) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return forward(params, x).argmax(axis=1)


def predict(params: ClassifierParams, image: np.ndarray) -> int:
    return int(predict_batch(params, np.asarray(image)[None] if np.ndim(image) == 3 else image)[0])
