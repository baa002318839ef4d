"""Minimal differentiable feed-forward network engine.

Models are opaque flat parameter vectors (:class:`ParamVector`) paired with an
:class:`Architecture` descriptor.  All operations are pure functions: they
never mutate their inputs and are bit-reproducible given the same seed.
Supported layers: dense, 2-D convolution (valid padding), non-overlapping max
pooling, ReLU and dropout.  The loss is softmax cross-entropy throughout.

Everything is computed in float64; checkpoints store float32 (documented
precision loss on reload).
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError, InputError, InternalError
from .seeding import derive_seed

# ---------------------------------------------------------------------------
# Layer specs and architecture descriptor
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int
    feature_layer: bool = False


@dataclass(frozen=True)
class Conv2d:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    feature_layer: bool = False


@dataclass(frozen=True)
class MaxPool2d:
    kernel: int


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float


LayerSpec = Union[Dense, Conv2d, MaxPool2d, Relu, Dropout]

_KIND = {Dense: "dense", Conv2d: "conv2d", MaxPool2d: "maxpool", Relu: "relu", Dropout: "dropout"}


@dataclass
class Architecture:
    """Ordered layer stack plus input/output contract.

    On construction the layer chain is shape-checked and, if no layer is
    explicitly marked, a feature layer is chosen automatically: the last
    convolution layer, or for conv-free stacks the last dense layer that is
    not the output layer (the only dense layer if there is just one).  The
    feature layer is the slice of the parameter vector used by sensitivity
    extraction.
    """

    layers: tuple
    input_shape: tuple
    n_classes: int

    def __post_init__(self):
        self.layers = tuple(self.layers)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if self.n_classes < 2:
            raise InputError(f"n_classes must be >= 2, got {self.n_classes}")
        self._check_shapes()
        if not any(getattr(l, "feature_layer", False) for l in self.layers):
            self._mark_default_feature_layer()

    def _check_shapes(self):
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                flat = int(np.prod(shape))
                if flat != layer.in_dim:
                    raise InputError(
                        f"layer {i}: dense expects {layer.in_dim} inputs, got shape {shape}"
                    )
                shape = (layer.out_dim,)
            elif isinstance(layer, Conv2d):
                if len(shape) != 3 or shape[0] != layer.in_ch:
                    raise InputError(
                        f"layer {i}: conv2d expects ({layer.in_ch}, H, W), got shape {shape}"
                    )
                h = (shape[1] - layer.kernel) // layer.stride + 1
                w = (shape[2] - layer.kernel) // layer.stride + 1
                if h < 1 or w < 1:
                    raise InputError(f"layer {i}: conv2d kernel larger than input {shape}")
                shape = (layer.out_ch, h, w)
            elif isinstance(layer, MaxPool2d):
                if len(shape) != 3:
                    raise InputError(f"layer {i}: maxpool expects (C, H, W), got shape {shape}")
                h, w = shape[1] // layer.kernel, shape[2] // layer.kernel
                if h < 1 or w < 1:
                    raise InputError(f"layer {i}: maxpool kernel larger than input {shape}")
                shape = (shape[0], h, w)
            elif isinstance(layer, Dropout):
                if not 0.0 <= layer.rate < 1.0:
                    raise InputError(f"layer {i}: dropout rate must be in [0, 1)")
            elif not isinstance(layer, Relu):
                raise InputError(f"layer {i}: unknown layer spec {layer!r}")
        if shape != (self.n_classes,):
            raise InputError(
                f"final layer produces shape {shape}, expected ({self.n_classes},)"
            )

    def _mark_default_feature_layer(self):
        conv_idx = [i for i, l in enumerate(self.layers) if isinstance(l, Conv2d)]
        dense_idx = [i for i, l in enumerate(self.layers) if isinstance(l, Dense)]
        if conv_idx:
            pick = conv_idx[-1]
        elif len(dense_idx) >= 2:
            pick = dense_idx[-2]
        elif dense_idx:
            pick = dense_idx[-1]
        else:
            raise InputError("architecture has no parameterised layer to mark as feature layer")
        layers = list(self.layers)
        layers[pick] = dataclasses.replace(layers[pick], feature_layer=True)
        self.layers = tuple(layers)

    def to_json(self) -> str:
        out = {"input_shape": list(self.input_shape), "n_classes": self.n_classes, "layers": []}
        for layer in self.layers:
            entry = {"kind": _KIND[type(layer)]}
            entry.update(dataclasses.asdict(layer))
            out["layers"].append(entry)
        return json.dumps(out, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "Architecture":
        raw = json.loads(text)
        ctor = {"dense": Dense, "conv2d": Conv2d, "maxpool": MaxPool2d, "relu": Relu, "dropout": Dropout}
        layers = []
        for entry in raw["layers"]:
            kind = entry.pop("kind")
            layers.append(ctor[kind](**entry))
        return Architecture(tuple(layers), tuple(raw["input_shape"]), raw["n_classes"])


def _layer_id(index: int, layer: LayerSpec) -> str:
    return f"{index}:{_KIND[type(layer)]}"


def layer_param_shapes(arch: Architecture) -> list:
    """(layer_id, [(name, shape), ...]) for every parameterised layer, in order."""
    out = []
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, Dense):
            out.append((_layer_id(i, layer), [("W", (layer.in_dim, layer.out_dim)), ("b", (layer.out_dim,))]))
        elif isinstance(layer, Conv2d):
            out.append((
                _layer_id(i, layer),
                [("W", (layer.out_ch, layer.in_ch, layer.kernel, layer.kernel)), ("b", (layer.out_ch,))],
            ))
    return out


def feature_layer_id(arch: Architecture) -> str:
    for i, layer in enumerate(arch.layers):
        if getattr(layer, "feature_layer", False):
            return _layer_id(i, layer)
    raise InternalError("architecture has no feature layer")


# ---------------------------------------------------------------------------
# Parameter vectors
# ---------------------------------------------------------------------------


@dataclass
class ParamVector:
    """Flat float64 parameter vector with a layer-id -> (offset, length) map."""

    values: np.ndarray
    layout: dict

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise InputError("ParamVector values must be 1-D")
        spans = sorted(self.layout.values())
        cursor = 0
        for off, length in spans:
            if off != cursor:
                raise InternalError("layout offsets must be contiguous and non-overlapping")
            cursor += length
        if cursor != self.values.size:
            raise InternalError(
                f"layout covers {cursor} values but vector has {self.values.size}"
            )

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def layer_values(self, layer_id: str) -> np.ndarray:
        off, length = self.layout[layer_id]
        return self.values[off:off + length]

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout and self.values.size == other.values.size


# A gradient has exactly the shape and layout of the model it came from.
GradientVector = ParamVector


def _build_layout(arch: Architecture) -> dict:
    layout, offset = {}, 0
    for layer_id, parts in layer_param_shapes(arch):
        length = sum(int(np.prod(s)) for _, s in parts)
        layout[layer_id] = (offset, length)
        offset += length
    return layout


def zeros_like_params(arch: Architecture) -> ParamVector:
    layout = _build_layout(arch)
    total = sum(length for _, length in layout.values())
    return ParamVector(np.zeros(total), layout)


def init_params(arch: Architecture, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases, deterministic by seed."""
    rng = np.random.default_rng(derive_seed(seed, "init"))
    pv = zeros_like_params(arch)
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, Dense):
            fan_in, fan_out = layer.in_dim, layer.out_dim
            w_size = fan_in * fan_out
        elif isinstance(layer, Conv2d):
            fan_in = layer.in_ch * layer.kernel * layer.kernel
            fan_out = layer.out_ch * layer.kernel * layer.kernel
            w_size = layer.out_ch * layer.in_ch * layer.kernel * layer.kernel
        else:
            continue
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        block = pv.layer_values(_layer_id(i, layer))
        block[:w_size] = rng.uniform(-bound, bound, w_size)
    return pv


def _layer_params(pv: ParamVector, arch: Architecture, index: int):
    """(W, b) views into the flat vector for the parameterised layer at index."""
    layer = arch.layers[index]
    block = pv.layer_values(_layer_id(index, layer))
    if isinstance(layer, Dense):
        w_size = layer.in_dim * layer.out_dim
        return block[:w_size].reshape(layer.in_dim, layer.out_dim), block[w_size:]
    if isinstance(layer, Conv2d):
        w_size = layer.out_ch * layer.in_ch * layer.kernel * layer.kernel
        return (
            block[:w_size].reshape(layer.out_ch, layer.in_ch, layer.kernel, layer.kernel),
            block[w_size:],
        )
    raise InternalError(f"layer {index} has no parameters")


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _as_batch(arch: Architecture, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise InputError("batch is empty")
    flat = int(np.prod(X.shape[1:]))
    if flat != int(np.prod(arch.input_shape)):
        raise InputError(
            f"sample shape {X.shape[1:]} incompatible with input shape {arch.input_shape}"
        )
    return X.reshape(X.shape[0], *arch.input_shape)


def _run_layers(pv, arch, X, train_mode, rng):
    """Forward pass returning (logits, caches) for the backward walk."""
    act = X
    caches = []
    for i, layer in enumerate(arch.layers):
        if isinstance(layer, Dense):
            flat = act.reshape(act.shape[0], -1)
            W, b = _layer_params(pv, arch, i)
            caches.append(("dense", act.shape, flat))
            act = flat @ W + b
        elif isinstance(layer, Conv2d):
            win = sliding_window_view(act, (layer.kernel, layer.kernel), axis=(2, 3))
            win = win[:, :, ::layer.stride, ::layer.stride, :, :]
            W, b = _layer_params(pv, arch, i)
            caches.append(("conv2d", act, win))
            act = np.einsum("nchwij,ocij->nohw", win, W) + b[None, :, None, None]
        elif isinstance(layer, MaxPool2d):
            k = layer.kernel
            n, c, h, w = act.shape
            ho, wo = h // k, w // k
            tiles = act[:, :, :ho * k, :wo * k].reshape(n, c, ho, k, wo, k)
            tiles = tiles.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
            idx = tiles.argmax(axis=-1)  # first max wins: deterministic tie-break
            caches.append(("maxpool", act.shape, idx))
            act = np.take_along_axis(tiles, idx[..., None], axis=-1)[..., 0]
        elif isinstance(layer, Relu):
            caches.append(("relu", act > 0))
            act = np.maximum(act, 0.0)
        elif isinstance(layer, Dropout):
            if train_mode and layer.rate > 0.0:
                keep = rng.random(act.shape) >= layer.rate
                scale = 1.0 / (1.0 - layer.rate)
                caches.append(("dropout", keep, scale))
                act = act * keep * scale
            else:
                caches.append(("dropout", None, 1.0))
    return act, caches


def _softmax_xent(logits: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. logits (stable log-sum-exp)."""
    n = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - lse
    loss = -log_p[np.arange(n), y].mean()
    grad = np.exp(log_p)
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def _loss_and_grad(pv, arch, X, y, train_mode=False, rng=None):
    X = _as_batch(arch, X)
    y = np.asarray(y, dtype=np.int64)
    logits, caches = _run_layers(pv, arch, X, train_mode, rng)
    loss, delta = _softmax_xent(logits, y)

    grad = zeros_like_params(arch)
    for i in range(len(arch.layers) - 1, -1, -1):
        layer = arch.layers[i]
        cache = caches[i]
        if isinstance(layer, Dense):
            _, in_shape, flat = cache
            W, _ = _layer_params(pv, arch, i)
            gW, gb = _layer_params(grad, arch, i)
            gW += flat.T @ delta
            gb += delta.sum(axis=0)
            delta = (delta @ W.T).reshape(in_shape)
        elif isinstance(layer, Conv2d):
            _, x_in, win = cache
            W, _ = _layer_params(pv, arch, i)
            gW, gb = _layer_params(grad, arch, i)
            gW += np.einsum("nchwij,nohw->ocij", win, delta)
            gb += delta.sum(axis=(0, 2, 3))
            dx = np.zeros_like(x_in)
            s, k = layer.stride, layer.kernel
            ho, wo = delta.shape[2], delta.shape[3]
            for ki in range(k):
                for kj in range(k):
                    dx[:, :, ki:ki + s * ho:s, kj:kj + s * wo:s] += np.einsum(
                        "oc,nohw->nchw", W[:, :, ki, kj], delta
                    )
            delta = dx
        elif isinstance(layer, MaxPool2d):
            _, in_shape, idx = cache
            k = layer.kernel
            n, c, h, w = in_shape
            ho, wo = idx.shape[2], idx.shape[3]
            dtiles = np.zeros((n, c, ho, wo, k * k))
            np.put_along_axis(dtiles, idx[..., None], delta[..., None], axis=-1)
            dx = np.zeros(in_shape)
            dx[:, :, :ho * k, :wo * k] = (
                dtiles.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
            )
            delta = dx
        elif isinstance(layer, Relu):
            delta = delta * cache[1]
        elif isinstance(layer, Dropout):
            _, keep, scale = cache
            if keep is not None:
                delta = delta * keep * scale
    return loss, grad


def forward(pv: ParamVector, arch: Architecture, X: np.ndarray, y: np.ndarray):
    """Evaluation-mode forward pass: (logits, mean softmax cross-entropy)."""
    X = _as_batch(arch, X)
    y = np.asarray(y, dtype=np.int64)
    logits, _ = _run_layers(pv, arch, X, train_mode=False, rng=None)
    loss, _ = _softmax_xent(logits, y)
    return logits, loss


def predict_logits(pv: ParamVector, arch: Architecture, X: np.ndarray) -> np.ndarray:
    X = _as_batch(arch, X)
    logits, _ = _run_layers(pv, arch, X, train_mode=False, rng=None)
    return logits


def backward(pv: ParamVector, arch: Architecture, X: np.ndarray, y: np.ndarray) -> GradientVector:
    """Gradient of the mean batch loss w.r.t. every parameter (eval mode)."""
    return _loss_and_grad(pv, arch, X, y)[1]


def accuracy(pv: ParamVector, arch: Architecture, X: np.ndarray, y: np.ndarray) -> float:
    logits = predict_logits(pv, arch, X)
    return float((logits.argmax(axis=1) == np.asarray(y)).mean())


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DpConfig:
    """Per-example clipping plus Gaussian noise for DP-SGD local training."""

    clip_norm: float
    noise_multiplier: float

    def __post_init__(self):
        if self.clip_norm <= 0:
            raise InputError("clip_norm must be > 0")
        if self.noise_multiplier < 0:
            raise InputError("noise_multiplier must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float
    epochs: int
    batch_size: int
    dropout_enabled: bool = False
    dp: Optional[DpConfig] = None
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InputError("learning_rate must be > 0")
        if self.epochs < 0:
            raise InputError("epochs must be >= 0")
        if self.batch_size < 1:
            raise InputError("batch_size must be >= 1")


def sgd_step(pv: ParamVector, grad: GradientVector, lr: float) -> ParamVector:
    if lr <= 0:
        raise InputError("learning rate must be > 0")
    if not pv.same_layout(grad):
        raise InternalError("gradient layout does not match model layout")
    return ParamVector(pv.values - lr * grad.values, pv.layout)


def dp_sgd_step(
    pv: ParamVector,
    per_example_grads: list,
    clip_norm: float,
    noise_multiplier: float,
    lr: float,
    rng: np.random.Generator,
) -> ParamVector:
    """Clip each per-example gradient to clip_norm, average, add Gaussian noise
    with per-coordinate std noise_multiplier * clip_norm / batch_size, then step."""
    if not per_example_grads:
        raise InputError("per_example_grads is empty")
    if clip_norm <= 0:
        raise InputError("clip_norm must be > 0")
    if noise_multiplier < 0:
        raise InputError("noise_multiplier must be >= 0")
    batch = len(per_example_grads)
    mean = np.zeros_like(pv.values)
    for g in per_example_grads:
        if not pv.same_layout(g):
            raise InternalError("per-example gradient layout mismatch")
        norm = float(np.linalg.norm(g.values))
        scale = min(1.0, clip_norm / norm) if norm > 0 else 1.0
        mean += g.values * scale
    mean /= batch
    if noise_multiplier > 0:
        mean = mean + rng.normal(0.0, noise_multiplier * clip_norm / batch, size=mean.shape)
    return sgd_step(pv, ParamVector(mean, pv.layout), lr)


def train(
    pv: ParamVector,
    arch: Architecture,
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
) -> ParamVector:
    """Mini-batch SGD for cfg.epochs passes; deterministic given cfg.seed.

    Shuffle order, dropout masks and DP noise all come from one generator
    seeded from cfg.seed, so identical configs give bit-identical results.
    With cfg.dp set, per-example gradients are computed one sample at a time
    (microbatch 1) and fed to :func:`dp_sgd_step`.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = X.shape[0]
    if n == 0:
        raise InputError("training dataset is empty")
    if cfg.batch_size > n:
        raise InputError(f"batch_size {cfg.batch_size} exceeds dataset size {n}")
    rng = np.random.default_rng(derive_seed(cfg.seed, "train"))
    out = pv.copy()
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if cfg.dp is None:
                _, grad = _loss_and_grad(
                    out, arch, X[idx], y[idx], train_mode=cfg.dropout_enabled, rng=rng
                )
                out = sgd_step(out, grad, cfg.learning_rate)
            else:
                grads = [
                    _loss_and_grad(
                        out, arch, X[i:i + 1], y[i:i + 1],
                        train_mode=cfg.dropout_enabled, rng=rng,
                    )[1]
                    for i in idx
                ]
                out = dp_sgd_step(
                    out, grads, cfg.dp.clip_norm, cfg.dp.noise_multiplier,
                    cfg.learning_rate, rng,
                )
    return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"PPAM"
_VERSION = 1


def save_checkpoint(path, pv: ParamVector, arch: Architecture) -> None:
    """Binary checkpoint: magic, u16 version, length-prefixed JSON descriptor,
    then parameters as little-endian float32 in layout order."""
    descriptor = arch.to_json().encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<H", _VERSION))
        f.write(struct.pack("<I", len(descriptor)))
        f.write(descriptor)
        f.write(pv.values.astype("<f4").tobytes())


def load_checkpoint(path):
    """Load a checkpoint, returning (ParamVector, Architecture).

    Values were stored as float32, so reloaded parameters are float64
    round-trips of the float32 representation.
    """
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {_MAGIC!r}")
    if len(blob) < 10:
        raise FormatError("truncated checkpoint header")
    (version,) = struct.unpack("<H", blob[4:6])
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (desc_len,) = struct.unpack("<I", blob[6:10])
    if len(blob) < 10 + desc_len:
        raise FormatError("truncated architecture descriptor")
    arch = Architecture.from_json(blob[10:10 + desc_len].decode("utf-8"))
    payload = blob[10 + desc_len:]
    expected = sum(length for _, length in _build_layout(arch).values())
    if len(payload) != 4 * expected:
        raise FormatError(
            f"parameter payload holds {len(payload) // 4} floats, expected {expected}"
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return ParamVector(values, _build_layout(arch)), arch
