"""Small convolutional network engine: layers, backprop, optimizers.

Everything is plain numpy.  Weights default to float32; every layer is
dtype-generic so the gradient-check oracle can run the identical code path
in float64.  Layer specs describe architecture only; `Network` instantiates
them with seeded He-uniform weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np


class ShapeError(ValueError):
    """Input shape does not compose with a layer, named in the message."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared during forward/backward or training."""


# ---------------------------------------------------------------- layer specs


@dataclass(frozen=True)
class ConvSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    zero_padding: int = 0


@dataclass(frozen=True)
class ReluSpec:
    pass


@dataclass(frozen=True)
class MaxPoolSpec:
    kernel: int = 2
    stride: int = 2


@dataclass(frozen=True)
class FlattenSpec:
    pass


@dataclass(frozen=True)
class DenseSpec:
    out_features: int


LayerSpec = Union[ConvSpec, ReluSpec, MaxPoolSpec, FlattenSpec, DenseSpec]


def spec_to_json(spec: LayerSpec) -> dict:
    if isinstance(spec, ConvSpec):
        return {"type": "conv", "out_channels": spec.out_channels, "kernel": spec.kernel,
                "stride": spec.stride, "zero_padding": spec.zero_padding}
    if isinstance(spec, ReluSpec):
        return {"type": "relu"}
    if isinstance(spec, MaxPoolSpec):
        return {"type": "maxpool", "kernel": spec.kernel, "stride": spec.stride}
    if isinstance(spec, FlattenSpec):
        return {"type": "flatten"}
    if isinstance(spec, DenseSpec):
        return {"type": "dense", "out_features": spec.out_features}
    raise TypeError(f"unknown layer spec {spec!r}")


def spec_from_json(obj: dict) -> LayerSpec:
    kind = obj["type"]
    if kind == "conv":
        return ConvSpec(obj["out_channels"], obj["kernel"], obj["stride"], obj["zero_padding"])
    if kind == "relu":
        return ReluSpec()
    if kind == "maxpool":
        return MaxPoolSpec(obj["kernel"], obj["stride"])
    if kind == "flatten":
        return FlattenSpec()
    if kind == "dense":
        return DenseSpec(obj["out_features"])
    raise ValueError(f"unknown layer spec type {kind!r}")


# -------------------------------------------------------------------- layers


class Parameter:
    """A weight tensor with its accumulated gradient and a freeze flag."""

    __slots__ = ("name", "value", "grad", "frozen")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.frozen = False

    def zero_grad(self) -> None:
        self.grad[...] = 0


class Layer:
    name: str = "layer"

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def params(self) -> list[Parameter]:
        return []

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError


class Conv2d(Layer):
    """2D convolution via im2col; NCHW layout, square kernel, zero padding."""

    def __init__(self, name: str, in_channels: int, spec: ConvSpec, rng: np.random.Generator,
                 dtype=np.float32):
        self.name = name
        self.in_channels = in_channels
        self.spec = spec
        fan_in = in_channels * spec.kernel * spec.kernel
        limit = math.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(spec.out_channels, in_channels, spec.kernel, spec.kernel))
        self.weight = Parameter(f"{name}.weight", w.astype(dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(spec.out_channels, dtype=dtype))
        self._cols: Optional[np.ndarray] = None
        self._in_shape: Optional[tuple[int, ...]] = None

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def out_shape(self, in_shape):
        c, h, w = in_shape
        if c != self.in_channels:
            raise ShapeError(f"{self.name}: expected {self.in_channels} input channels, got {c}")
        k, s, p = self.spec.kernel, self.spec.stride, self.spec.zero_padding
        oh = (h + 2 * p - k) // s + 1
        ow = (w + 2 * p - k) // s + 1
        if oh < 1 or ow < 1:
            raise ShapeError(f"{self.name}: {h}x{w} input too small for kernel {k}, stride {s}")
        return (self.spec.out_channels, oh, ow)

    def forward(self, x):
        n, c, h, w = x.shape
        oc, oh, ow = self.out_shape((c, h, w))
        k, s, p = self.spec.kernel, self.spec.stride, self.spec.zero_padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = np.empty((n, c, k, k, oh, ow), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, i, j] = xp[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s]
        cols2 = cols.reshape(n, c * k * k, oh * ow)
        wm = self.weight.value.reshape(oc, c * k * k)
        y = np.matmul(wm, cols2) + self.bias.value[None, :, None]
        self._cols = cols2
        self._in_shape = x.shape
        return y.reshape(n, oc, oh, ow)

    def backward(self, dy):
        n, oc, oh, ow = dy.shape
        _, c, h, w = self._in_shape
        k, s, p = self.spec.kernel, self.spec.stride, self.spec.zero_padding
        dym = dy.reshape(n, oc, oh * ow)
        wm = self.weight.value.reshape(oc, c * k * k)
        if not self.weight.frozen:
            dw = np.matmul(dym, self._cols.transpose(0, 2, 1)).sum(axis=0)
            self.weight.grad += dw.reshape(self.weight.value.shape)
            self.bias.grad += dy.sum(axis=(0, 2, 3))
        dcols = np.matmul(wm.T, dym).reshape(n, c, k, k, oh, ow)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s] += dcols[:, :, i, j]
        return dxp[:, :, p : p + h, p : p + w] if p else dxp


class ReLU(Layer):
    def __init__(self, name: str):
        self.name = name
        self._mask: Optional[np.ndarray] = None

    def out_shape(self, in_shape):
        return in_shape

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class MaxPool(Layer):
    """Max pooling; gradient flows to the first maximum on ties."""

    def __init__(self, name: str, spec: MaxPoolSpec):
        self.name = name
        self.spec = spec
        self._winners: Optional[np.ndarray] = None
        self._in_shape: Optional[tuple[int, ...]] = None

    def out_shape(self, in_shape):
        c, h, w = in_shape
        k, s = self.spec.kernel, self.spec.stride
        if h < k or w < k:
            raise ShapeError(f"{self.name}: {h}x{w} input smaller than pool kernel {k}")
        return (c, (h - k) // s + 1, (w - k) // s + 1)

    def forward(self, x):
        n, c, h, w = x.shape
        _, oh, ow = self.out_shape((c, h, w))
        k, s = self.spec.kernel, self.spec.stride
        best = np.full((n, c, oh, ow), -np.inf, dtype=x.dtype)
        winner = np.zeros((n, c, oh, ow), dtype=np.int64)
        base_y = np.arange(oh)[:, None] * s
        base_x = np.arange(ow)[None, :] * s
        for i in range(k):
            for j in range(k):
                window = x[:, :, i : i + s * (oh - 1) + 1 : s, j : j + s * (ow - 1) + 1 : s]
                better = window > best
                flat = (base_y + i) * w + (base_x + j)
                winner = np.where(better, flat[None, None], winner)
                best = np.where(better, window, best)
        self._winners = winner
        self._in_shape = x.shape
        return best

    def backward(self, dy):
        n, c, h, w = self._in_shape
        dx = np.zeros((n, c, h * w), dtype=dy.dtype)
        flat_idx = self._winners.reshape(n, c, -1)
        np.put_along_axis(
            dx, flat_idx, np.take_along_axis(dx, flat_idx, axis=2) + dy.reshape(n, c, -1), axis=2
        )
        return dx.reshape(n, c, h, w)


class Flatten(Layer):
    def __init__(self, name: str):
        self.name = name
        self._in_shape: Optional[tuple[int, ...]] = None

    def out_shape(self, in_shape):
        size = 1
        for d in in_shape:
            size *= d
        return (size,)

    def forward(self, x):
        self._in_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._in_shape)


class Dense(Layer):
    def __init__(self, name: str, in_features: int, spec: DenseSpec, rng: np.random.Generator,
                 dtype=np.float32):
        self.name = name
        self.in_features = in_features
        self.spec = spec
        limit = math.sqrt(6.0 / in_features)
        w = rng.uniform(-limit, limit, size=(spec.out_features, in_features))
        self.weight = Parameter(f"{name}.weight", w.astype(dtype))
        self.bias = Parameter(f"{name}.bias", np.zeros(spec.out_features, dtype=dtype))
        self._x: Optional[np.ndarray] = None

    def params(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def out_shape(self, in_shape):
        if len(in_shape) != 1 or in_shape[0] != self.in_features:
            raise ShapeError(f"{self.name}: expected ({self.in_features},) input, got {in_shape}")
        return (self.spec.out_features,)

    def forward(self, x):
        self._x = x
        return x @ self.weight.value.T + self.bias.value

    def backward(self, dy):
        if not self.weight.frozen:
            self.weight.grad += dy.T @ self._x
            self.bias.grad += dy.sum(axis=0)
        return dy @ self.weight.value


# ------------------------------------------------------------------- network


class Network:
    """Layer stack over a fixed input geometry (channels, square size)."""

    def __init__(self, in_channels: int, in_size: int, specs: Sequence[LayerSpec],
                 seed: int = 0, dtype=np.float32):
        self.in_channels = in_channels
        self.in_size = in_size
        self.specs = list(specs)
        self.seed = seed
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.layers: list[Layer] = []
        shape: tuple[int, ...] = (in_channels, in_size, in_size)
        for idx, spec in enumerate(self.specs):
            name = f"layer{idx}:{type(spec).__name__.removesuffix('Spec').lower()}"
            if isinstance(spec, ConvSpec):
                layer: Layer = Conv2d(name, shape[0], spec, rng, dtype)
            elif isinstance(spec, ReluSpec):
                layer = ReLU(name)
            elif isinstance(spec, MaxPoolSpec):
                layer = MaxPool(name, spec)
            elif isinstance(spec, FlattenSpec):
                layer = Flatten(name)
            elif isinstance(spec, DenseSpec):
                if len(shape) != 1:
                    raise ShapeError(f"{name}: dense layer needs flattened input, got shape {shape}")
                layer = Dense(name, shape[0], spec, rng, dtype)
            else:
                raise TypeError(f"unknown layer spec {spec!r}")
            shape = layer.out_shape(shape)
            self.layers.append(layer)
        self.out_features = shape[0] if len(shape) == 1 else shape

    def params(self) -> list[Parameter]:
        out: list[Parameter] = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def freeze_prefix(self, count: int) -> None:
        """Disable gradient updates for the first `count` layers."""
        for layer in self.layers[:count]:
            for p in layer.params():
                p.frozen = True
        for layer in self.layers[count:]:
            for p in layer.params():
                p.frozen = False

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2] != self.in_size \
                or x.shape[3] != self.in_size:
            raise ShapeError(
                f"network expects (N,{self.in_channels},{self.in_size},{self.in_size}), got {x.shape}"
            )
        y = x.astype(self.dtype, copy=False)
        for layer in self.layers:
            y = layer.forward(y)
        if not np.all(np.isfinite(y)):
            raise NumericalError("non-finite activation at network output")
        return y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def astype(self, dtype) -> "Network":
        """Copy of the network with parameters cast to `dtype`."""
        clone = Network(self.in_channels, self.in_size, self.specs, seed=self.seed, dtype=dtype)
        for dst, src in zip(clone.params(), self.params()):
            dst.value[...] = src.value.astype(dtype)
            dst.frozen = src.frozen
        return clone

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {p.name: p.value for p in self.params()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.params():
            if p.name not in arrays:
                raise KeyError(f"checkpoint missing parameter {p.name}")
            src = arrays[p.name]
            if src.shape != p.value.shape:
                raise ShapeError(f"{p.name}: checkpoint shape {src.shape} != model {p.value.shape}")
            p.value[...] = src.astype(self.dtype)


# ------------------------------------------------------------ loss and grads


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax; rows sum to 1 within 1e-6."""
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward(network: Network, batch: np.ndarray) -> np.ndarray:
    """Logits for a (N,C,H,W) batch."""
    return network.forward(batch)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    probs = softmax(logits.astype(np.float64, copy=False))
    picked = probs[np.arange(n), labels]
    loss = float(-np.log(np.maximum(picked, 1e-300)).mean())
    dlogits = probs
    dlogits[np.arange(n), labels] -= 1.0
    return loss, (dlogits / n).astype(logits.dtype)


def mse(outputs: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all entries and its gradient."""
    diff = outputs.astype(np.float64) - targets
    loss = float(np.mean(diff**2))
    return loss, (2.0 * diff / diff.size).astype(outputs.dtype)


def loss_and_grad(network: Network, batch: np.ndarray, labels: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy plus fresh per-parameter gradients."""
    if not np.all((labels >= 0) & (labels < network.out_features)):
        raise ValueError(f"labels must lie in [0, {network.out_features})")
    network.zero_grad()
    logits = network.forward(batch)
    loss, dlogits = cross_entropy(logits, labels)
    if not math.isfinite(loss):
        raise NumericalError("non-finite training loss")
    network.backward(dlogits)
    return loss, {p.name: p.grad.copy() for p in network.params()}


# ---------------------------------------------------------------- optimizers


class SGD:
    """SGD with classical momentum: v = mu*v + g; p -= lr*v."""

    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr = lr
        self.momentum = momentum
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, params: Sequence[Parameter]) -> None:
        for p in params:
            if p.frozen:
                continue
            v = self._velocity.get(p.name)
            if v is None:
                v = np.zeros_like(p.value)
                self._velocity[p.name] = v
            v *= self.momentum
            v += p.grad
            p.value -= (self.lr * v).astype(p.value.dtype)


class Adam:
    """Adam with bias correction; defaults beta1=0.9, beta2=0.999, eps=1e-8."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t = 0

    def step(self, params: Sequence[Parameter]) -> None:
        self._t += 1
        b1t = 1.0 - self.beta1**self._t
        b2t = 1.0 - self.beta2**self._t
        for p in params:
            if p.frozen:
                continue
            m = self._m.setdefault(p.name, np.zeros_like(p.value))
            v = self._v.setdefault(p.name, np.zeros_like(p.value))
            m *= self.beta1
            m += (1 - self.beta1) * p.grad
            v *= self.beta2
            v += (1 - self.beta2) * p.grad**2
            update = (m / b1t) / (np.sqrt(v / b2t) + self.eps)
            p.value -= (self.lr * update).astype(p.value.dtype)


def sgd_step(value: np.ndarray, grad: np.ndarray, lr: float, momentum: float = 0.9,
             velocity: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """One functional SGD update; returns (new_value, new_velocity)."""
    v = np.zeros_like(value) if velocity is None else velocity
    v = momentum * v + grad
    return value - lr * v, v


def adam_step(value: np.ndarray, grad: np.ndarray, state: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[np.ndarray, dict]:
    """One functional Adam update; `state` holds m, v, t (may be empty)."""
    m = state.get("m", np.zeros_like(value))
    v = state.get("v", np.zeros_like(value))
    t = state.get("t", 0) + 1
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad**2
    mhat = m / (1 - beta1**t)
    vhat = v / (1 - beta2**t)
    return value - lr * mhat / (np.sqrt(vhat) + eps), {"m": m, "v": v, "t": t}


# ------------------------------------------------------------ gradient check


def gradient_check(network: Network, batch: np.ndarray, labels: np.ndarray,
                   n_samples: int = 10, step: float = 1e-3,
                   rng: Optional[np.random.Generator] = None) -> float:
    """Max relative error between backprop and central finite differences.

    Runs the network in float64 so the differences probe the math, not the
    float32 rounding floor.  Samples `n_samples` random entries per
    parameter tensor.
    """
    rng = rng or np.random.default_rng(0)
    net = network.astype(np.float64)
    x = batch.astype(np.float64)

    net.zero_grad()
    loss0, dlogits = cross_entropy(net.forward(x), labels)
    net.backward(dlogits)

    def loss_at() -> float:
        return cross_entropy(net.forward(x), labels)[0]

    worst = 0.0
    for p in net.params():
        flat = p.value.reshape(-1)
        gflat = p.grad.reshape(-1)
        count = min(n_samples, flat.size)
        picks = rng.choice(flat.size, size=count, replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + step
            hi = loss_at()
            flat[idx] = orig - step
            lo = loss_at()
            flat[idx] = orig
            numeric = (hi - lo) / (2 * step)
            analytic = gflat[idx]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
