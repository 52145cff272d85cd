"""Layer primitives with explicit forward and backward passes.

Everything operates on plain numpy arrays in NCHW layout (batch,
channels, height, width). Training runs in float32; gradient checking
builds float64 layers because central differences are unreliable in
single precision. Parameters live on the layer objects: ``params()``
returns the trainable tensors, ``state()`` the non-trainable ones
(batchnorm running statistics), and ``grads()`` the gradients written
by the most recent ``backward()`` call.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ConfigError, DataError, ShapeError

BN_EPSILON = 1e-5
# Running statistics update: new = BN_MOMENTUM * old + (1 - BN_MOMENTUM) * batch.
BN_MOMENTUM = 0.9


def he_normal(rng, shape, fan_in: int, dtype) -> np.ndarray:
    """Zero-mean init scaled by sqrt(2 / fan_in), the ReLU-friendly choice."""
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def conv_output_size(extent: int, kernel: int, stride: int, pad: int) -> int:
    return (extent + 2 * pad - kernel) // stride + 1


def pool_output_size(extent: int) -> int:
    # 2x2 / stride-2 average pooling; the trailing odd row/column is dropped.
    return extent // 2


def concat_channels(inputs: list[np.ndarray]) -> np.ndarray:
    """Concatenate feature maps along the channel axis, order preserved."""
    if not inputs:
        raise ShapeError("concat_channels needs at least one input")
    first = inputs[0]
    for x in inputs[1:]:
        if x.ndim != first.ndim or x.shape[0] != first.shape[0] or x.shape[2:] != first.shape[2:]:
            raise ShapeError(
                f"concat_channels: incompatible shapes {first.shape} vs {x.shape}"
            )
    if len(inputs) == 1:
        return first
    return np.concatenate(inputs, axis=1)


def split_channels(grad: np.ndarray, channel_sizes: list[int]) -> list[np.ndarray]:
    """Exact inverse of concat_channels for gradients."""
    if sum(channel_sizes) != grad.shape[1]:
        raise ShapeError(
            f"split_channels: sizes {channel_sizes} do not sum to {grad.shape[1]} channels"
        )
    return np.split(grad, np.cumsum(channel_sizes)[:-1], axis=1)


def _im2col(x, kernel, stride, pad):
    n, c, h, w = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = conv_output_size(h, kernel, stride, pad)
    ow = conv_output_size(w, kernel, stride, pad)
    cols = np.empty((n, c, kernel, kernel, oh, ow), dtype=x.dtype)
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, i, j] = x[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * oh * ow, c * kernel * kernel), oh, ow


def _col2im(cols, x_shape, kernel, stride, pad, oh, ow):
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    dx = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, oh, ow, c, kernel, kernel).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kernel):
        for j in range(kernel):
            dx[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += cols[:, :, i, j]
    if pad:
        dx = dx[:, :, pad : hp - pad, pad : wp - pad]
    return dx


class Conv2d:
    """2-D convolution without bias; batchnorm always follows it."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, pad: int = 0, *, rng=None, dtype=np.float32):
        if kernel_size < 1:
            raise ConfigError(f"conv kernel size must be >= 1, got {kernel_size}")
        if stride < 1:
            raise ConfigError(f"conv stride must be >= 1, got {stride}")
        if pad < 0:
            raise ConfigError(f"conv pad must be >= 0, got {pad}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.pad = pad
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        if rng is None:
            self.weight = np.zeros(shape, dtype=dtype)
        else:
            self.weight = he_normal(rng, shape, fan_in, dtype)
        self.grad_weight = None
        self._cache = None

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        return (conv_output_size(h, self.kernel_size, self.stride, self.pad),
                conv_output_size(w, self.kernel_size, self.stride, self.pad))

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"conv2d expects (N, {self.in_channels}, H, W), got {x.shape}"
            )
        n = x.shape[0]
        cols, oh, ow = _im2col(x, self.kernel_size, self.stride, self.pad)
        self._cache = (x.shape, cols, oh, ow)
        out = cols @ self.weight.reshape(self.out_channels, -1).T
        return out.reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x_shape, cols, oh, ow = self._cache
        dflat = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        self.grad_weight = (dflat.T @ cols).reshape(self.weight.shape)
        dcols = dflat @ self.weight.reshape(self.out_channels, -1)
        return _col2im(dcols, x_shape, self.kernel_size, self.stride, self.pad, oh, ow)

    def params(self):
        return {"weight": self.weight}

    def grads(self):
        return {"weight": self.grad_weight}

    def state(self):
        return {}


class BatchNorm:
    """Per-channel batch normalization with running statistics.

    Train mode normalizes with batch statistics over (batch, height,
    width) and updates the running estimates in place; infer mode uses
    the running estimates and has no side effects.
    """

    def __init__(self, num_channels: int, epsilon: float = BN_EPSILON,
                 momentum: float = BN_MOMENTUM, dtype=np.float32):
        self.num_channels = num_channels
        self.epsilon = float(epsilon)
        self.momentum = float(momentum)
        self.gamma = np.ones(num_channels, dtype=dtype)
        self.beta = np.zeros(num_channels, dtype=dtype)
        self.running_mean = np.zeros(num_channels, dtype=dtype)
        self.running_var = np.ones(num_channels, dtype=dtype)
        self.grad_gamma = None
        self.grad_beta = None
        self._cache = None

    def _per_channel(self, arr):
        return arr.reshape(1, self.num_channels, 1, 1)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.num_channels:
            raise ShapeError(
                f"batchnorm expects (N, {self.num_channels}, H, W), got {x.shape}"
            )
        if train:
            samples_per_channel = x.shape[0] * x.shape[2] * x.shape[3]
            if samples_per_channel < 2:
                raise DataError(
                    f"degenerate batch: {samples_per_channel} sample per channel, need >= 2"
                )
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            inv = 1.0 / np.sqrt(var + self.epsilon)
            xhat = (x - self._per_channel(mean)) * self._per_channel(inv)
            self.running_mean[...] = self.momentum * self.running_mean + (1.0 - self.momentum) * mean
            self.running_var[...] = self.momentum * self.running_var + (1.0 - self.momentum) * var
        else:
            inv = 1.0 / np.sqrt(self.running_var + self.epsilon)
            xhat = (x - self._per_channel(self.running_mean)) * self._per_channel(inv)
        self._cache = (train, xhat, inv)
        return self._per_channel(self.gamma) * xhat + self._per_channel(self.beta)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        train, xhat, inv = self._cache
        self.grad_gamma = (dout * xhat).sum(axis=(0, 2, 3))
        self.grad_beta = dout.sum(axis=(0, 2, 3))
        dxhat = dout * self._per_channel(self.gamma)
        if not train:
            return dxhat * self._per_channel(inv)
        return self._per_channel(inv) * (
            dxhat
            - dxhat.mean(axis=(0, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        )

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self):
        return {"gamma": self.grad_gamma, "beta": self.grad_beta}

    def state(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class ReLU:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""

    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout: np.ndarray) -> np.ndarray:
        return dout * self._mask

    def params(self):
        return {}

    def grads(self):
        return {}

    def state(self):
        return {}


class AvgPool2d:
    """2x2 average pooling with stride 2; trailing odd row/column dropped."""

    def __init__(self):
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        n, c, h, w = x.shape
        if h < 2 or w < 2:
            raise ShapeError(f"avgpool2d needs spatial extents >= 2, got {h}x{w}")
        oh, ow = pool_output_size(h), pool_output_size(w)
        self._cache = (x.shape, oh, ow)
        windows = x[:, :, : 2 * oh, : 2 * ow].reshape(n, c, oh, 2, ow, 2)
        return windows.mean(axis=(3, 5))

    def backward(self, dout: np.ndarray) -> np.ndarray:
        (n, c, h, w), oh, ow = self._cache
        dx = np.zeros((n, c, h, w), dtype=dout.dtype)
        spread = np.broadcast_to((dout * 0.25)[:, :, :, None, :, None], (n, c, oh, 2, ow, 2))
        dx[:, :, : 2 * oh, : 2 * ow] = spread.reshape(n, c, 2 * oh, 2 * ow)
        return dx

    def params(self):
        return {}

    def grads(self):
        return {}

    def state(self):
        return {}


class GlobalAvgPool:
    """Mean over all spatial positions, one value per channel."""

    def __init__(self):
        self._shape = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
            raise ShapeError(f"global_avgpool expects (N, C, H, W), got {x.shape}")
        self._shape = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        n, c, h, w = self._shape
        return np.broadcast_to(dout / (h * w), self._shape).copy()

    def params(self):
        return {}

    def grads(self):
        return {}

    def state(self):
        return {}


class Linear:
    """Affine map y = x @ W.T + b on flattened features."""

    def __init__(self, in_features: int, out_features: int, *, rng=None, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        if rng is None:
            self.weight = np.zeros((out_features, in_features), dtype=dtype)
        else:
            self.weight = he_normal(rng, (out_features, in_features), in_features, dtype)
        self.bias = np.zeros(out_features, dtype=dtype)
        self.grad_weight = None
        self.grad_bias = None
        self._cache = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(f"linear expects (N, {self.in_features}), got {x.shape}")
        self._cache = x
        return x @ self.weight.T + self.bias

    def backward(self, dout: np.ndarray) -> np.ndarray:
        x = self._cache
        self.grad_weight = dout.T @ x
        self.grad_bias = dout.sum(axis=0)
        return dout @ self.weight

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def grads(self):
        return {"weight": self.grad_weight, "bias": self.grad_bias}

    def state(self):
        return {}


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits.

    Stabilized by max-subtraction; the gradient is (softmax - onehot)
    divided by the batch size.
    """
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be (N, classes), got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels must be ({logits.shape[0]},), got {labels.shape}")
    n, num_classes = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"label out of range [0, {num_classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad
