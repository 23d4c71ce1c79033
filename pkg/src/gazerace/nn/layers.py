"""Layer implementations with explicit forward caches and backward passes (NCHW layout)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from gazerace.nn.core import Module, Param, get_dtype


def he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def _cast(x):
    return np.asarray(x, dtype=get_dtype())


class Linear(Module):
    """y = x W^T + b applied over the last axis (any leading shape)."""

    def __init__(self, in_features, out_features, rng, bias=True):
        self.in_features, self.out_features = in_features, out_features
        self.weight = Param(he_normal(rng, (out_features, in_features), in_features))
        self.bias = Param(np.zeros(out_features)) if bias else None

    def forward(self, x):
        x = _cast(x)
        if x.shape[-1] != self.in_features:
            raise ValueError(f"Linear expects last axis {self.in_features}, got shape {x.shape}")
        self._x = x
        y = x @ self.weight.data.T
        if self.bias is not None:
            y = y + self.bias.data
        return y

    def backward(self, dy):
        x2 = self._x.reshape(-1, self.in_features)
        d2 = dy.reshape(-1, self.out_features)
        self.weight.grad += d2.T @ x2
        if self.bias is not None:
            self.bias.grad += d2.sum(axis=0)
        return (d2 @ self.weight.data).reshape(self._x.shape)


class Conv2d(Module):
    """2-D convolution (cross-correlation) via per-sample im2col in (C·k·k, Ho·Wo) layout."""

    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=None, bias=True):
        self.in_ch, self.out_ch, self.k, self.stride = in_ch, out_ch, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = in_ch * kernel * kernel
        self.weight = Param(he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in))
        self.bias = Param(np.zeros(out_ch)) if bias else None

    def out_shape(self, h, w):
        p, k, s = self.padding, self.k, self.stride
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        x = _cast(x)
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ValueError(f"Conv2d expects (N,{self.in_ch},H,W), got {x.shape}")
        n, _, h, w = x.shape
        p, k, s = self.padding, self.k, self.stride
        ho, wo = self.out_shape(h, w)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        if k == 1:
            cols = np.ascontiguousarray(xp[:, :, ::s, ::s][:, :, :ho, :wo]).reshape(n, self.in_ch, ho * wo)
        else:
            win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
            cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, -1, ho * wo)
        y = np.matmul(self.weight.data.reshape(self.out_ch, -1), cols)
        if self.bias is not None:
            y += self.bias.data[:, None]
        self._cache = (cols, xp.shape, x.shape, ho, wo)
        return y.reshape(n, self.out_ch, ho, wo)

    def backward(self, dy):
        cols, xp_shape, x_shape, ho, wo = self._cache
        n = dy.shape[0]
        p, k, s = self.padding, self.k, self.stride
        d3 = np.ascontiguousarray(dy).reshape(n, self.out_ch, ho * wo)
        self.weight.grad += np.einsum("nol,ncl->oc", d3, cols, optimize=True).reshape(self.weight.shape)
        if self.bias is not None:
            self.bias.grad += d3.sum(axis=(0, 2))
        dcols = np.matmul(self.weight.data.reshape(self.out_ch, -1).T, d3).reshape(n, self.in_ch, k, k, ho, wo)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += dcols[:, :, i, j]
        if p:
            dxp = dxp[:, :, p : p + x_shape[2], p : p + x_shape[3]]
        return dxp


class Conv1d(Module):
    """1-D convolution over (N, C, L), no padding by default (temporal convolution)."""

    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=0, bias=True):
        self.in_ch, self.out_ch, self.k, self.stride, self.padding = in_ch, out_ch, kernel, stride, padding
        self.weight = Param(he_normal(rng, (out_ch, in_ch, kernel), in_ch * kernel))
        self.bias = Param(np.zeros(out_ch)) if bias else None

    def forward(self, x):
        x = _cast(x)
        if x.ndim != 3 or x.shape[1] != self.in_ch:
            raise ValueError(f"Conv1d expects (N,{self.in_ch},L), got {x.shape}")
        n, _, length = x.shape
        p, k, s = self.padding, self.k, self.stride
        lo = (length + 2 * p - k) // s + 1
        if lo < 1:
            raise ValueError(f"Conv1d input length {length} shorter than kernel {k}")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p))) if p else x
        win = sliding_window_view(xp, k, axis=2)[:, :, : s * (lo - 1) + 1 : s]  # (N, C, Lo, k)
        cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(n * lo, -1)
        y = cols @ self.weight.data.reshape(self.out_ch, -1).T
        if self.bias is not None:
            y += self.bias.data
        self._cache = (cols, xp.shape, length, lo)
        return np.ascontiguousarray(y.reshape(n, lo, self.out_ch).transpose(0, 2, 1))

    def backward(self, dy):
        cols, xp_shape, length, lo = self._cache
        n = dy.shape[0]
        p, k, s = self.padding, self.k, self.stride
        d2 = dy.transpose(0, 2, 1).reshape(-1, self.out_ch)
        self.weight.grad += (d2.T @ cols).reshape(self.weight.shape)
        if self.bias is not None:
            self.bias.grad += d2.sum(axis=0)
        dcols = (d2 @ self.weight.data.reshape(self.out_ch, -1)).reshape(n, lo, self.in_ch, k)
        dxp = np.zeros(xp_shape, dtype=dy.dtype)
        for i in range(k):
            dxp[:, :, i : i + s * (lo - 1) + 1 : s] += dcols[..., i].transpose(0, 2, 1)
        return dxp[:, :, p : p + length] if p else dxp


class BatchNorm2d(Module):
    """Per-channel normalization; batch statistics in training, running statistics in eval."""

    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Param(np.ones(channels))
        self.beta = Param(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=get_dtype())
        self.running_var = np.ones(channels, dtype=get_dtype())

    def forward(self, x):
        x = _cast(x)
        shape = (1, -1, 1, 1)
        if self.training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * m / max(m - 1, 1)
            self.running_mean = ((1 - self.momentum) * self.running_mean + self.momentum * mean).astype(x.dtype)
            self.running_var = ((1 - self.momentum) * self.running_var + self.momentum * unbiased).astype(x.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
        self._cache = (xhat, inv, self.training)
        return self.gamma.data.reshape(shape) * xhat + self.beta.data.reshape(shape)

    def backward(self, dy):
        xhat, inv, training = self._cache
        shape = (1, -1, 1, 1)
        self.gamma.grad += (dy * xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dy.sum(axis=(0, 2, 3))
        dxhat = dy * self.gamma.data.reshape(shape)
        if not training:
            return dxhat * inv.reshape(shape)
        m = dy.shape[0] * dy.shape[2] * dy.shape[3]
        mean_d = dxhat.sum(axis=(0, 2, 3)).reshape(shape) / m
        mean_dx = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape) / m
        return (dxhat - mean_d - xhat * mean_dx) * inv.reshape(shape)


class ReLU(Module):
    def forward(self, x):
        x = _cast(x)
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class MaxPool2d(Module):
    """Non-overlapping k×k max pooling; odd trailing rows/columns are dropped."""

    def __init__(self, kernel=2):
        self.k = kernel

    def forward(self, x):
        x = _cast(x)
        n, c, h, w = x.shape
        k = self.k
        ho, wo = h // k, w // k
        xc = x[:, :, : ho * k, : wo * k]
        blocks = xc.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
        idx = blocks.argmax(axis=-1)  # first maximum wins ties
        self._cache = (x.shape, idx)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        shape, idx = self._cache
        n, c, h, w = shape
        k = self.k
        ho, wo = dy.shape[2], dy.shape[3]
        blocks = np.zeros((n, c, ho, wo, k * k), dtype=dy.dtype)
        np.put_along_axis(blocks, idx[..., None], dy[..., None], axis=-1)
        dx = np.zeros(shape, dtype=dy.dtype)
        dx[:, :, : ho * k, : wo * k] = blocks.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        return dx


class Upsample(Module):
    """Nearest-neighbour upsampling by an integer factor."""

    def __init__(self, factor=2):
        self.f = factor

    def forward(self, x):
        x = _cast(x)
        return x.repeat(self.f, axis=2).repeat(self.f, axis=3)

    def backward(self, dy):
        n, c, h, w = dy.shape
        f = self.f
        return dy.reshape(n, c, h // f, f, w // f, f).sum(axis=(3, 5))


class Crop2d(Module):
    """Keep the top-left (height, width) window (undoes upsampling overshoot)."""

    def __init__(self, height, width):
        self.h, self.w = height, width

    def forward(self, x):
        self._shape = x.shape
        return x[:, :, : self.h, : self.w]

    def backward(self, dy):
        dx = np.zeros(self._shape, dtype=dy.dtype)
        dx[:, :, : self.h, : self.w] = dy
        return dx


def log_softmax_flat(z):
    """Log-softmax over all axes but the first."""
    flat = z.reshape(z.shape[0], -1)
    m = flat.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(flat - m).sum(axis=1, keepdims=True))
    return (flat - lse).reshape(z.shape)


class SpatialLogSoftmax(Module):
    """Log-probabilities over every (channel, row, column) cell of each sample."""

    def forward(self, x):
        x = _cast(x)
        y = log_softmax_flat(x)
        self._p = np.exp(y)
        return y

    def backward(self, dy):
        n = dy.shape[0]
        s = dy.reshape(n, -1).sum(axis=1).reshape((n,) + (1,) * (dy.ndim - 1))
        return dy - self._p * s


class SpatialSoftmax(Module):
    """Probabilities over every (channel, row, column) cell; sums to one per sample."""

    def forward(self, x):
        x = _cast(x)
        self._p = np.exp(log_softmax_flat(x))
        return self._p

    def backward(self, dy):
        n = dy.shape[0]
        p = self._p
        s = (dy * p).reshape(n, -1).sum(axis=1).reshape((n,) + (1,) * (dy.ndim - 1))
        return p * (dy - s)


class Flatten(Module):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._shape)


class MeanAxis(Module):
    def __init__(self, axis):
        self.axis = axis

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=self.axis)

    def backward(self, dy):
        d = np.expand_dims(dy, self.axis)
        return np.broadcast_to(d, self._shape) / self._shape[self.axis]


class MaxAxis(Module):
    """Max over one axis (symmetric pooling for point sets); ties route to the first maximum."""

    def __init__(self, axis):
        self.axis = axis

    def forward(self, x):
        self._shape = x.shape
        self._idx = np.expand_dims(x.argmax(axis=self.axis), self.axis)
        return np.take_along_axis(x, self._idx, axis=self.axis).squeeze(self.axis)

    def backward(self, dy):
        dx = np.zeros(self._shape, dtype=dy.dtype)
        np.put_along_axis(dx, self._idx, np.expand_dims(dy, self.axis), axis=self.axis)
        return dx


class ResidualBlock(Module):
    """Two 3×3 conv + batchnorm layers with an identity or 1×1 projection shortcut."""

    def __init__(self, in_ch, out_ch, stride, rng):
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, stride=stride, bias=False)
        self.bn1 = BatchNorm2d(out_ch)
        self.relu1 = ReLU()
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, bias=False)
        self.bn2 = BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.proj = Conv2d(in_ch, out_ch, 1, rng, stride=stride, padding=0, bias=False)
            self.proj_bn = BatchNorm2d(out_ch)
        else:
            self.proj = None
        self.relu2 = ReLU()

    def forward(self, x):
        h = self.relu1(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        sc = self.proj_bn(self.proj(x)) if self.proj is not None else _cast(x)
        return self.relu2(h + sc)

    def backward(self, dy):
        d = self.relu2.backward(dy)
        dh = self.conv1.backward(self.bn1.backward(self.relu1.backward(self.conv2.backward(self.bn2.backward(d)))))
        dsc = self.proj.backward(self.proj_bn.backward(d)) if self.proj is not None else d
        return dh + dsc
