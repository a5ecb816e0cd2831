"""Minimal trainable layer set with explicit forward/backward passes.

All image tensors are channels-last: (batch, height, width, channels).
Each layer caches whatever its backward pass needs on forward; calling
backward before forward is a usage error. Parameters live in per-layer
dicts and are updated in place by the optimizer, so references held by
checkpoints stay valid.
"""
from __future__ import annotations

import math

import numpy as np


class Layer:
    """Base layer: parameter/grad bookkeeping plus freeze support."""

    def __init__(self, name):
        self.name = name
        self.params = {}
        self.grads = {}
        self.frozen = False

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, d_out):
        raise NotImplementedError

    def param_items(self, prefix=""):
        return [(f"{prefix}{self.name}/{k}", v) for k, v in self.params.items()]

    def l2_penalty(self):
        return 0.0


def _glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class Dense(Layer):
    def __init__(self, in_dim, out_dim, rng, l2=0.0, name="dense", dtype=np.float32):
        super().__init__(name)
        self.l2 = float(l2)
        self.params["W"] = _glorot_uniform(rng, (in_dim, out_dim), in_dim, out_dim, dtype)
        self.params["b"] = np.zeros(out_dim, dtype=dtype)

    def forward(self, x, training=False):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, d_out):
        W = self.params["W"]
        self.grads["W"] = self._x.T @ d_out
        if self.l2 > 0.0:
            self.grads["W"] = self.grads["W"] + 2.0 * self.l2 * W
        self.grads["b"] = d_out.sum(axis=0)
        return d_out @ W.T

    def l2_penalty(self):
        if self.l2 == 0.0:
            return 0.0
        W = self.params["W"]
        return self.l2 * float(np.sum(W.astype(np.float64) ** 2))


def _pad_hw(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))


def _window_view(x, kh, kw, stride):
    """Sliding (kh, kw) windows of a padded NHWC tensor, stride applied."""
    B, H, W, C = x.shape
    oh = (H - kh) // stride + 1
    ow = (W - kw) // stride + 1
    sb, sh, sw, sc = x.strides
    shape = (B, oh, ow, kh, kw, C)
    strides = (sb, sh * stride, sw * stride, sh, sw, sc)
    return np.lib.stride_tricks.as_strided(x, shape=shape, strides=strides)


def _scatter_windows(d_windows, padded_shape, kh, kw, stride, dtype):
    """Inverse of _window_view: accumulate window grads into input positions."""
    B, Hp, Wp, C = padded_shape
    _, oh, ow = d_windows.shape[:3]
    dx = np.zeros(padded_shape, dtype=dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + stride * oh:stride, j:j + stride * ow:stride, :] += d_windows[:, :, :, i, j, :]
    return dx


class Conv2d(Layer):
    """3x3-style convolution via im2col, symmetric zero padding."""

    def __init__(self, in_channels, out_channels, rng, kernel=3, stride=1, pad=None,
                 name="conv", dtype=np.float32):
        super().__init__(name)
        self.kernel = kernel
        self.stride = stride
        self.pad = (kernel - 1) // 2 if pad is None else pad
        fan_in = kernel * kernel * in_channels
        self.params["W"] = _he_normal(rng, (kernel, kernel, in_channels, out_channels), fan_in, dtype)
        self.params["b"] = np.zeros(out_channels, dtype=dtype)

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[3] != self.params["W"].shape[2]:
            raise ValueError(f"{self.name}: expected NHWC input with "
                             f"{self.params['W'].shape[2]} channels, got {x.shape}")
        k, s = self.kernel, self.stride
        xp = _pad_hw(x, self.pad)
        windows = _window_view(xp, k, k, s)
        B, oh, ow = windows.shape[:3]
        cols = windows.reshape(B * oh * ow, -1)
        W = self.params["W"]
        y = cols @ W.reshape(-1, W.shape[3]) + self.params["b"]
        self._cols = cols
        self._padded_shape = xp.shape
        self._out_hw = (oh, ow)
        return y.reshape(B, oh, ow, W.shape[3])

    def backward(self, d_out):
        k, s = self.kernel, self.stride
        W = self.params["W"]
        B, oh, ow, cout = d_out.shape
        dy = d_out.reshape(B * oh * ow, cout)
        self.grads["W"] = (self._cols.T @ dy).reshape(W.shape)
        self.grads["b"] = dy.sum(axis=0)
        d_windows = (dy @ W.reshape(-1, cout).T).reshape(B, oh, ow, k, k, W.shape[2])
        dxp = _scatter_windows(d_windows, self._padded_shape, k, k, s, d_out.dtype)
        p = self.pad
        return dxp[:, p:dxp.shape[1] - p, p:dxp.shape[2] - p, :] if p else dxp


class DepthwiseConv2d(Layer):
    """Per-channel convolution (groups == channels)."""

    def __init__(self, channels, rng, kernel=3, stride=1, name="dwconv", dtype=np.float32):
        super().__init__(name)
        self.kernel = kernel
        self.stride = stride
        self.pad = (kernel - 1) // 2
        fan_in = kernel * kernel
        self.params["W"] = _he_normal(rng, (kernel, kernel, channels), fan_in, dtype)
        self.params["b"] = np.zeros(channels, dtype=dtype)

    def forward(self, x, training=False):
        if x.ndim != 4 or x.shape[3] != self.params["W"].shape[2]:
            raise ValueError(f"{self.name}: channel mismatch, got {x.shape}")
        k, s = self.kernel, self.stride
        xp = _pad_hw(x, self.pad)
        windows = _window_view(xp, k, k, s)
        self._windows = windows
        self._padded_shape = xp.shape
        return np.einsum("bhwijc,ijc->bhwc", windows, self.params["W"]) + self.params["b"]

    def backward(self, d_out):
        k, s = self.kernel, self.stride
        self.grads["W"] = np.einsum("bhwijc,bhwc->ijc", self._windows, d_out)
        self.grads["b"] = d_out.sum(axis=(0, 1, 2))
        d_windows = d_out[:, :, :, None, None, :] * self.params["W"][None, None, None, :, :, :]
        dxp = _scatter_windows(d_windows, self._padded_shape, k, k, s, d_out.dtype)
        p = self.pad
        return dxp[:, p:dxp.shape[1] - p, p:dxp.shape[2] - p, :] if p else dxp


class BatchNorm(Layer):
    """Channels-last batch normalization for (B, C) or (B, H, W, C) inputs."""

    def __init__(self, channels, momentum=0.99, eps=1e-3, name="bn", dtype=np.float32):
        super().__init__(name)
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels, dtype=dtype)
        self.params["beta"] = np.zeros(channels, dtype=dtype)
        # running stats are buffers, not trainable parameters
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x, training=False):
        reduce_axes = tuple(range(x.ndim - 1))
        if training and not self.frozen:
            mean = x.mean(axis=reduce_axes)
            var = x.var(axis=reduce_axes)
            self.running_mean = (self.momentum * self.running_mean
                                 + (1.0 - self.momentum) * mean).astype(self.running_mean.dtype)
            self.running_var = (self.momentum * self.running_var
                                + (1.0 - self.momentum) * var).astype(self.running_var.dtype)
            self._batch_stats = True
        else:
            mean = self.running_mean
            var = self.running_var
            self._batch_stats = False
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean) * inv_std
        self._x_hat = x_hat
        self._inv_std = inv_std
        return self.params["gamma"] * x_hat + self.params["beta"]

    def backward(self, d_out):
        reduce_axes = tuple(range(d_out.ndim - 1))
        x_hat = self._x_hat
        self.grads["gamma"] = (d_out * x_hat).sum(axis=reduce_axes)
        self.grads["beta"] = d_out.sum(axis=reduce_axes)
        d_xhat = d_out * self.params["gamma"]
        if not self._batch_stats:
            return d_xhat * self._inv_std
        n = d_out.size // d_out.shape[-1]
        term = (n * d_xhat
                - d_xhat.sum(axis=reduce_axes)
                - x_hat * (d_xhat * x_hat).sum(axis=reduce_axes))
        return term * self._inv_std / n

    def buffer_items(self, prefix=""):
        return [(f"{prefix}{self.name}/running_mean", self.running_mean),
                (f"{prefix}{self.name}/running_var", self.running_var)]


class ReLU(Layer):
    def __init__(self, name="relu"):
        super().__init__(name)

    def forward(self, x, training=False):
        self._mask = x > 0
        return np.where(self._mask, x, 0.0).astype(x.dtype)

    def backward(self, d_out):
        return np.where(self._mask, d_out, 0.0).astype(d_out.dtype)


class ReLU6(Layer):
    def __init__(self, name="relu6"):
        super().__init__(name)

    def forward(self, x, training=False):
        self._mask = (x > 0) & (x < 6.0)
        return np.clip(x, 0.0, 6.0)

    def backward(self, d_out):
        return np.where(self._mask, d_out, 0.0).astype(d_out.dtype)


class Dropout(Layer):
    """Inverted dropout; identity outside training mode."""

    def __init__(self, rate, rng, name="dropout"):
        super().__init__(name)
        if not 0.0 <= rate < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.rate = rate
        self.rng = rng

    def forward(self, x, training=False):
        if not training or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        self._mask = (self.rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, d_out):
        if self._mask is None:
            return d_out
        return d_out * self._mask


class GlobalAvgPool(Layer):
    def __init__(self, name="gap"):
        super().__init__(name)

    def forward(self, x, training=False):
        if x.ndim != 4:
            raise ValueError(f"{self.name}: expected NHWC input, got shape {x.shape}")
        self._hw = x.shape[1] * x.shape[2]
        self._in_shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, d_out):
        B, H, W, C = self._in_shape
        return np.broadcast_to(d_out[:, None, None, :] / self._hw, self._in_shape).astype(d_out.dtype)


def softmax(logits):
    """Row-wise softmax with max-subtraction; accepts (C,) or (B, C)."""
    z = np.asarray(logits)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax received non-finite logits")
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, onehot):
    """Mean categorical cross-entropy and its gradient w.r.t. the logits.

    Returns (loss, probs, d_logits) with d_logits already divided by the
    batch size.
    """
    if logits.shape != onehot.shape:
        raise ValueError(f"logits {logits.shape} vs labels {onehot.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = float(-(onehot * log_probs).sum() / n)
    probs = np.exp(log_probs)
    d_logits = (probs - onehot) / n
    return loss, probs, d_logits.astype(logits.dtype)


class Adam:
    """Adam with bias correction; hyperparameters fixed at construction."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-7):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {}
        self._v = {}

    def step(self, named_params, named_grads, lr):
        """Update parameters in place. Missing grads are skipped."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for name, param in named_params:
            g = named_grads.get(name)
            if g is None:
                continue
            m = self._m.get(name)
            if m is None:
                m = self._m[name] = np.zeros_like(param)
            v = self._v.get(name)
            if v is None:
                v = self._v[name] = np.zeros_like(param)
            m += (1.0 - b1) * (g - m)
            v += (1.0 - b2) * (g * g - v)
            param -= (lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)).astype(param.dtype)
