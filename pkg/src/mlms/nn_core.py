"""From-scratch neural-network kernel on numpy arrays.

Forward and backward passes for 1-D convolution, max-pooling, batch
normalization, dense layers, dropout and the standard activations; fused
sigmoid/BCE and softmax/CE losses; SGD with Nesterov momentum; and a central
finite-difference gradient checker.

Arrays are the tensor type throughout. Convolutional data is time-major
(batch, time, channels); dense data is (batch, features). Functions also
accept a single unbatched sample and return the same rank.

Modes: "train" (batch stats, dropout on, running stats updated), "eval"
(running stats, dropout off, fully deterministic), "frozen" (batch stats but
no running-stat update, dropout off — the deterministic mode the gradient
checker needs).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32

MODES = ("train", "eval", "frozen")


@dataclass
class Parameter:
    """A trainable array with its gradient and momentum buffers."""

    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(init=False)
    velocity: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.velocity = np.zeros_like(self.value)


def _batched(x):
    """Promote (T, C) or (D,) input to batched form; return (array, was_2d)."""
    if x.ndim == 2:
        return x, False
    return x, True


# ---------------------------------------------------------------------------
# 1-D convolution (stride 1, same-length zero padding)
# ---------------------------------------------------------------------------

def _same_pad(filter_len):
    left = (filter_len - 1) // 2
    return left, filter_len - 1 - left


def _im2col(x, filter_len):
    """(N, T, C) -> (N, T, filter_len * C) columns over the padded input."""
    left, right = _same_pad(filter_len)
    xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, filter_len, axis=1)
    # window axis comes last; reorder so columns flatten as (tap, channel)
    return np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(
        x.shape[0], x.shape[1], filter_len * x.shape[2]
    )


def conv1d_forward(x, weights, bias):
    """Same-length 1-D convolution. weights: (k, c_in, c_out), bias: (c_out,)."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    k, c_in, c_out = weights.shape
    if x.shape[2] != c_in:
        raise ValueError(f"channel mismatch: input has {x.shape[2]}, weights expect {c_in}")
    cols = _im2col(x, k)
    y = cols @ weights.reshape(k * c_in, c_out) + bias
    return y[0] if squeeze else y


def conv1d_backward(grad_out, x, weights):
    """Gradients of conv1d_forward w.r.t. (input, weights, bias)."""
    squeeze = x.ndim == 2
    if squeeze:
        x, grad_out = x[None], grad_out[None]
    k, c_in, c_out = weights.shape
    n, t = x.shape[0], x.shape[1]
    cols = _im2col(x, k)
    g2 = grad_out.reshape(n * t, c_out)
    grad_b = g2.sum(axis=0)
    grad_w = (cols.reshape(n * t, k * c_in).T @ g2).reshape(k, c_in, c_out)
    gcols = (g2 @ weights.reshape(k * c_in, c_out).T).reshape(n, t, k, c_in)
    left, _right = _same_pad(k)
    gxp = np.zeros((n, t + k - 1, c_in), dtype=grad_out.dtype)
    for d in range(k):
        gxp[:, d : d + t, :] += gcols[:, :, d, :]
    grad_x = gxp[:, left : left + t, :]
    if squeeze:
        return grad_x[0], grad_w, grad_b
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Max pooling (stride = pool length, remainder frames dropped)
# ---------------------------------------------------------------------------

def maxpool1d_forward(x, pool):
    """Returns (pooled, argmax). argmax holds in-window offsets (first max wins)."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    n, t, c = x.shape
    if t < pool:
        raise ValueError(f"input length {t} shorter than pool length {pool}")
    t_out = t // pool
    xv = x[:, : t_out * pool, :].reshape(n, t_out, pool, c)
    arg = xv.argmax(axis=2)
    y = np.take_along_axis(xv, arg[:, :, None, :], axis=2).squeeze(2)
    if squeeze:
        return y[0], arg[0]
    return y, arg


def maxpool1d_backward(grad_out, argmax, input_length, pool):
    """Route each output gradient to its (first-max) input position."""
    squeeze = grad_out.ndim == 2
    if squeeze:
        grad_out, argmax = grad_out[None], argmax[None]
    n, t_out, c = grad_out.shape
    if argmax.shape != grad_out.shape:
        raise ValueError("argmax cache does not match gradient shape")
    gxv = np.zeros((n, t_out, pool, c), dtype=grad_out.dtype)
    np.put_along_axis(gxv, argmax[:, :, None, :], grad_out[:, :, None, :], axis=2)
    gx = np.zeros((n, input_length, c), dtype=grad_out.dtype)
    gx[:, : t_out * pool, :] = gxv.reshape(n, t_out * pool, c)
    return gx[0] if squeeze else gx


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def sigmoid(x):
    """Branch-stable logistic function; outputs lie strictly inside (0, 1)."""
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(grad_out, y):
    return grad_out * y * (1.0 - y)


def softmax(x):
    """Row-stabilized softmax over the last axis."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(grad_out, y):
    dot = (grad_out * y).sum(axis=-1, keepdims=True)
    return y * (grad_out - dot)


# ---------------------------------------------------------------------------
# Dense
# ---------------------------------------------------------------------------

def dense_forward(x, weights, bias):
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    if x.shape[1] != weights.shape[0]:
        raise ValueError(f"shape mismatch: input {x.shape[1]} vs weights {weights.shape[0]}")
    y = x @ weights + bias
    return y[0] if squeeze else y


def dense_backward(grad_out, x, weights):
    squeeze = x.ndim == 1
    if squeeze:
        x, grad_out = x[None], grad_out[None]
    grad_x = grad_out @ weights.T
    grad_w = x.T @ grad_out
    grad_b = grad_out.sum(axis=0)
    if squeeze:
        return grad_x[0], grad_w, grad_b
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Dropout (inverted: scaled at train time, identity at eval)
# ---------------------------------------------------------------------------

def dropout_forward(x, rate, mode, rng):
    """Returns (output, scale) where scale multiplies gradients in backward."""
    if rate < 0 or rate >= 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode != "train" or rate == 0.0:
        return x, None
    keep = rng.random(x.shape) >= rate
    scale = keep.astype(x.dtype) / (1.0 - rate)
    return x * scale, scale


def dropout_backward(grad_out, scale):
    if scale is None:
        return grad_out
    return grad_out * scale


# ---------------------------------------------------------------------------
# Losses (fused with the output nonlinearity for stability)
# ---------------------------------------------------------------------------

def bce_loss(logits, targets):
    """Mean binary cross entropy with the sigmoid fused in.

    Returns (loss, grad wrt logits). The gradient is (sigmoid(z) - y) / (N*L).
    """
    targets = np.asarray(targets)
    if not np.isin(targets, (0, 1)).all():
        raise ValueError("targets must be 0/1")
    z = logits
    per = np.maximum(z, 0) - z * targets + np.log1p(np.exp(-np.abs(z)))
    grad = (sigmoid(z) - targets) / z.size
    return float(per.mean()), grad


def cross_entropy_loss(logits, targets):
    """Mean negative log softmax probability of the target class.

    logits: (N, K); targets: (N,) int class indices. Returns (loss, grad).
    """
    targets = np.asarray(targets)
    n, k = logits.shape
    if targets.min() < 0 or targets.max() >= k:
        raise ValueError(f"class targets must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = float(-logp[rows, targets].mean())
    grad = np.exp(logp)
    grad[rows, targets] -= 1.0
    grad /= n
    return loss, grad


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def sgd_nesterov_step(params, lr, momentum=0.9):
    """Nesterov update: v <- mu*v - lr*g; value <- value + mu*v - lr*g.

    Gradients are zeroed after the step.
    """
    for p in params:
        v = p.velocity
        g = p.grad
        v *= momentum
        v -= lr * g
        p.value += momentum * v - lr * g
        g.fill(0)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    def __init__(self, name):
        self.name = name
        self.kink_margin = None  # populated when margin tracking is on

    def forward(self, x, mode="train", track_margins=False):
        raise NotImplementedError

    def backward(self, grad_out):
        raise NotImplementedError

    def params(self):
        return []

    def state_arrays(self):
        """Non-trainable persisted arrays as (suffix, array) pairs."""
        return []


def he_uniform(shape, fan_in, rng, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv1D(Layer):
    def __init__(self, name, filter_len, in_channels, out_channels, rng, dtype=DEFAULT_DTYPE):
        super().__init__(name)
        self.filter_len = filter_len
        self.weight = Parameter(
            he_uniform((filter_len, in_channels, out_channels), filter_len * in_channels, rng, dtype),
            name=f"{name}.weight",
        )
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), name=f"{name}.bias")
        self._x = None

    def forward(self, x, mode="train", track_margins=False):
        self._x = x
        return conv1d_forward(x, self.weight.value, self.bias.value)

    def backward(self, grad_out):
        gx, gw, gb = conv1d_backward(grad_out, self._x, self.weight.value)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx

    def params(self):
        return [self.weight, self.bias]


class Dense(Layer):
    def __init__(self, name, in_features, out_features, rng, dtype=DEFAULT_DTYPE):
        super().__init__(name)
        self.weight = Parameter(
            he_uniform((in_features, out_features), in_features, rng, dtype),
            name=f"{name}.weight",
        )
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), name=f"{name}.bias")
        self._x = None

    def forward(self, x, mode="train", track_margins=False):
        self._x = x
        return dense_forward(x, self.weight.value, self.bias.value)

    def backward(self, grad_out):
        gx, gw, gb = dense_backward(grad_out, self._x, self.weight.value)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx

    def params(self):
        return [self.weight, self.bias]


class MaxPool1D(Layer):
    def __init__(self, name, pool):
        super().__init__(name)
        self.pool = pool
        self._arg = None
        self._t_in = None

    def forward(self, x, mode="train", track_margins=False):
        y, arg = maxpool1d_forward(x, self.pool)
        self._arg, self._t_in = arg, x.shape[-2]
        if track_margins:
            self.kink_margin = self._margin(x)
        return y

    def _margin(self, x):
        # smallest gap between the window max and runner-up; ties break gradients
        if self.pool < 2:
            return np.inf
        n, t, c = (x.shape if x.ndim == 3 else (1,) + x.shape)
        t_out = t // self.pool
        xv = x.reshape(n, t, c)[:, : t_out * self.pool, :].reshape(n, t_out, self.pool, c)
        top2 = np.partition(xv, self.pool - 2, axis=2)[:, :, -2:, :]
        return float((top2[:, :, 1, :] - top2[:, :, 0, :]).min())

    def backward(self, grad_out):
        return maxpool1d_backward(grad_out, self._arg, self._t_in, self.pool)


class ReLU(Layer):
    def __init__(self, name):
        super().__init__(name)
        self._x = None

    def forward(self, x, mode="train", track_margins=False):
        self._x = x
        if track_margins:
            self.kink_margin = float(np.abs(x).min())
        return relu_forward(x)

    def backward(self, grad_out):
        return relu_backward(grad_out, self._x)


class Flatten(Layer):
    def __init__(self, name):
        super().__init__(name)
        self._shape = None

    def forward(self, x, mode="train", track_margins=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._shape)


class Dropout(Layer):
    def __init__(self, name, rate, rng):
        super().__init__(name)
        self.rate = rate
        self.rng = rng
        self._scale = None

    def forward(self, x, mode="train", track_margins=False):
        y, self._scale = dropout_forward(x, self.rate, mode, self.rng)
        return y

    def backward(self, grad_out):
        return dropout_backward(grad_out, self._scale)


class BatchNorm(Layer):
    """Per-channel normalization over all non-channel axes.

    Train mode uses biased batch statistics and updates the running stats by
    exponential moving average; eval mode applies the running stats and
    requires at least one prior update; frozen mode uses batch statistics
    without touching the running stats.
    """

    def __init__(self, name, channels, momentum=0.99, epsilon=1e-5, dtype=DEFAULT_DTYPE):
        super().__init__(name)
        self.gamma = Parameter(np.ones(channels, dtype=dtype), name=f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), name=f"{name}.beta")
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.epsilon = epsilon
        self.initialized = False
        self._cache = None

    def forward(self, x, mode="train", track_margins=False):
        c = x.shape[-1]
        xm = x.reshape(-1, c)
        if mode == "eval":
            if not self.initialized:
                raise RuntimeError(
                    f"{self.name}: eval-mode batch norm before any training update"
                )
            inv_std = 1.0 / np.sqrt(self.running_var + self.epsilon)
            xhat = (xm - self.running_mean) * inv_std
            self._cache = ("eval", inv_std)
        else:
            if xm.shape[0] < 2:
                raise ValueError(
                    f"{self.name}: batch statistics need >= 2 samples, got {xm.shape[0]}"
                )
            mu = xm.mean(axis=0)
            var = xm.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.epsilon)
            xhat = (xm - mu) * inv_std
            if mode == "train":
                m = self.momentum
                self.running_mean = (m * self.running_mean + (1 - m) * mu).astype(
                    self.running_mean.dtype
                )
                self.running_var = (m * self.running_var + (1 - m) * var).astype(
                    self.running_var.dtype
                )
                self.initialized = True
            self._cache = ("batch", inv_std)
        y = self.gamma.value * xhat + self.beta.value
        self._xhat = xhat
        self._xshape = x.shape
        return y.reshape(x.shape)

    def backward(self, grad_out):
        kind, inv_std = self._cache
        c = grad_out.shape[-1]
        g = grad_out.reshape(-1, c)
        xhat = self._xhat
        self.beta.grad += g.sum(axis=0)
        self.gamma.grad += (g * xhat).sum(axis=0)
        if kind == "eval":
            gx = g * (self.gamma.value * inv_std)
        else:
            m = g.shape[0]
            gsum = g.sum(axis=0)
            gxhat_sum = (g * xhat).sum(axis=0)
            gx = (self.gamma.value * inv_std / m) * (m * g - gsum - xhat * gxhat_sum)
        return gx.reshape(self._xshape).astype(grad_out.dtype, copy=False)

    def params(self):
        return [self.gamma, self.beta]

    def state_arrays(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]


class Sequential:
    """Ordered stack of layers with mutable forward caches (single-threaded)."""

    def __init__(self, layers):
        self.layers = list(layers)

    def forward(self, x, mode="train", track_margins=False):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        for layer in self.layers:
            x = layer.forward(x, mode, track_margins)
        return x

    def backward(self, grad_out):
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def named_arrays(self):
        """Deterministically ordered (name, array) pairs: params then BN state."""
        out = []
        for layer in self.layers:
            for p in layer.params():
                out.append((p.name, p.value))
            for suffix, arr in layer.state_arrays():
                out.append((f"{layer.name}.{suffix}", arr))
        return out

    def load_arrays(self, arrays):
        """Copy a list of arrays (in named_arrays order) into the network."""
        slots = self.named_arrays()
        if len(arrays) != len(slots):
            raise ValueError(f"expected {len(slots)} arrays, got {len(arrays)}")
        for (name, dst), src in zip(slots, arrays):
            if dst.shape != src.shape:
                raise ValueError(f"{name}: shape {src.shape} does not match {dst.shape}")
            np.copyto(dst, src)

    def batchnorm_layers(self):
        return [l for l in self.layers if isinstance(l, BatchNorm)]

    def snapshot(self):
        arrays = [arr.copy() for _name, arr in self.named_arrays()]
        flags = [bn.initialized for bn in self.batchnorm_layers()]
        return arrays, flags

    def restore(self, snap):
        arrays, flags = snap
        self.load_arrays(arrays)
        for bn, flag in zip(self.batchnorm_layers(), flags):
            bn.initialized = flag

    def min_kink_margin(self):
        margins = [l.kink_margin for l in self.layers if l.kink_margin is not None]
        return min(margins) if margins else np.inf


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

def sample_kink_safe_input(net, shape, rng, min_margin=1e-3, max_tries=100, scale=1.0):
    """Draw a random input whose forward pass stays clear of ReLU/max-pool kinks.

    Central differences are unreliable when a perturbation can flip an argmax
    or a ReLU sign; requiring a margin much larger than epsilon rules that out.
    """
    for _ in range(max_tries):
        x = (rng.standard_normal(shape) * scale).astype(np.float64)
        net.forward(x, mode="frozen", track_margins=True)
        if net.min_kink_margin() > min_margin:
            return x
    raise RuntimeError(f"no kink-safe input found in {max_tries} draws")


def finite_difference_check(net, x, loss_fn, epsilon=1e-5, samples_per_param=8,
                            rng=None, check_input=True):
    """Max relative error between analytic and central-difference gradients.

    loss_fn maps the network output to (scalar loss, grad wrt output). Runs in
    frozen mode: dropout off, batch-norm on batch statistics without running
    updates, so the loss is a deterministic function of parameters and input.
    Build the network and input in float64 for meaningful tolerances.
    """
    rng = rng if rng is not None else np.random.default_rng(0)

    for p in net.params():
        p.grad.fill(0)
    out = net.forward(x, mode="frozen")
    _loss, gout = loss_fn(out)
    gin = net.backward(gout)
    entries = [(p.value, p.grad.copy()) for p in net.params()]
    if check_input:
        entries.append((x, gin))

    max_rel = 0.0
    for value, analytic in entries:
        flat = value.reshape(-1)
        gflat = analytic.reshape(-1)
        n_idx = min(samples_per_param, flat.size)
        idx = rng.choice(flat.size, size=n_idx, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            lp, _ = loss_fn(net.forward(x, mode="frozen"))
            flat[i] = orig - epsilon
            lm, _ = loss_fn(net.forward(x, mode="frozen"))
            flat[i] = orig
            num = (lp - lm) / (2.0 * epsilon)
            ana = gflat[i]
            if num == 0.0 and ana == 0.0:
                continue
            rel = abs(num - ana) / max(abs(num), abs(ana), 1e-6)
            max_rel = max(max_rel, rel)

    for p in net.params():
        p.grad.fill(0)
    return max_rel
