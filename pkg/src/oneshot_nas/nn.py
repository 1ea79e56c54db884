"""Dense-tensor layers with hand-written forward and backward passes.

Activations are channels-last, ``(N, H, W, C)``. Every primitive layer keeps
its parameters in ``params`` (plain ndarrays, possibly views into a shared
weight store) and writes gradients of the same shapes into ``grads`` on
``backward``. ``refs`` maps each parameter or buffer name to the
``(store_key, slice)`` it was bound from, so a caller can scatter gradients
back into full-size storage.

Forward modes:

* ``"train"``: batch statistics in batch norm, running stats updated, the
  forward state is cached for ``backward``.
* ``"eval"``: running statistics, nothing cached.
* ``"stat_collect"``: batch statistics for normalisation and running-stat
  updates, nothing cached. Used for batch-norm recalibration.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError, ShapeError, UsageError
from .kernels import depthwise_backward, depthwise_forward

MODES = ("train", "eval", "stat_collect")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_mode(mode):
    if mode not in MODES:
        raise UsageError(f"unknown mode {mode!r}, expected one of {MODES}")


def _check_finite(x, where):
    if not np.isfinite(x.sum()):
        raise NumericError(f"non-finite input to {where}")


def _same_out(size, stride):
    return (size - 1) // stride + 1


class Module:
    """Anything with ``forward(x, mode)`` / ``backward(dout)``."""

    def layers(self):
        """Yield the primitive layers inside this module in execution order."""
        raise NotImplementedError

    def __call__(self, x, mode="train"):
        return self.forward(x, mode)


class Layer(Module):
    """Primitive op. Subclasses implement ``_forward`` and ``_backward``."""

    def __init__(self):
        self.params = {}
        self.buffers = {}
        self.grads = {}
        self.refs = {}
        self._cache = None

    def layers(self):
        yield self

    def forward(self, x, mode="train"):
        _check_mode(mode)
        _check_finite(x, type(self).__name__)
        out, cache = self._forward(x, mode)
        self._cache = cache if mode == "train" else None
        return out

    def backward(self, dout):
        if self._cache is None:
            raise UsageError(
                f"{type(self).__name__}.backward called without a cached train-mode forward"
            )
        cache, self._cache = self._cache, None
        dx, self.grads = self._backward(dout, cache)
        return dx

    def _forward(self, x, mode):
        raise NotImplementedError

    def _backward(self, dout, cache):
        raise NotImplementedError


def _im2col(xp, k, stride, dilation, h_out, w_out):
    n, _, _, c = xp.shape
    cols = np.empty((n, h_out, w_out, k * k, c), dtype=xp.dtype)
    span_h = stride * (h_out - 1) + 1
    span_w = stride * (w_out - 1) + 1
    for i in range(k):
        for j in range(k):
            hi, wi = i * dilation, j * dilation
            cols[:, :, :, i * k + j, :] = xp[:, hi:hi + span_h:stride, wi:wi + span_w:stride, :]
    return cols.reshape(n * h_out * w_out, k * k * c)


def _col2im(dcols, xp_shape, k, stride, dilation, h_out, w_out):
    n, _, _, c = xp_shape
    dcols = dcols.reshape(n, h_out, w_out, k * k, c)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    span_h = stride * (h_out - 1) + 1
    span_w = stride * (w_out - 1) + 1
    for i in range(k):
        for j in range(k):
            hi, wi = i * dilation, j * dilation
            dxp[:, hi:hi + span_h:stride, wi:wi + span_w:stride, :] += dcols[:, :, :, i * k + j, :]
    return dxp


class Conv2d(Layer):
    """Dense convolution, weight layout ``(k, k, C_in, C_out)``, same padding."""

    def __init__(self, weight, bias=None, stride=1, dilation=1):
        super().__init__()
        if weight.ndim != 4 or weight.shape[0] != weight.shape[1] or weight.shape[0] % 2 == 0:
            raise ShapeError(f"conv weight must be (k, k, C_in, C_out) with odd k, got {weight.shape}")
        self.params["w"] = weight
        if bias is not None:
            self.params["b"] = bias
        self.stride = stride
        self.dilation = dilation

    def _forward(self, x, mode):
        w = self.params["w"]
        k, _, cin, cout = w.shape
        if x.ndim != 4 or x.shape[3] != cin:
            raise ShapeError(f"Conv2d expects (N, H, W, {cin}), got {x.shape}")
        n, h, wd, _ = x.shape
        w2 = w.reshape(k * k * cin, cout)
        if k == 1 and self.stride == 1:
            cols = x.reshape(-1, cin)
            h_out, w_out, xp_shape = h, wd, None
        else:
            pad = self.dilation * (k - 1) // 2
            xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
            h_out, w_out = _same_out(h, self.stride), _same_out(wd, self.stride)
            cols = _im2col(xp, k, self.stride, self.dilation, h_out, w_out)
            xp_shape = xp.shape
        out = cols @ w2
        if "b" in self.params:
            out += self.params["b"]
        return out.reshape(n, h_out, w_out, cout), (cols, x.shape, xp_shape, h_out, w_out)

    def _backward(self, dout, cache):
        cols, x_shape, xp_shape, h_out, w_out = cache
        w = self.params["w"]
        k, _, cin, cout = w.shape
        d2 = dout.reshape(-1, cout)
        grads = {"w": (cols.T @ d2).reshape(w.shape)}
        if "b" in self.params:
            grads["b"] = d2.sum(axis=0)
        dcols = d2 @ w.reshape(k * k * cin, cout).T
        if xp_shape is None:
            return dcols.reshape(x_shape), grads
        dxp = _col2im(dcols, xp_shape, k, self.stride, self.dilation, h_out, w_out)
        pad = self.dilation * (k - 1) // 2
        return dxp[:, pad:pad + x_shape[1], pad:pad + x_shape[2], :], grads


class DepthwiseConv2d(Layer):
    """Per-channel convolution, weight layout ``(k, k, C)``, same padding."""

    def __init__(self, weight, stride=1, dilation=1):
        super().__init__()
        if weight.ndim != 3 or weight.shape[0] != weight.shape[1] or weight.shape[0] % 2 == 0:
            raise ShapeError(f"depthwise weight must be (k, k, C) with odd k, got {weight.shape}")
        self.params["w"] = weight
        self.stride = stride
        self.dilation = dilation

    def _forward(self, x, mode):
        w = np.ascontiguousarray(self.params["w"], dtype=x.dtype)
        k, _, c = w.shape
        if x.ndim != 4 or x.shape[3] != c:
            raise ShapeError(f"DepthwiseConv2d expects (N, H, W, {c}), got {x.shape}")
        pad = self.dilation * (k - 1) // 2
        xp = np.ascontiguousarray(np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0))))
        h_out, w_out = _same_out(x.shape[1], self.stride), _same_out(x.shape[2], self.stride)
        out = depthwise_forward(xp, w, self.stride, self.dilation, h_out, w_out)
        return out, (xp, w, x.shape)

    def _backward(self, dout, cache):
        xp, w, x_shape = cache
        dxp, dw = depthwise_backward(xp, w, np.ascontiguousarray(dout), self.stride, self.dilation)
        pad = self.dilation * (w.shape[0] - 1) // 2
        return dxp[:, pad:pad + x_shape[1], pad:pad + x_shape[2], :], {"w": dw}


class BatchNorm(Layer):
    """Per-channel batch norm over all axes but the last.

    ``momentum=None`` switches the running statistics to a cumulative
    average over every batch seen since the last ``reset_stats``.
    """

    def __init__(self, gamma, beta, running_mean, running_var, momentum=BN_MOMENTUM, eps=BN_EPS):
        super().__init__()
        self.params["gamma"] = gamma
        self.params["beta"] = beta
        self.buffers["mean"] = running_mean
        self.buffers["var"] = running_var
        self.momentum = momentum
        self.eps = eps
        self.num_batches = 0

    def reset_stats(self, dtype=None):
        """Detach from any shared buffers and restart cumulative averaging."""
        c = self.buffers["mean"].shape[0]
        dtype = dtype or self.buffers["mean"].dtype
        self.buffers["mean"] = np.zeros(c, dtype=dtype)
        self.buffers["var"] = np.ones(c, dtype=dtype)
        self.momentum = None
        self.num_batches = 0

    def _update_running(self, mean, var, m):
        unbiased = var * (m / (m - 1)) if m > 1 else var
        rm, rv = self.buffers["mean"], self.buffers["var"]
        self.num_batches += 1
        factor = 1.0 / self.num_batches if self.momentum is None else self.momentum
        # in place: the buffers may be views into a shared store
        rm *= 1.0 - factor
        rm += factor * mean
        rv *= 1.0 - factor
        rv += factor * unbiased

    def _forward(self, x, mode):
        c = self.params["gamma"].shape[0]
        if x.shape[-1] != c:
            raise ShapeError(f"BatchNorm over {c} channels got input {x.shape}")
        x2 = x.reshape(-1, c)
        gamma, beta = self.params["gamma"], self.params["beta"]
        if mode == "eval":
            inv_std = 1.0 / np.sqrt(self.buffers["var"] + self.eps)
            scale = (gamma * inv_std).astype(x.dtype)
            shift = (beta - self.buffers["mean"] * gamma * inv_std).astype(x.dtype)
            return (x2 * scale + shift).reshape(x.shape), None
        mean = x2.mean(axis=0)
        var = x2.var(axis=0)
        self._update_running(mean, var, x2.shape[0])
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x2 - mean) * inv_std
        out = xhat * gamma + beta
        return out.reshape(x.shape), (xhat, inv_std, x.shape)

    def _backward(self, dout, cache):
        xhat, inv_std, shape = cache
        gamma = self.params["gamma"]
        d2 = dout.reshape(xhat.shape)
        dbeta = d2.sum(axis=0)
        dgamma = (d2 * xhat).sum(axis=0)
        m = xhat.shape[0]
        dxhat = d2 * gamma
        dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx.reshape(shape), {"gamma": dgamma, "beta": dbeta}


class ReLU(Layer):
    def _forward(self, x, mode):
        mask = x > 0
        return x * mask, mask

    def _backward(self, dout, mask):
        return dout * mask, {}


class Swish(Layer):
    """x * sigmoid(x)."""

    def _forward(self, x, mode):
        s = sigmoid(x)
        return x * s, (x, s)

    def _backward(self, dout, cache):
        x, s = cache
        return dout * (s * (1.0 + x * (1.0 - s))), {}


def activation(name):
    if name == "relu":
        return ReLU()
    if name == "swish":
        return Swish()
    raise UsageError(f"unknown activation {name!r}")


class SqueezeExcite(Layer):
    """Channel gating: pool -> linear -> ReLU -> linear -> sigmoid -> scale.

    Weights ``w1 (C, M)``, ``b1 (M)``, ``w2 (M, C)``, ``b2 (C)``.
    """

    def __init__(self, w1, b1, w2, b2):
        super().__init__()
        if w1.shape[1] != w2.shape[0] or w1.shape[0] != w2.shape[1]:
            raise ShapeError(f"SE weights disagree: {w1.shape} vs {w2.shape}")
        self.params.update(w1=w1, b1=b1, w2=w2, b2=b2)

    def _forward(self, x, mode):
        p = self.params
        if x.shape[-1] != p["w1"].shape[0]:
            raise ShapeError(f"SE over {p['w1'].shape[0]} channels got input {x.shape}")
        s = x.mean(axis=(1, 2))
        z = s @ p["w1"] + p["b1"]
        a = np.maximum(z, 0)
        g = sigmoid(a @ p["w2"] + p["b2"]).astype(x.dtype)
        return x * g[:, None, None, :], (x, s, z, a, g)

    def _backward(self, dout, cache):
        x, s, z, a, g = cache
        p = self.params
        hw = x.shape[1] * x.shape[2]
        dg = (dout * x).sum(axis=(1, 2))
        du = dg * g * (1.0 - g)
        da = du @ p["w2"].T
        dz = da * (z > 0)
        ds = dz @ p["w1"].T
        dx = dout * g[:, None, None, :] + (ds / hw)[:, None, None, :]
        grads = {"w1": s.T @ dz, "b1": dz.sum(axis=0), "w2": a.T @ du, "b2": du.sum(axis=0)}
        return dx, grads


class GlobalAvgPool(Layer):
    def _forward(self, x, mode):
        return x.mean(axis=(1, 2)), x.shape

    def _backward(self, dout, shape):
        hw = shape[1] * shape[2]
        return np.broadcast_to((dout / hw)[:, None, None, :], shape).copy(), {}


class Linear(Layer):
    """``x @ w + b`` with ``w (in, out)``."""

    def __init__(self, weight, bias=None):
        super().__init__()
        self.params["w"] = weight
        if bias is not None:
            self.params["b"] = bias

    def _forward(self, x, mode):
        if x.ndim != 2 or x.shape[1] != self.params["w"].shape[0]:
            raise ShapeError(f"Linear expects (N, {self.params['w'].shape[0]}), got {x.shape}")
        out = x @ self.params["w"]
        if "b" in self.params:
            out = out + self.params["b"]
        return out, x

    def _backward(self, dout, x):
        grads = {"w": x.T @ dout}
        if "b" in self.params:
            grads["b"] = dout.sum(axis=0)
        return dout @ self.params["w"].T, grads


def bilinear_matrix(size_in, size_out, dtype=np.float64):
    """Interpolation matrix ``(size_out, size_in)``, half-pixel centres."""
    mat = np.zeros((size_out, size_in), dtype=dtype)
    scale = size_in / size_out
    for i in range(size_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), size_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, size_in - 1)
        frac = src - lo
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    return mat


class BilinearUpsample(Layer):
    def __init__(self, size):
        super().__init__()
        self.size = size

    def _forward(self, x, mode):
        uh = bilinear_matrix(x.shape[1], self.size[0], x.dtype)
        uw = bilinear_matrix(x.shape[2], self.size[1], x.dtype)
        out = np.einsum("ha,nabc,wb->nhwc", uh, x, uw, optimize=True)
        return out, (uh, uw)

    def _backward(self, dout, cache):
        uh, uw = cache
        return np.einsum("ha,nhwc,wb->nabc", uh, dout, uw, optimize=True), {}


class Sequential(Module):
    def __init__(self, *modules):
        self.modules = list(modules)

    def layers(self):
        for m in self.modules:
            yield from m.layers()

    def forward(self, x, mode="train"):
        for m in self.modules:
            x = m.forward(x, mode)
        return x

    def backward(self, dout):
        for m in reversed(self.modules):
            dout = m.backward(dout)
        return dout


class Residual(Module):
    """``body(x) + x``."""

    def __init__(self, body):
        self.body = body

    def layers(self):
        yield from self.body.layers()

    def forward(self, x, mode="train"):
        return self.body.forward(x, mode) + x

    def backward(self, dout):
        return self.body.backward(dout) + dout


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over every sample (or pixel) and its gradient.

    ``logits`` has classes on the last axis; ``labels`` holds integer class
    indices with the remaining shape.
    """
    num_classes = logits.shape[-1]
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    flat = logits.reshape(-1, num_classes)
    y = labels.reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes})")
    if not np.isfinite(flat).all():
        raise NumericError("non-finite logits")
    shifted = flat - flat.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(y.size)
    loss = float(np.mean(logsum - shifted[rows, y]))
    grad = np.exp(shifted - logsum[:, None])
    grad[rows, y] -= 1.0
    grad /= y.size
    return loss, grad.reshape(logits.shape).astype(logits.dtype, copy=False)


@dataclass
class OptimizerState:
    lr: float = 0.045
    momentum: float = 0.9
    weight_decay: float = 4e-5
    buffers: dict = field(default_factory=dict)
    num_updates: int = 0


def decay_exempt(name):
    """Batch-norm affine parameters and biases are not weight-decayed."""
    return name.endswith((".gamma", ".beta", ".b", ".b1", ".b2"))


def sgd_update(params, grads, state):
    """One momentum-SGD step, in place, for every key present in ``grads``.

    ``buf = momentum * buf + grad + wd * param``; ``param -= lr * buf``.
    Parameters without a gradient entry are left untouched, buffers included.
    """
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        step = g.astype(p.dtype, copy=True)
        if state.weight_decay and not decay_exempt(name):
            step += state.weight_decay * p
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p)
            state.buffers[name] = buf
        buf *= state.momentum
        buf += step
        p -= state.lr * buf
    state.num_updates += 1


def cosine_lr(step, total_steps, lr0):
    if total_steps <= 0:
        raise UsageError("total_steps must be positive")
    if step < 0 or step > total_steps:
        raise UsageError(f"step {step} outside [0, {total_steps}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * step / total_steps))
