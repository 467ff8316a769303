"""Differentiable layer primitives: convolution, pooling, activations, norm, loss."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, as_tensor


def _triple(v, n):
    if isinstance(v, int):
        return (v,) * n
    v = tuple(int(i) for i in v)
    if len(v) != n:
        raise ValueError(f"expected {n} values, got {v}")
    return v


def _out_extent(size, k, s, p, axis):
    span = size + 2 * p - k
    if span < 0:
        raise ValueError(
            f"kernel extent {k} exceeds padded input extent {size + 2 * p} on spatial axis {axis}"
        )
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {s}")
    return span // s + 1


def _offsets(k):
    return itertools.product(*(range(kk) for kk in k))


def _window(off, out_sp, stride):
    return (slice(None), slice(None)) + tuple(
        slice(o, o + e * s, s) for o, e, s in zip(off, out_sp, stride)
    )


def _im2col(xp, k, stride, out_sp):
    """Padded ``[N, C, *S]`` -> ``[N, C * prod(k), prod(out)]`` patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c) + tuple(k) + tuple(out_sp))
    for off in _offsets(k):
        cols[(slice(None), slice(None)) + off] = xp[_window(off, out_sp, stride)]
    return cols.reshape(n, c * int(np.prod(k)), -1)


def _convnd(x, w, b, stride, padding):
    x, w = as_tensor(x), as_tensor(w)
    nd = w.ndim - 2
    if x.ndim != nd + 2:
        raise ValueError(f"input must have {nd + 2} dims, got shape {x.shape}")
    n, cin = x.shape[:2]
    cout, wcin = w.shape[:2]
    if cin != wcin:
        raise ValueError(f"input has {cin} channels but weight expects Cin={wcin}")
    k = w.shape[2:]
    stride, padding = _triple(stride, nd), _triple(padding, nd)
    out_sp = tuple(
        _out_extent(x.shape[2 + i], k[i], stride[i], padding[i], i) for i in range(nd)
    )

    xp = x.data
    if any(padding):
        xp = np.pad(xp, [(0, 0), (0, 0)] + [(p, p) for p in padding])
    cols = _im2col(xp, k, stride, out_sp)
    wmat = w.data.reshape(cout, -1)
    out = np.matmul(wmat, cols)
    if b is not None:
        b = as_tensor(b)
        out += b.data[:, None]
    out = out.reshape((n, cout) + out_sp)

    def backward(g):
        g3 = g.reshape(n, cout, -1)
        grads = [None, None]
        if w.requires_grad:
            grads[1] = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g3).reshape((n, cin) + tuple(k) + out_sp)
            dxp = np.zeros(xp.shape)
            for off in _offsets(k):
                dxp[_window(off, out_sp, stride)] += dcols[(slice(None), slice(None)) + off]
            crop = tuple(slice(p, p + x.shape[2 + i]) for i, p in enumerate(padding))
            grads[0] = dxp[(slice(None), slice(None)) + crop]
        if b is not None:
            grads.append(g3.sum(axis=(0, 2)))
        return grads

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._from_op(out, parents, backward)


def conv3d(x, weight, bias=None, stride=1, padding=0):
    """3D convolution of ``[N, Cin, T, H, W]`` with ``[Cout, Cin, kt, kh, kw]``, zero padded."""
    if as_tensor(weight).ndim != 5:
        raise ValueError("conv3d weight must be [Cout, Cin, kt, kh, kw]")
    return _convnd(x, weight, bias, stride, padding)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    if as_tensor(weight).ndim != 4:
        raise ValueError("conv2d weight must be [Cout, Cin, kh, kw]")
    return _convnd(x, weight, bias, stride, padding)


def _maxpoolnd(x, kernel, stride, padding, nd):
    x = as_tensor(x)
    if x.ndim != nd + 2:
        raise ValueError(f"input must have {nd + 2} dims, got shape {x.shape}")
    kernel = _triple(kernel, nd)
    stride = _triple(stride if stride is not None else kernel, nd)
    padding = _triple(padding, nd)
    out_sp = tuple(
        _out_extent(x.shape[2 + i], kernel[i], stride[i], padding[i], i) for i in range(nd)
    )
    xp = x.data
    if any(padding):
        xp = np.pad(xp, [(0, 0), (0, 0)] + [(p, p) for p in padding], constant_values=-np.inf)
    # scan window positions in row-major order; strict > keeps the first maximum
    offsets = list(_offsets(kernel))
    out = xp[_window(offsets[0], out_sp, stride)].copy()
    idx = np.zeros(out.shape, dtype=np.int32)
    for j, off in enumerate(offsets[1:], start=1):
        cand = xp[_window(off, out_sp, stride)]
        upd = cand > out
        np.copyto(out, cand, where=upd)
        idx[upd] = j

    def backward(g):
        dxp = np.zeros(xp.shape)
        for j, off in enumerate(offsets):
            dxp[_window(off, out_sp, stride)] += np.where(idx == j, g, 0.0)
        crop = tuple(slice(p, p + x.shape[2 + i]) for i, p in enumerate(padding))
        return (dxp[(slice(None), slice(None)) + crop],)

    return Tensor._from_op(out, (x,), backward)


def maxpool3d(x, kernel, stride=None, padding=0):
    """Max over ``kernel`` windows of ``[N, C, T, H, W]``; stride defaults to the kernel."""
    return _maxpoolnd(x, kernel, stride, padding, 3)


def maxpool2d(x, kernel, stride=None, padding=0):
    return _maxpoolnd(x, kernel, stride, padding, 2)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def elu(x, alpha=1.0):
    x = as_tensor(x)
    pos = x.data > 0
    em1 = np.expm1(np.minimum(x.data, 0.0))
    out = np.where(pos, x.data, alpha * em1)

    def backward(g):
        return (np.where(pos, g, g * (alpha * (em1 + 1.0))),)

    return Tensor._from_op(out, (x,), backward)


def linear(x, weight, bias=None):
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"linear: input features {x.shape} do not match weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward)


def global_avg_pool(x):
    """Mean over every axis after the channel axis: ``[N, C, ...] -> [N, C]``."""
    x = as_tensor(x)
    return x.mean(axis=tuple(range(2, x.ndim)))


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batch norm; ``tracked`` flips on first update."""

    num_channels: int
    mean: np.ndarray = field(default=None)
    var: np.ndarray = field(default=None)
    tracked: bool = False

    def __post_init__(self):
        if self.mean is None:
            self.mean = np.zeros(self.num_channels)
        if self.var is None:
            self.var = np.ones(self.num_channels)


def batchnorm(x, gamma, beta, stats, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization over all axes except axis 1.

    In training mode batch statistics are used and ``stats`` is updated in
    place (exponential moving average, unbiased variance). Eval mode uses
    the recorded running statistics.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n, c = x.shape[:2]
    x3 = x.data.reshape(n, c, -1)
    m = x3.shape[0] * x3.shape[2]
    if training:
        if m < 2:
            raise ValueError("batchnorm in train mode needs at least 2 values per channel")
        mu = np.einsum("ncp->c", x3) / m
        xc = x3 - mu[:, None]
        var = np.einsum("ncp,ncp->c", xc, xc) / m
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv[:, None]
        stats.mean *= 1.0 - momentum
        stats.mean += momentum * mu
        stats.var *= 1.0 - momentum
        stats.var += momentum * var * (m / (m - 1))
        stats.tracked = True
    else:
        if not stats.tracked:
            raise RuntimeError("batchnorm eval mode requested before any running stats were recorded")
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (x3 - stats.mean[:, None]) * inv[:, None]
    out = (xhat * gamma.data[:, None] + beta.data[:, None]).reshape(x.shape)

    def backward(g):
        g3 = g.reshape(n, c, -1)
        dgamma = np.einsum("ncp,ncp->c", g3, xhat)
        dbeta = np.einsum("ncp->c", g3)
        scale = gamma.data * inv
        if training:
            dx = (scale / m)[:, None] * (m * g3 - dbeta[:, None] - xhat * dgamma[:, None])
        else:
            dx = g3 * scale[:, None]
        return dx.reshape(x.shape), dgamma, dbeta

    return Tensor._from_op(out, (x, gamma, beta), backward)


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits):
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of ``[N, C]`` logits against integer labels.

    Returns ``(loss, grad_logits)``; ``loss`` is a scalar tensor wired into
    the graph so ``loss.backward()`` works.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got {labels.tolist()}")
    lsm = log_softmax(logits.data)
    loss = -lsm[np.arange(n), labels].mean()
    grad = np.exp(lsm)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    out = Tensor._from_op(np.array(loss), (logits,), lambda g: (g * grad,))
    return out, grad
