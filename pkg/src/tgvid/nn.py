"""Stateful layers holding named parameters in construction order."""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .optim import Parameter
from .video_ops import Conv2Plus1DSpec, conv2plus1d


class Module:
    training = True

    def _children(self):
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module, ops.RunningStats)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix=""):
        out = []
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                value.name = name
                out.append(value)
            elif isinstance(value, Module):
                out.extend(value.named_parameters(name + "."))
        return out

    def parameters(self):
        return self.named_parameters()

    def named_buffers(self, prefix=""):
        """Batch-norm running statistics as ``name -> RunningStats``."""
        out = {}
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, ops.RunningStats):
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_buffers(name + "."))
        return out

    def train(self, mode=True):
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def fan_in_uniform(rng, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv(Module):
    """2D or 3D convolution depending on the kernel rank."""

    def __init__(self, rng, cin, cout, kernel, stride=1, padding=0, bias=False):
        kernel = tuple(kernel)
        shape = (cout, cin) + kernel
        self.weight = Parameter(fan_in_uniform(rng, shape, cin * int(np.prod(kernel))))
        self.bias = Parameter(np.zeros(cout)) if bias else None
        self.stride, self.padding = stride, padding
        self._fn = ops.conv3d if len(kernel) == 3 else ops.conv2d

    def forward(self, x):
        return self._fn(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, channels):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.stats = ops.RunningStats(channels)

    def forward(self, x):
        return ops.batchnorm(x, self.gamma, self.beta, self.stats, self.training)


class Identity(Module):
    def forward(self, x):
        return x


class Linear(Module):
    def __init__(self, rng, fin, fout):
        self.weight = Parameter(fan_in_uniform(rng, (fout, fin), fin))
        self.bias = Parameter(np.zeros(fout))

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)


def activation(name):
    if name == "elu":
        return ops.elu
    if name == "relu":
        return ops.relu
    raise ValueError(f"unknown activation {name!r}")


def norm_or_identity(channels, use_bn):
    return BatchNorm(channels) if use_bn else Identity()


class Conv2Plus1D(Module):
    """Factored ``1 x k x k`` then ``k x 1 x 1`` conv with norm + activation in between."""

    def __init__(self, rng, spec, act="elu", use_bn=True, spatial_stride=1):
        self.spec = spec
        ws, wt = spec.weight_shapes()
        self.spatial = Parameter(fan_in_uniform(rng, ws, spec.in_channels * spec.k * spec.k))
        self.mid_norm = norm_or_identity(spec.mid, use_bn)
        self.temporal = Parameter(fan_in_uniform(rng, wt, spec.mid * spec.k))
        self._act = activation(act)
        self.spatial_stride = spatial_stride

    def forward(self, x):
        return conv2plus1d(
            x, self.spatial, self.temporal,
            between=lambda h: self._act(self.mid_norm(h)),
            spatial_stride=self.spatial_stride,
        )


def conv3d_block(rng, cin, cout, style, k=3, stride=1, act="elu", use_bn=True, temporal_k=None):
    """A k-sized 3D conv in the requested style, preserving extents at stride 1."""
    kt = k if temporal_k is None else temporal_k
    if style == "two_plus_one_d":
        return Conv2Plus1D(rng, Conv2Plus1DSpec(cin, cout, k), act, use_bn, spatial_stride=stride)
    if style == "full3d":
        return Conv(rng, cin, cout, (kt, k, k), stride=(1, stride, stride),
                    padding=(kt // 2, k // 2, k // 2), bias=not use_bn)
    raise ValueError(f"unknown conv style {style!r}")
