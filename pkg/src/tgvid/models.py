"""SlowFast-micro and TSM-net, built from a flat :class:`ModelConfig`."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction

import numpy as np

from . import ops
from .nn import (Conv, Linear, Module, activation, conv3d_block, fan_in_uniform,
                 norm_or_identity)
from .optim import Parameter
from .tensor import as_tensor, concat
from .video_ops import ShiftSpec, _frac, lateral_fuse, tsm_shift

DEFAULT_CLIP_LEN = {"slowfast": 64, "tsm": 16}


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "slowfast"
    num_classes: int = 4
    clip_len: int | None = None
    alpha: int = 4
    beta: Fraction = Fraction(1, 8)
    stem_channels: int = 16
    stage_blocks: tuple = (1, 1, 1)
    activation: str = "elu"
    downsample: str = "maxpool"
    conv_style: str = "two_plus_one_d"
    shift: ShiftSpec = field(default_factory=ShiftSpec)
    input_mode: str = "rgb"
    in_channels: int = 3
    input_size: int = 32
    batchnorm: bool = True
    fuse_kernel: int = 5
    stem_stride: int = 2

    def __post_init__(self):
        if self.kind not in DEFAULT_CLIP_LEN:
            raise ValueError(f"kind must be slowfast or tsm, got {self.kind!r}")
        if self.clip_len is None:
            object.__setattr__(self, "clip_len", DEFAULT_CLIP_LEN[self.kind])
        object.__setattr__(self, "beta", _frac(self.beta))
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        checks = [
            (self.num_classes >= 1, "num_classes must be positive"),
            (self.clip_len >= 1, "clip_len must be positive"),
            (self.alpha >= 1, "alpha must be positive"),
            (0 < self.beta <= 1, "beta must lie in (0, 1]"),
            (self.stem_channels >= 1, "stem_channels must be positive"),
            (len(self.stage_blocks) >= 1, "stage_blocks must not be empty"),
            (self.activation in ("elu", "relu"), "activation must be elu or relu"),
            (self.downsample in ("maxpool", "strided_conv"), "downsample must be maxpool or strided_conv"),
            (self.conv_style in ("full3d", "two_plus_one_d"), "conv_style must be full3d or two_plus_one_d"),
            (self.input_mode in ("rgb", "diff"), "input_mode must be rgb or diff"),
            (self.fuse_kernel % 2 == 1, "fuse_kernel must be odd"),
            (self.stem_stride >= 1, "stem_stride must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)
        for i, b in enumerate(self.stage_blocks):
            if b < 1:
                raise ValueError(f"stage {i}: block count must be positive, got {b}")
        if self.kind == "slowfast":
            if self.clip_len % self.alpha:
                raise ValueError(f"slowfast clip_len {self.clip_len} is not divisible by alpha {self.alpha}")
            fast = self.stem_channels * self.beta
            if fast.denominator != 1:
                raise ValueError(
                    f"stem: fast width stem_channels*beta = {fast} is not a whole channel count"
                )
        size = self.input_size // self.stem_stride // 2
        for i in range(len(self.stage_blocks)):
            if i > 0:
                size //= 2
            if size < 1:
                raise ValueError(f"stage {i}: spatial extent vanishes at input size {self.input_size}")

    def to_dict(self):
        d = asdict(self)
        d["beta"] = str(self.beta)
        d["stage_blocks"] = ",".join(str(b) for b in self.stage_blocks)
        d.pop("shift")
        d["shift_forward"] = str(self.shift.fraction_forward)
        d["shift_backward"] = str(self.shift.fraction_backward)
        d["shift_residual"] = self.shift.residual_embedding
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        shift = ShiftSpec(
            d.pop("shift_forward", Fraction(1, 8)),
            d.pop("shift_backward", Fraction(1, 8)),
            _as_bool(d.pop("shift_residual", True)),
        )
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in types:
                raise KeyError(f"unknown model config key {k!r}")
            if k == "stage_blocks" and isinstance(v, str):
                v = tuple(int(s) for s in v.split(",") if s.strip())
            elif k == "batchnorm":
                v = _as_bool(v)
            elif k == "clip_len" and v in (None, "", "None"):
                v = None
            elif k in ("num_classes", "clip_len", "alpha", "stem_channels", "in_channels",
                       "input_size", "fuse_kernel", "stem_stride"):
                v = int(v)
            kw[k] = v
        return cls(shift=shift, **kw)

    def text(self):
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())

    def hash(self):
        return hashlib.sha256(self.text().encode()).hexdigest()[:16]

    def with_shift(self, ff, fb):
        return replace(self, shift=replace(self.shift, fraction_forward=_frac(ff), fraction_backward=_frac(fb)))


def _as_bool(v):
    if isinstance(v, str):
        if v.strip().lower() in ("1", "true", "yes", "on"):
            return True
        if v.strip().lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {v!r}")
    return bool(v)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _check_batch(batch, clip_len, in_channels):
    batch = as_tensor(batch)
    if batch.ndim != 5:
        raise ValueError(f"expected a [N, C, T, H, W] batch, got shape {batch.shape}")
    if batch.shape[1] != in_channels:
        raise ValueError(f"expected {in_channels} input channels, got {batch.shape[1]}")
    if batch.shape[2] != clip_len:
        raise ValueError(f"expected T == clip_len == {clip_len}, got T == {batch.shape[2]}")
    return batch


class ResBlock3D(Module):
    def __init__(self, rng, cin, cout, cfg, stride=1):
        bn = cfg.batchnorm
        self.conv_a = conv3d_block(rng, cin, cout, cfg.conv_style, stride=stride,
                                   act=cfg.activation, use_bn=bn)
        self.norm_a = norm_or_identity(cout, bn)
        self.conv_b = conv3d_block(rng, cout, cout, cfg.conv_style, act=cfg.activation, use_bn=bn)
        self.norm_b = norm_or_identity(cout, bn)
        self.proj = None
        if cin != cout or stride != 1:
            self.proj = Conv(rng, cin, cout, (1, 1, 1), stride=(1, stride, stride), bias=not bn)
            self.proj_norm = norm_or_identity(cout, bn)
        self._act = activation(cfg.activation)

    def forward(self, x):
        h = self._act(self.norm_a(self.conv_a(x)))
        h = self.norm_b(self.conv_b(h))
        skip = x if self.proj is None else self.proj_norm(self.proj(x))
        return self._act(h + skip)


class SlowFast(Module):
    """Two pathways over one clip, fused fast-to-slow after the stem and every stage."""

    def __init__(self, cfg, rng):
        self.config = cfg
        self.clip_len = cfg.clip_len
        a, bn = cfg.alpha, cfg.batchnorm
        cs = cfg.stem_channels
        cf = int(cfg.stem_channels * cfg.beta)
        self._strided = cfg.downsample == "strided_conv"
        s = cfg.stem_stride
        self.slow_stem = Conv(rng, cfg.in_channels, cs, (1, 3, 3), stride=(1, s, s), padding=(0, 1, 1), bias=not bn)
        self.slow_stem_norm = norm_or_identity(cs, bn)
        self.fast_stem = Conv(rng, cfg.in_channels, cf, (3, 3, 3), stride=(1, s, s), padding=1, bias=not bn)
        self.fast_stem_norm = norm_or_identity(cf, bn)
        self.fuse = [self._fuse_layer(rng, cf)]
        self.slow_blocks, self.fast_blocks = [], []
        slow_in, fast_in = cs + 2 * cf, cf
        for i, n in enumerate(cfg.stage_blocks):
            slow_out, fast_out = cs * 2 ** i, cf * 2 ** i
            stride = 2 if (i > 0 and self._strided) else 1
            sb, fb = [], []
            for j in range(n):
                sb.append(ResBlock3D(rng, slow_in, slow_out, cfg, stride if j == 0 else 1))
                fb.append(ResBlock3D(rng, fast_in, fast_out, cfg, stride if j == 0 else 1))
                slow_in, fast_in = slow_out, fast_out
            self.slow_blocks.append(_Stage(sb))
            self.fast_blocks.append(_Stage(fb))
            self.fuse.append(self._fuse_layer(rng, fast_out))
            slow_in = slow_out + 2 * fast_out
        self.head = Linear(rng, slow_in + fast_in, cfg.num_classes)
        self._act = activation(cfg.activation)
        self.alpha = a

    def _fuse_layer(self, rng, cf):
        return _Fuse(rng, cf, self.config.fuse_kernel)

    def pathways(self, batch):
        batch = _check_batch(batch, self.clip_len, self.config.in_channels)
        return batch[:, :, :: self.alpha], batch

    def forward(self, batch):
        slow_in, fast_in = self.pathways(batch)
        return self.forward_pathways(slow_in, fast_in)

    def forward_pathways(self, slow, fast):
        slow = self._act(self.slow_stem_norm(self.slow_stem(slow)))
        fast = self._act(self.fast_stem_norm(self.fast_stem(fast)))
        slow = ops.maxpool3d(slow, (1, 2, 2))
        fast = ops.maxpool3d(fast, (1, 2, 2))
        slow = self.fuse[0](fast, slow, self.alpha)
        for i, (sb, fb) in enumerate(zip(self.slow_blocks, self.fast_blocks)):
            if i > 0 and not self._strided:
                slow = ops.maxpool3d(slow, (1, 2, 2))
                fast = ops.maxpool3d(fast, (1, 2, 2))
            slow = sb(slow)
            fast = fb(fast)
            slow = self.fuse[i + 1](fast, slow, self.alpha)
        feats = concat([ops.global_avg_pool(slow), ops.global_avg_pool(fast)], axis=1)
        return self.head(feats)


class _Stage(Module):
    def __init__(self, blocks):
        self.blocks = blocks

    def forward(self, x, *args):
        for b in self.blocks:
            x = b(x, *args)
        return x


class _Fuse(Module):
    def __init__(self, rng, cf, kt):
        shape = (2 * cf, cf, kt, 1, 1)
        self.weight = Parameter(fan_in_uniform(rng, shape, cf * kt))
        self.bias = Parameter(np.zeros(2 * cf))

    def forward(self, fast, slow, alpha):
        return lateral_fuse(fast, slow, alpha, self.weight, self.bias)


class ShiftBlock2D(Module):
    """2D residual block; the temporal shift sits in the residual branch or on the trunk."""

    def __init__(self, rng, cin, cout, cfg, stride=1):
        bn = cfg.batchnorm
        self.conv_a = Conv(rng, cin, cout, (3, 3), stride=stride, padding=1, bias=not bn)
        self.norm_a = norm_or_identity(cout, bn)
        self.conv_b = Conv(rng, cout, cout, (3, 3), padding=1, bias=not bn)
        self.norm_b = norm_or_identity(cout, bn)
        self.proj = None
        if cin != cout or stride != 1:
            self.proj = Conv(rng, cin, cout, (1, 1), stride=stride, bias=not bn)
            self.proj_norm = norm_or_identity(cout, bn)
        self._act = activation(cfg.activation)
        self.spec = cfg.shift

    def forward(self, x, n_frames, shift_on):
        branch_in = x
        if shift_on:
            branch_in = tsm_shift(x, self.spec, n_frames)
            if not self.spec.residual_embedding:
                x = branch_in
        h = self._act(self.norm_a(self.conv_a(branch_in)))
        h = self.norm_b(self.conv_b(h))
        skip = x if self.proj is None else self.proj_norm(self.proj(x))
        return self._act(h + skip)


class TSMNet(Module):
    """2D residual backbone applied per frame, shift inside blocks, mean consensus over time."""

    def __init__(self, cfg, rng):
        self.config = cfg
        self.clip_len = cfg.clip_len
        self.shift_enabled = cfg.shift.enabled
        bn = cfg.batchnorm
        self._strided = cfg.downsample == "strided_conv"
        c = cfg.stem_channels
        self.stem = Conv(rng, cfg.in_channels, c, (3, 3), stride=cfg.stem_stride, padding=1, bias=not bn)
        self.stem_norm = norm_or_identity(c, bn)
        self.stages = []
        cin = c
        for i, n in enumerate(cfg.stage_blocks):
            cout = c * 2 ** i
            stride = 2 if (i > 0 and self._strided) else 1
            blocks = []
            for j in range(n):
                blocks.append(ShiftBlock2D(rng, cin, cout, cfg, stride if j == 0 else 1))
                cin = cout
            self.stages.append(_Stage(blocks))
        self.head = Linear(rng, cin, cfg.num_classes)
        self._act = activation(cfg.activation)

    def set_single_frame(self, on=True):
        """Single-frame pretraining: clip length 1 and no shift."""
        if on:
            self.clip_len, self.shift_enabled = 1, False
        else:
            self.clip_len, self.shift_enabled = self.config.clip_len, self.config.shift.enabled

    def frame_logits(self, batch):
        batch = as_tensor(batch)
        n, ch, t, h, w = batch.shape
        if self.clip_len == 1 and t > 1:
            raise ValueError(f"model is in single-frame mode but got T == {t}")
        batch = _check_batch(batch, self.clip_len, self.config.in_channels)
        frames = batch.transpose(0, 2, 1, 3, 4).reshape(n * t, ch, h, w)
        x = self._act(self.stem_norm(self.stem(frames)))
        x = ops.maxpool2d(x, 2)
        for i, stage in enumerate(self.stages):
            if i > 0 and not self._strided:
                x = ops.maxpool2d(x, 2)
            x = stage(x, t, self.shift_enabled)
        return self.head(ops.global_avg_pool(x)).reshape(n, t, self.config.num_classes)

    def forward(self, batch):
        return self.frame_logits(batch).mean(axis=1)


def build_model(config, seed=0):
    rng = np.random.default_rng(seed)
    if config.kind == "slowfast":
        return SlowFast(config, rng)
    return TSMNet(config, rng)


def count_parameters(model):
    return sum(p.size for p in model.named_parameters())


def slowfast_forward(model, batch):
    if not isinstance(model, SlowFast):
        raise TypeError("slowfast_forward needs a SlowFast model")
    return model(batch)


def tsm_forward(model, batch):
    if not isinstance(model, TSMNet):
        raise TypeError("tsm_forward needs a TSMNet model")
    return model(batch)
