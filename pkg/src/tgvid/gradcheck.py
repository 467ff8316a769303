"""Central finite-difference checks of every differentiable op and both micro models."""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass

import numpy as np

from . import ops
from .models import ModelConfig, build_model
from .tensor import Tensor, concat, no_grad
from .video_ops import ShiftSpec, lateral_fuse, residual_frames, tsm_shift, conv2plus1d

THRESHOLD = 1e-4
# relative error switches to absolute below this gradient magnitude
DENOM_FLOOR = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    threshold: float = THRESHOLD

    @property
    def passed(self):
        return bool(self.max_rel_error < self.threshold)


def _rel_error(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return np.abs(analytic - numeric) / denom


def _weighted_sum(out, head):
    return float(np.sum(out * head))


def check_gradients(fn, arrays, seed=0, epsilon=1e-5, max_coords=None, name="fn"):
    """Compare ``fn``'s backward against central differences.

    ``fn`` maps tensors to a tensor; a random weighting of its output turns it
    into a scalar. ``max_coords`` caps how many coordinates per input are
    perturbed (chosen at random).
    """
    rng = np.random.default_rng(seed)
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    if not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"{name}: forward produced non-finite values")
    head = rng.standard_normal(out.shape)
    out.backward(head)
    worst, count = 0.0, 0
    for a, t in zip(arrays, tensors):
        analytic = np.zeros_like(a) if t.grad is None else t.grad
        coords = list(np.ndindex(a.shape))
        if max_coords is not None and len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for idx in coords:
            orig = a[idx]
            vals = []
            for step in (epsilon, -epsilon):
                a[idx] = orig + step
                with no_grad():
                    vals.append(_weighted_sum(fn(*[Tensor(x) for x in arrays]).data, head))
            a[idx] = orig
            numeric = (vals[0] - vals[1]) / (2 * epsilon)
            if not np.isfinite(numeric):
                raise FloatingPointError(f"{name}: finite difference is not finite at {idx}")
            worst = max(worst, float(_rel_error(analytic[idx], numeric)))
            count += 1
    return CheckResult(name, worst, count)


def gradcheck(op, input_shapes, seed=0, epsilon=1e-5, max_coords=None):
    """Check ``op`` on standard-normal inputs of the given shapes."""
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(s) for s in input_shapes]
    return check_gradients(op, arrays, seed, epsilon, max_coords, getattr(op, "__name__", "op"))


def check_model(config, input_shape, seed=0, epsilon=1e-5, max_coords=12, name="model"):
    """Finite differences with respect to every parameter tensor of a built model."""
    rng = np.random.default_rng(seed)
    model = build_model(config, seed)
    x = rng.standard_normal(input_shape)
    params = model.named_parameters()
    out = model(x)
    head = rng.standard_normal(out.shape)
    out.backward(head)
    worst, count = 0.0, 0
    for p in params:
        analytic = p.grad.copy()
        p.grad = None
        coords = list(np.ndindex(p.shape))
        if len(coords) > max_coords:
            pick = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(pick)]
        for idx in coords:
            orig = p.data[idx]
            vals = []
            for step in (epsilon, -epsilon):
                p.data[idx] = orig + step
                with no_grad():
                    vals.append(_weighted_sum(model(x).data, head))
            p.data[idx] = orig
            numeric = (vals[0] - vals[1]) / (2 * epsilon)
            if not np.isfinite(numeric):
                raise FloatingPointError(f"{name}: finite difference is not finite for {p.name}")
            worst = max(worst, float(_rel_error(analytic[idx], numeric)))
            count += 1
    return CheckResult(name, worst, count)


def _bn(training):
    def fn(x, g, b):
        stats = ops.RunningStats(x.shape[1])
        if not training:
            stats.mean = np.linspace(-0.5, 0.5, x.shape[1])
            stats.var = np.linspace(0.5, 2.0, x.shape[1])
            stats.tracked = True
        return ops.batchnorm(x, g, b, stats, training)
    return fn


def _cross_entropy(z):
    labels = np.arange(z.shape[0]) % z.shape[1]
    return ops.softmax_cross_entropy(z, labels)[0]


def _positive(shape, seed):
    return np.random.default_rng(seed).uniform(0.5, 2.0, shape)


MICRO_SLOWFAST = ModelConfig(kind="slowfast", clip_len=4, alpha=2, beta="1/2", stem_channels=4,
                             stage_blocks=(1, 1), input_size=8, stem_stride=1, fuse_kernel=3)
MICRO_TSM = ModelConfig(kind="tsm", clip_len=4, stem_channels=8, stage_blocks=(1, 1), input_size=8,
                        stem_stride=1)


def _suite():
    """Name -> zero-argument callable returning a CheckResult."""
    g = gradcheck
    spec = ShiftSpec()
    checks = {
        "add": lambda: g(lambda a, b: a + b, [(3, 4), (4,)]),
        "sub": lambda: g(lambda a, b: a - b, [(3, 4), (3, 1)]),
        "mul": lambda: g(lambda a, b: a * b, [(3, 4), (3, 4)]),
        "div": lambda: check_gradients(lambda a, b: a / b, [np.random.default_rng(1).standard_normal((3, 4)),
                                                            _positive((3, 4), 2)], name="div"),
        "exp": lambda: g(lambda a: a.exp(), [(3, 4)]),
        "log": lambda: check_gradients(lambda a: a.log(), [_positive((3, 4), 3)], name="log"),
        "sum": lambda: g(lambda a: a.sum(axis=1, keepdims=True), [(3, 4, 2)]),
        "mean": lambda: g(lambda a: a.mean(axis=(0, 2)), [(3, 4, 2)]),
        "reshape": lambda: g(lambda a: a.reshape(4, 6), [(2, 3, 4)]),
        "transpose": lambda: g(lambda a: a.transpose(2, 0, 1), [(2, 3, 4)]),
        "getitem": lambda: g(lambda a: a[:, ::2] * a[:, 1::2], [(3, 6)]),
        "concat": lambda: g(lambda a, b: concat([a, b], axis=1), [(2, 3, 2), (2, 1, 2)]),
        "conv2d": lambda: g(lambda x, w, b: ops.conv2d(x, w, b, stride=2, padding=1), [(2, 3, 5, 5), (4, 3, 3, 3), (4,)]),
        "conv3d": lambda: g(lambda x, w, b: ops.conv3d(x, w, b, stride=(1, 2, 2), padding=1),
                            [(2, 2, 4, 5, 5), (3, 2, 3, 3, 3), (3,)]),
        "maxpool2d": lambda: g(lambda x: ops.maxpool2d(x, 2), [(2, 3, 4, 4)]),
        "maxpool3d": lambda: g(lambda x: ops.maxpool3d(x, (1, 2, 2), padding=(0, 1, 1)), [(2, 2, 3, 4, 4)]),
        "relu": lambda: g(ops.relu, [(4, 5)]),
        "elu": lambda: g(ops.elu, [(4, 5)]),
        "linear": lambda: g(ops.linear, [(3, 5), (4, 5), (4,)]),
        "global_avg_pool": lambda: g(ops.global_avg_pool, [(2, 3, 2, 3, 3)]),
        "batchnorm_train": lambda: g(_bn(True), [(4, 3, 2, 3), (3,), (3,)]),
        "batchnorm_eval": lambda: g(_bn(False), [(4, 3, 2, 3), (3,), (3,)]),
        "softmax_cross_entropy": lambda: g(_cross_entropy, [(5, 4)]),
        "tsm_shift": lambda: g(lambda x: tsm_shift(x, spec), [(2, 8, 4, 3, 3)]),
        "tsm_shift_frames": lambda: g(lambda x: tsm_shift(x, spec, n_frames=4), [(8, 8, 3, 3)]),
        "conv2plus1d": lambda: g(lambda x, ws, wt: conv2plus1d(x, ws, wt, between=ops.elu),
                                 [(2, 2, 4, 4, 4), (5, 2, 1, 3, 3), (3, 5, 3, 1, 1)]),
        "residual_frames": lambda: g(residual_frames, [(3, 5, 2, 2)]),
        "lateral_fuse": lambda: g(lambda f, s, w, b: lateral_fuse(f, s, 2, w, b),
                                  [(2, 2, 8, 3, 3), (2, 4, 4, 3, 3), (4, 2, 5, 1, 1), (4,)]),
        "slowfast_micro": lambda: check_model(MICRO_SLOWFAST, (2, 3, 4, 8, 8), name="slowfast_micro"),
        "tsm_micro": lambda: check_model(MICRO_TSM, (2, 3, 4, 8, 8), name="tsm_micro"),
    }
    return checks


def run_suite(pattern="*"):
    results = []
    for name, check in _suite().items():
        if fnmatch.fnmatch(name, pattern):
            r = check()
            r.name = name
            results.append(r)
    return results
