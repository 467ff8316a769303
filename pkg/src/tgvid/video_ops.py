"""Temporal shift, factored (2+1)D convolution, residual frames and fast-to-slow fusion."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .ops import conv3d
from .tensor import Tensor, as_tensor, concat


def _frac(v):
    if isinstance(v, Fraction):
        return v
    if isinstance(v, str):
        return Fraction(v.strip())
    if isinstance(v, float):
        return Fraction(str(v))
    return Fraction(v)


@dataclass(frozen=True)
class ShiftSpec:
    fraction_forward: Fraction = Fraction(1, 8)
    fraction_backward: Fraction = Fraction(1, 8)
    residual_embedding: bool = True

    def __post_init__(self):
        ff, fb = _frac(self.fraction_forward), _frac(self.fraction_backward)
        object.__setattr__(self, "fraction_forward", ff)
        object.__setattr__(self, "fraction_backward", fb)
        for name, f in (("fraction_forward", ff), ("fraction_backward", fb)):
            if not 0 <= f <= Fraction(1, 2):
                raise ValueError(f"{name} must lie in [0, 1/2], got {f}")

    @property
    def enabled(self):
        return self.fraction_forward > 0 or self.fraction_backward > 0

    def folds(self, channels):
        nf = int(channels * self.fraction_forward)
        nb = int(channels * self.fraction_backward)
        if nf + nb > channels:
            raise ValueError(f"shift folds {nf}+{nb} exceed {channels} channels")
        return nf, nb


def _shift_time(a, from_prev, from_next, t_axis, c_axis):
    # channels in from_prev read t-1, channels in from_next read t+1; boundaries are zero
    out = a.copy()

    def sl(c, t):
        idx = [slice(None)] * a.ndim
        idx[c_axis], idx[t_axis] = c, t
        return tuple(idx)

    out[sl(from_prev, slice(1, None))] = a[sl(from_prev, slice(None, -1))]
    out[sl(from_prev, slice(0, 1))] = 0.0
    out[sl(from_next, slice(None, -1))] = a[sl(from_next, slice(1, None))]
    out[sl(from_next, slice(-1, None))] = 0.0
    return out


def tsm_shift(x, spec, n_frames=None):
    """Shift a slice of channels one step along time, zero-filling the boundary.

    ``x`` is either ``[N, C, T, H, W]`` or frame-major ``[N*T, C, H, W]``; the
    latter needs ``n_frames``. The first ``floor(C*fraction_forward)``
    channels at time t receive the value from t-1, the next
    ``floor(C*fraction_backward)`` receive the value from t+1.
    """
    x = as_tensor(x)
    if x.ndim == 5:
        data, c_axis, t_axis = x.data, 1, 2
        channels = x.shape[1]
    elif x.ndim == 4:
        if n_frames is None:
            raise ValueError("frame-major input needs the number of frames per clip")
        if x.shape[0] % n_frames:
            raise ValueError(f"leading extent {x.shape[0]} is not a multiple of {n_frames} frames")
        data = x.data.reshape((x.shape[0] // n_frames, n_frames) + x.shape[1:])
        c_axis, t_axis = 2, 1
        channels = x.shape[1]
    else:
        raise ValueError(f"tsm_shift expects 4-d or 5-d input, got shape {x.shape}")
    nf, nb = spec.folds(channels)
    shape = x.shape
    fwd, bwd = slice(0, nf), slice(nf, nf + nb)
    out = _shift_time(data, fwd, bwd, t_axis, c_axis).reshape(shape)

    def backward(g):
        # the adjoint swaps the shift directions
        g = g.reshape(data.shape)
        return (_shift_time(g, bwd, fwd, t_axis, c_axis).reshape(shape),)

    return Tensor._from_op(out, (x,), backward)


@dataclass(frozen=True)
class Conv2Plus1DSpec:
    in_channels: int
    out_channels: int
    k: int = 3
    mid_channels: int | str = "matched"

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"(2+1)D kernel size must be odd and positive, got {self.k}")

    @property
    def mid(self):
        if self.mid_channels == "matched":
            return matched_mid_channels(self.in_channels, self.out_channels, self.k)
        return int(self.mid_channels)

    def weight_shapes(self):
        m, k = self.mid, self.k
        return (m, self.in_channels, 1, k, k), (self.out_channels, m, k, 1, 1)

    def factored_weight_count(self):
        m, k = self.mid, self.k
        return k * k * self.in_channels * m + k * m * self.out_channels

    def full3d_weight_count(self):
        return self.k ** 3 * self.in_channels * self.out_channels


def matched_mid_channels(cin, cout, k):
    """Largest mid width keeping the factored weights within the full k^3 kernel budget."""
    return max(1, (k ** 3 * cin * cout) // (k * k * cin + k * cout))


def conv2plus1d(x, spatial_weight, temporal_weight, between=None, spatial_stride=1):
    """Spatial ``1 x k x k`` conv, optional ``between`` stage, then temporal ``k x 1 x 1`` conv."""
    k = as_tensor(spatial_weight).shape[-1]
    kt = as_tensor(temporal_weight).shape[2]
    if k % 2 == 0 or kt % 2 == 0:
        raise ValueError(f"(2+1)D kernels must be odd, got spatial {k} temporal {kt}")
    h = conv3d(x, spatial_weight, stride=(1, spatial_stride, spatial_stride), padding=(0, k // 2, k // 2))
    if between is not None:
        h = between(h)
    return conv3d(h, temporal_weight, padding=(kt // 2, 0, 0))


def residual_frames(clip, axis=1):
    """Differences of consecutive frames along ``axis`` (time in ``[C, T, H, W]``).

    Works on numpy arrays and on tensors; the return type follows the input.
    """
    is_tensor = isinstance(clip, Tensor)
    data = clip.data if is_tensor else np.asarray(clip)
    t = data.shape[axis]
    if t < 2:
        raise ValueError(f"residual frames need at least 2 frames, got {t}")
    hi = [slice(None)] * data.ndim
    lo = [slice(None)] * data.ndim
    hi[axis], lo[axis] = slice(1, None), slice(None, -1)
    out = data[tuple(hi)] - data[tuple(lo)]
    if not is_tensor:
        return out

    def backward(g):
        gx = np.zeros(data.shape)
        gx[tuple(hi)] += g
        gx[tuple(lo)] -= g
        return (gx,)

    return Tensor._from_op(out, (clip,), backward)


def lateral_fuse(fast, slow, alpha, weight, bias=None):
    """Temporally strided conv of fast features, concatenated onto the slow features.

    ``weight`` is ``[Cl, Cf, kt, 1, 1]`` with odd ``kt``; it runs at temporal
    stride ``alpha`` so the fast time axis lands on the slow one.
    """
    fast, slow = as_tensor(fast), as_tensor(slow)
    tf, ts = fast.shape[2], slow.shape[2]
    if tf % alpha or tf // alpha != ts:
        raise ValueError(f"fast temporal extent {tf} is not alpha={alpha} times slow extent {ts}")
    if fast.shape[0] != slow.shape[0] or fast.shape[3:] != slow.shape[3:]:
        raise ValueError(f"fast {fast.shape} and slow {slow.shape} disagree outside channels/time")
    kt = as_tensor(weight).shape[2]
    lat = conv3d(fast, weight, bias, stride=(alpha, 1, 1), padding=(kt // 2, 0, 0))
    return concat([slow, lat], axis=1)
