"""Synthetic motion clips, the dataset file format, clip sampling and augmentation.

Clips are float arrays laid out ``[C, T, H, W]`` with values in ``[0, 1]``.
Every random decision is drawn from a generator seeded by a tuple such as
``(seed, epoch, index)``, so a stream of samples is reproducible on its own.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .video_ops import residual_frames

MAGIC = b"VIDS0001"

# (dy, dx) per class; the first four are the default task
DIRECTIONS = [(-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)]
DIRECTION_NAMES = ["up", "down", "left", "right", "up-left", "up-right", "down-left", "down-right"]


def rng_for(*keys):
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in keys])


@dataclass
class VideoClip:
    id: str
    frames: np.ndarray
    label: int


@dataclass(frozen=True)
class LabelSymmetry:
    """How labels permute when a clip is mirrored left-right or played backwards.

    Identity for ordinary action classes. For the motion-direction task a
    mirrored "left" clip is a "right" clip, so the permutations are not trivial.
    """

    flip: tuple
    reverse: tuple

    @classmethod
    def identity(cls, num_classes):
        ident = tuple(range(num_classes))
        return cls(ident, ident)

    @classmethod
    def motion(cls, num_classes):
        def index(d):
            return DIRECTIONS.index(d)

        flip = tuple(index((dy, -dx)) for dy, dx in DIRECTIONS[:num_classes])
        rev = tuple(index((-dy, -dx)) for dy, dx in DIRECTIONS[:num_classes])
        if max(flip + rev, default=0) >= num_classes:
            raise ValueError(f"{num_classes} motion classes are not closed under flip/reverse")
        return cls(flip, rev)

    def map_label(self, label, flipped=False, reversed_=False):
        if flipped:
            label = self.flip[label]
        if reversed_:
            label = self.reverse[label]
        return label

    def unmap_logits(self, logits, flipped=False, reversed_=False):
        """Reorder logits of a transformed clip into the original clip's class order."""
        logits = np.asarray(logits)
        if reversed_:
            logits = logits[..., list(self.reverse)]
        if flipped:
            logits = logits[..., list(self.flip)]
        return logits


@dataclass
class Dataset:
    clips: list
    num_classes: int
    mean: np.ndarray
    std: np.ndarray
    symmetry: LabelSymmetry = None

    def __post_init__(self):
        if self.symmetry is None:
            self.symmetry = LabelSymmetry.identity(self.num_classes)

    @property
    def shape(self):
        return self.clips[0].frames.shape if self.clips else (0, 0, 0, 0)

    def split(self, val_fraction=0.1):
        train, val = [], []
        for c in self.clips:
            (val if is_validation(c.id, val_fraction) else train).append(c)
        return train, val


def is_validation(video_id, val_fraction=0.1):
    h = int.from_bytes(hashlib.sha256(video_id.encode()).digest()[:8], "little")
    return (h % 10_000) < round(val_fraction * 10_000)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    frame_size: int = 32
    clip_frames: int = 20
    object_size_range: tuple = (5, 9)
    speed_range: tuple = (1, 2)
    noise_std: float = 0.05
    samples_per_class: int = 100
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(DIRECTIONS):
            raise ValueError(f"num_classes must lie in [1, {len(DIRECTIONS)}]")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        if self.clip_frames < 1:
            raise ValueError("clip_frames must be positive")
        lo, hi = self.object_size_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad object_size_range {self.object_size_range}")
        if hi > self.frame_size:
            raise ValueError(f"object size {hi} is larger than the {self.frame_size}px frame")
        if self.speed_range[0] < 1 or self.speed_range[1] < self.speed_range[0]:
            raise ValueError("speed must be at least 1 pixel per frame")


def render_clip(size, frame_size, clip_frames, start, velocity, gray):
    base = np.zeros((frame_size, frame_size))
    base[:size, :size] = gray
    base = np.roll(base, start, axis=(0, 1))
    frames = [np.roll(base, (velocity[0] * t, velocity[1] * t), axis=(0, 1)) for t in range(clip_frames)]
    return np.stack(frames)


def generate_synthetic(spec):
    """A single gray square per clip, moving with constant velocity on a torus."""
    rng = rng_for(spec.seed, 0xDA7A)
    clips = []
    for i in range(spec.samples_per_class):
        for label in range(spec.num_classes):
            size = int(rng.integers(spec.object_size_range[0], spec.object_size_range[1] + 1))
            speed = int(rng.integers(spec.speed_range[0], spec.speed_range[1] + 1))
            start = tuple(int(v) for v in rng.integers(0, spec.frame_size, size=2))
            gray = rng.uniform(0.5, 1.0)
            dy, dx = DIRECTIONS[label]
            frames = render_clip(size, spec.frame_size, spec.clip_frames, start, (dy * speed, dx * speed), gray)
            frames = np.broadcast_to(frames, (3,) + frames.shape)
            if spec.noise_std > 0:
                frames = frames + rng.normal(0.0, spec.noise_std, size=frames.shape)
            frames = np.clip(frames, 0.0, 1.0).astype(np.float32)
            clips.append(VideoClip(f"syn{len(clips):05d}", frames, label))
    train = [c for c in clips if not is_validation(c.id)]
    mean, std = channel_stats(train or clips)
    return Dataset(clips, spec.num_classes, mean, std, LabelSymmetry.motion(spec.num_classes))


def channel_stats(clips):
    c = clips[0].frames.shape[0]
    total = np.zeros(c)
    sq = np.zeros(c)
    count = 0
    for clip in clips:
        f = clip.frames.astype(np.float64).reshape(c, -1)
        total += f.sum(axis=1)
        count += f.shape[1]
    mean = total / count
    for clip in clips:
        f = clip.frames.astype(np.float64).reshape(c, -1) - mean[:, None]
        sq += (f * f).sum(axis=1)
    std = np.sqrt(sq / count)
    return mean, np.where(std > 0, std, 1.0)


def write_dataset(dataset, path):
    c, t, h, w = dataset.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<6I", len(dataset.clips), c, t, h, w, dataset.num_classes))
        fh.write(np.asarray(dataset.mean, dtype="<f8").tobytes())
        fh.write(np.asarray(dataset.std, dtype="<f8").tobytes())
        for clip in dataset.clips:
            if clip.frames.shape != (c, t, h, w):
                raise ValueError(f"clip {clip.id} has shape {clip.frames.shape}, expected {(c, t, h, w)}")
            ident = clip.id.encode("utf-8")
            fh.write(struct.pack("<2I", clip.label, len(ident)))
            fh.write(ident)
            fh.write(np.asarray(clip.frames, dtype="<f4").tobytes())


def read_dataset(path, symmetry=None):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    n, c, t, h, w, k = struct.unpack_from("<6I", buf, 8)
    pos = 8 + 24
    mean = np.frombuffer(buf, "<f8", c, pos).astype(np.float64)
    std = np.frombuffer(buf, "<f8", c, pos + 8 * c).astype(np.float64)
    pos += 16 * c
    size = c * t * h * w
    clips = []
    for _ in range(n):
        label, idlen = struct.unpack_from("<2I", buf, pos)
        pos += 8
        ident = buf[pos:pos + idlen].decode("utf-8")
        pos += idlen
        frames = np.frombuffer(buf, "<f4", size, pos).reshape(c, t, h, w).astype(np.float32)
        pos += 4 * size
        clips.append(VideoClip(ident, frames, int(label)))
    if pos != len(buf):
        raise ValueError(f"{path}: {len(buf) - pos} trailing bytes")
    if symmetry == "motion":
        symmetry = LabelSymmetry.motion(k)
    elif symmetry in (None, "none", "identity"):
        symmetry = None
    return Dataset(clips, k, mean, std, symmetry)


# sampling


def window_indices(num_frames, out_frames, stride, start):
    """Frame indices of one window; videos that are too short are looped cyclically."""
    return (start + stride * np.arange(out_frames)) % num_frames


def window_starts(num_frames, out_frames, stride, policy, rng=None, count=10):
    if out_frames <= 0:
        raise ValueError(f"out_frames must be positive, got {out_frames}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    span = (out_frames - 1) * stride + 1
    room = max(num_frames - span, 0)
    if policy == "center":
        return [room // 2]
    if policy == "random":
        return [int(rng.integers(0, room + 1))]
    if policy == "ten_random":
        return [int(s) for s in rng.integers(0, room + 1, size=count)]
    if policy == "ten_consecutive":
        first = int(rng.integers(0, room + 1))
        return [(first + i * span) % num_frames for i in range(count)]
    raise ValueError(f"unknown sampling policy {policy!r}")


def sample_clip(frames, out_frames, stride=1, policy="center", seed=None, count=10):
    """Cut ``[C, out_frames, H, W]`` windows from ``[C, T, H, W]`` frames.

    ``center`` and ``random`` give one window, ``ten_random`` ``count``
    independent windows and ``ten_consecutive`` ``count`` back-to-back
    windows. Always returns a list.
    """
    rng = np.random.default_rng(seed)
    t = frames.shape[1]
    starts = window_starts(t, out_frames, stride, policy, rng, count)
    return [frames[:, window_indices(t, out_frames, stride, s)] for s in starts]


# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    base_size: int = 140
    scale_range: tuple = (0.8, 1.25)
    crop_size: int = 112
    horizontal_flip_prob: float = 0.5
    lighting_jitter: float = 0.1
    contrast_jitter: float = 0.2
    corner_crop: bool = False
    reverse_prob: float = 0.5
    stride_choices: tuple = (1, 2)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad scale_range {self.scale_range}")
        if self.crop_size > int(self.base_size * lo):
            raise ValueError(
                f"crop_size {self.crop_size} exceeds the smallest scaled frame "
                f"{int(self.base_size * lo)} (base {self.base_size} x {lo})"
            )
        for name in ("horizontal_flip_prob", "reverse_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not self.stride_choices or not set(self.stride_choices) <= {1, 2}:
            raise ValueError(f"stride_choices must be a non-empty subset of {{1, 2}}, got {self.stride_choices}")


@dataclass(frozen=True)
class AugmentDecisions:
    stride: int = 1
    scale: float = 1.0
    crop: str = "center"  # center | random | corner-tl/tr/bl/br
    crop_u: float = 0.5
    crop_v: float = 0.5
    flip: bool = False
    light: float = 0.0
    contrast: float = 1.0
    reverse: bool = False


def draw_decisions(config, rng):
    """All training-time random choices for one sample, in a fixed draw order."""
    stride = int(rng.choice(sorted(config.stride_choices)))
    scale = float(rng.uniform(*config.scale_range))
    if config.corner_crop:
        crop = ["center", "corner-tl", "corner-tr", "corner-bl", "corner-br"][int(rng.integers(0, 5))]
    else:
        crop = "random"
    u, v = float(rng.random()), float(rng.random())
    flip = bool(rng.random() < config.horizontal_flip_prob)
    light = float(rng.uniform(-config.lighting_jitter, config.lighting_jitter))
    contrast = float(rng.uniform(1 - config.contrast_jitter, 1 + config.contrast_jitter))
    reverse = bool(rng.random() < config.reverse_prob)
    return AugmentDecisions(stride, scale, crop, u, v, flip, light, contrast, reverse)


def resize_bilinear(frames, size):
    """Resize the trailing ``H, W`` axes to ``size x size`` (half-pixel centers)."""
    h, w = frames.shape[-2:]
    if (h, w) == (size, size):
        return frames.copy()

    def axis_weights(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, rw = axis_weights(h, size)
    c0, c1, cw = axis_weights(w, size)
    rows = frames[..., r0, :] * (1 - rw)[:, None] + frames[..., r1, :] * rw[:, None]
    return rows[..., c0] * (1 - cw) + rows[..., c1] * cw


def crop_frames(frames, size, how="center", u=0.5, v=0.5):
    h, w = frames.shape[-2:]
    if size > h or size > w:
        raise ValueError(f"crop {size} does not fit a {h}x{w} frame")
    room_y, room_x = h - size, w - size
    if how == "center":
        y, x = room_y // 2, room_x // 2
    elif how == "random":
        y, x = min(int(u * (room_y + 1)), room_y), min(int(v * (room_x + 1)), room_x)
    elif how.startswith("corner-"):
        y = 0 if how[-2] == "t" else room_y
        x = 0 if how[-1] == "l" else room_x
    else:
        raise ValueError(f"unknown crop {how!r}")
    return frames[..., y:y + size, x:x + size]


def hflip(frames):
    return frames[..., ::-1].copy()


def reverse_clip(frames):
    return frames[:, ::-1].copy()


def concat_normal_reverse(frames):
    return np.concatenate([frames, frames[:, ::-1]], axis=1)


def augment(clip, config, train=True, decisions=None, decision_seed=None):
    """Apply the training recipe (or eval resize + center crop) to ``[C, T, H, W]`` frames.

    Training order: scale, crop, flip, lighting, contrast, clamp, reverse.
    """
    frames = np.asarray(clip, dtype=np.float64)
    if not train:
        frames = resize_bilinear(frames, config.base_size)
        return crop_frames(frames, config.crop_size, "center")
    if decisions is None:
        decisions = draw_decisions(config, np.random.default_rng(decision_seed))
    d = decisions
    frames = resize_bilinear(frames, int(round(config.base_size * d.scale)))
    frames = crop_frames(frames, config.crop_size, d.crop, d.crop_u, d.crop_v)
    if d.flip:
        frames = frames[..., ::-1]
    if d.light:
        frames = frames + d.light
    if d.contrast != 1.0:
        mu = frames.mean()
        frames = (frames - mu) * d.contrast + mu
    frames = np.clip(frames, 0.0, 1.0)
    if d.reverse:
        frames = frames[:, ::-1]
    return np.ascontiguousarray(frames)


def to_model_input(clip, mode, mean, std):
    """Normalize per channel; ``diff`` mode first turns ``T+1`` frames into ``T`` residual frames."""
    clip = np.asarray(clip, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(-1, 1, 1, 1)
    if mode == "diff":
        clip = residual_frames(clip)
    elif mode != "rgb":
        raise ValueError(f"input mode must be rgb or diff, got {mode!r}")
    return (clip - mean) / std


def frames_needed(clip_len, mode):
    return clip_len + 1 if mode == "diff" else clip_len


def input_stats(dataset, mode):
    """Normalization for a mode: the stored RGB stats, or zero mean with the RGB spread for diffs."""
    if mode == "diff":
        return np.zeros_like(dataset.mean), dataset.std
    return dataset.mean, dataset.std
