"""Multi-clip evaluation under test-time variants, logit files and weighted ensembles."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .data import (concat_normal_reverse, crop_frames, frames_needed, input_stats,
                   resize_bilinear, rng_for, sample_clip, to_model_input)
from .tensor import no_grad

VARIANTS = ("center_crop", "horizontal_flip", "random_crop", "reverse_order", "normal_reverse_concat")
EVAL_STREAM = 0xE7A1


def variant_from_cli(name):
    key = name.strip().lower().replace("-", "_")
    if key not in VARIANTS:
        valid = ", ".join(v.replace("_", "-") for v in VARIANTS)
        raise ValueError(f"unknown variant {name!r}; valid: {valid}")
    return key


@dataclass(frozen=True)
class TTAVariant:
    name: str = "center_crop"
    stride: int = 1
    input_mode: str = "rgb"

    def __post_init__(self):
        if self.name not in VARIANTS:
            raise ValueError(f"unknown variant {self.name!r}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.input_mode not in ("rgb", "diff"):
            raise ValueError(f"input_mode must be rgb or diff, got {self.input_mode!r}")

    @property
    def key(self):
        return (self.name, self.stride, self.input_mode)


@dataclass
class LogitRecord:
    video_id: str
    model_id: str
    variant: TTAVariant
    logits: np.ndarray
    weight: float = 1.0

    @property
    def sort_key(self):
        return (self.video_id, self.model_id) + self.variant.key


def _video_seed(video_id):
    return int.from_bytes(hashlib.sha256(video_id.encode()).digest()[:4], "little")


def video_windows(frames, clip_len, variant, rng, num_clips=10, policy="ten_random", crop=None):
    """Raw windows ``[C, T', h, w]`` for one video under ``variant``.

    ``policy`` is ``ten_random`` (independent windows), ``ten_consecutive``
    (back-to-back windows) or ``center``; the first two yield ``num_clips``
    windows. ``crop`` is ``(base_size, crop_size)`` for resize-then-crop, or
    None to keep the native frame size.
    """
    need = frames_needed(clip_len, variant.input_mode)
    take = math.ceil(need / 2) if variant.name == "normal_reverse_concat" else need
    windows = sample_clip(frames, take, variant.stride, policy, rng, count=num_clips)
    out = []
    for w in windows:
        w = np.asarray(w, dtype=np.float64)
        if variant.name == "normal_reverse_concat":
            w = concat_normal_reverse(w)[:, :need]
        elif variant.name == "reverse_order":
            w = w[:, ::-1]
        if crop is not None:
            base, size = crop
            w = resize_bilinear(w, base)
            how = "random" if variant.name == "random_crop" else "center"
            w = crop_frames(w, size, how, float(rng.random()), float(rng.random()))
        if variant.name == "horizontal_flip":
            w = w[..., ::-1]
        out.append(np.ascontiguousarray(w))
    return out


def evaluate(model, clips, variant, dataset, num_clips=10, seed=0, model_id="model",
             policy="ten_random", crop=None, batch_size=32):
    """Average pre-softmax logits over ``num_clips`` windows per video.

    Returns ``(accuracy, records)``; records are in the order of ``clips``.
    """
    if not clips:
        raise ValueError("cannot evaluate an empty split")
    if variant.input_mode != model.config.input_mode:
        raise ValueError(
            f"variant input mode {variant.input_mode} does not match model input mode {model.config.input_mode}"
        )
    mean, std = input_stats(dataset, variant.input_mode)
    sym = dataset.symmetry
    flipped = variant.name == "horizontal_flip"
    reversed_ = variant.name == "reverse_order"
    model.eval()
    records, correct = [], 0
    try:
        with no_grad():
            for clip in clips:
                rng = rng_for(seed, EVAL_STREAM, _video_seed(clip.id))
                wins = video_windows(clip.frames, model.clip_len, variant, rng, num_clips, policy, crop)
                x = np.stack([to_model_input(w, variant.input_mode, mean, std) for w in wins])
                logits = np.concatenate([
                    model(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)
                ])
                logits = sym.unmap_logits(logits, flipped, reversed_)
                avg = logits.mean(axis=0)
                records.append(LogitRecord(clip.id, model_id, variant, avg))
                correct += int(np.argmax(avg) == clip.label)
    finally:
        model.train()
    return correct / len(clips), records


def accuracy(predictions, labels):
    predictions, labels = list(predictions), list(labels)
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions but {len(labels)} labels")
    if not labels:
        raise ValueError("accuracy of an empty set is undefined")
    return sum(int(p == y) for p, y in zip(predictions, labels)) / len(labels)


# logit files

HEADER = "#TGLOGITS 1"


def export_logits(records, path, labels=None, append=False):
    """Write records sorted by (video, model, variant).

    ``labels`` (video_id -> class) are stored as ``#label`` comment lines so
    ensembles can be scored without the dataset.
    """
    records = sorted(records, key=lambda r: r.sort_key)
    widths = {len(r.logits) for r in records}
    if len(widths) > 1:
        raise ValueError(f"records disagree on the number of classes: {sorted(widths)}")
    if not records:
        if not append:
            open(path, "w").close()
        return
    (k,) = widths
    lines = []
    exists = False
    if append:
        try:
            with open(path) as fh:
                first = fh.readline().split()
            exists = bool(first)
            if exists and (first[:2] != HEADER.split() or int(first[2]) != k):
                raise ValueError(f"{path}: existing file has a different header")
        except FileNotFoundError:
            exists = False
    if not exists:
        lines.append(f"{HEADER} {k}")
    if labels:
        seen = sorted({r.video_id for r in records})
        lines += [f"#label\t{v}\t{labels[v]}" for v in seen if v in labels]
    for r in records:
        vals = "\t".join(format(float(v), ".17g") for v in r.logits)
        lines.append(
            f"{r.video_id}\t{r.model_id}\t{r.variant.name}\t{r.variant.stride}\t"
            f"{r.variant.input_mode}\t{format(float(r.weight), '.17g')}\t{vals}"
        )
    with open(path, "a" if append else "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_logits(path):
    """Returns ``(records, labels)``."""
    records, labels = [], {}
    k = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#TGLOGITS"):
                parts = line.split()
                if parts[1] != "1":
                    raise ValueError(f"{path}:{lineno}: unsupported logit file version {parts[1]}")
                if k is not None and int(parts[2]) != k:
                    raise ValueError(f"{path}:{lineno}: class count changes mid-file")
                k = int(parts[2])
                continue
            if line.startswith("#label\t"):
                _, vid, lab = line.split("\t")
                labels[vid] = int(lab)
                continue
            if line.startswith("#"):
                continue
            if k is None:
                raise ValueError(f"{path}: missing #TGLOGITS header")
            f = line.split("\t")
            if len(f) != 6 + k:
                raise ValueError(f"{path}:{lineno}: expected {6 + k} fields, got {len(f)}")
            variant = TTAVariant(f[2], int(f[3]), f[4])
            records.append(LogitRecord(f[0], f[1], variant, np.array([float(v) for v in f[6:]]), float(f[5])))
    return records, labels


# ensembles


@dataclass(frozen=True)
class EnsembleMember:
    model_id: str
    variant: TTAVariant
    multiplicity: int = 1

    def __post_init__(self):
        if self.multiplicity < 1:
            raise ValueError("multiplicity must be a positive integer")


@dataclass
class EnsembleSpec:
    members: list = field(default_factory=list)

    @classmethod
    def parse(cls, text):
        """``model:variant[:stride[:mode]][*mult]`` entries separated by commas or whitespace."""
        members = []
        for item in text.replace(",", " ").split():
            body, _, mult = item.partition("*")
            parts = body.split(":")
            if len(parts) < 2:
                raise ValueError(f"ensemble member {item!r} needs at least model:variant")
            stride = int(parts[2]) if len(parts) > 2 else 1
            mode = parts[3] if len(parts) > 3 else "rgb"
            variant = TTAVariant(variant_from_cli(parts[1]), stride, mode)
            members.append(EnsembleMember(parts[0], variant, int(mult) if mult else 1))
        if not members:
            raise ValueError("ensemble spec has no members")
        return cls(members)


def ensemble(spec, records, labels=None):
    """Weighted mean of pre-softmax logits per video.

    Returns ``(fused, accuracy)`` where ``fused`` maps video id to logits and
    accuracy is None without labels.
    """
    table = {}
    for r in records:
        table[(r.video_id, r.model_id, r.variant.key)] = r
    videos = sorted({r.video_id for r in records})
    fused = {}
    for vid in videos:
        total, norm = None, 0.0
        for m in spec.members:
            rec = table.get((vid, m.model_id, m.variant.key))
            if rec is None:
                name, stride, mode = m.variant.key
                raise KeyError(f"missing logits for video {vid}, model {m.model_id}, variant {name}:{stride}:{mode}")
            w = m.multiplicity * rec.weight
            total = w * rec.logits if total is None else total + w * rec.logits
            norm += w
        fused[vid] = total / norm
    acc = None
    if labels is not None:
        scored = [v for v in videos if v in labels]
        acc = accuracy([int(np.argmax(fused[v])) for v in scored], [labels[v] for v in scored])
    return fused, acc
