"""Staged SGD training with per-sample seeded augmentation, checkpoints and resume."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .checkpoint import load_checkpoint, restore, save_checkpoint, snapshot
from .data import augment, draw_decisions, frames_needed, input_stats, rng_for, sample_clip, to_model_input
from .evaluate import TTAVariant, evaluate
from .models import build_model
from .optim import OptimConfig, sgd_step

SHUFFLE_STREAM = 0x5F1E
AUGMENT_STREAM = 0xA06E
EVAL_SEED = 0


class NumericalError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainStage:
    clip_len: int
    shift_enabled: bool = True
    epochs: int = 1
    optim: OptimConfig = field(default_factory=OptimConfig)
    augment: object = None
    promotion_threshold: float | None = None

    def __post_init__(self):
        if self.clip_len < 1:
            raise ValueError("stage clip_len must be positive")
        if self.epochs < 1:
            raise ValueError("stage epochs must be positive")
        t = self.promotion_threshold
        if t is not None and not 0 <= t <= 1:
            raise ValueError(f"promotion_threshold must lie in [0, 1], got {t}")


@dataclass(frozen=True)
class TrainPlan:
    stages: tuple
    eval_every: int = 1
    checkpoint_dir: str | None = None
    seed: int = 0
    batch_size: int = 16
    val_fraction: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ValueError("a training plan needs at least one stage")
        if self.eval_every < 1:
            raise ValueError("eval_every must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class TrainResult:
    model: object
    checkpoint: object
    log: list
    stage_accuracy: list


def configure_stage(model, stage):
    if model.config.kind == "tsm":
        model.clip_len = stage.clip_len
        model.shift_enabled = stage.shift_enabled and model.config.shift.enabled
    elif stage.clip_len != model.config.clip_len:
        raise ValueError(
            f"slowfast stages must use the model clip_len {model.config.clip_len}, got {stage.clip_len}"
        )


def training_sample(clip, clip_len, stage, dataset, mode, rng):
    """One ``(input, label)`` pair; augmentation decisions come from ``rng`` alone."""
    need = frames_needed(clip_len, mode)
    label = clip.label
    aug = stage.augment
    if aug is None:
        (window,) = sample_clip(clip.frames, need, 1, "random", rng)
        window = np.asarray(window, dtype=np.float64)
    else:
        d = draw_decisions(aug, rng)
        (window,) = sample_clip(clip.frames, need, d.stride, "random", rng)
        window = augment(window, aug, decisions=d)
        # a reversed single frame is the same frame
        label = dataset.symmetry.map_label(label, d.flip, d.reverse and need > 1)
    mean, std = input_stats(dataset, mode)
    return to_model_input(window, mode, mean, std), label


def metrics_line(epoch, lr, loss, val_acc):
    return f"epoch {epoch} lr {lr:.17g} loss {loss:.17g} val_acc {val_acc:.17g}"


def run_epoch(model, train_clips, stage, dataset, plan, stage_index, epoch):
    mode = model.config.input_mode
    order = rng_for(plan.seed, SHUFFLE_STREAM, stage_index, epoch).permutation(len(train_clips))
    params = model.named_parameters()
    losses = []
    for b, start in enumerate(range(0, len(order), plan.batch_size)):
        xs, ys = [], []
        for i in order[start:start + plan.batch_size]:
            rng = rng_for(plan.seed, AUGMENT_STREAM, stage_index, epoch, int(i))
            x, y = training_sample(train_clips[i], model.clip_len, stage, dataset, mode, rng)
            xs.append(x)
            ys.append(y)
        loss, _ = ops.softmax_cross_entropy(model(np.stack(xs)), ys)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss {value} at stage {stage_index}, epoch {epoch}, batch {b}")
        loss.backward()
        sgd_step(params, stage.optim, epoch)
        losses.append(value)
    return float(np.mean(losses))


def validate(model, val_clips, dataset):
    variant = TTAVariant("center_crop", 1, model.config.input_mode)
    acc, _ = evaluate(model, val_clips, variant, dataset, num_clips=1, seed=EVAL_SEED, policy="center")
    return acc


def _ckpt_path(plan, name):
    return os.path.join(plan.checkpoint_dir, name) if plan.checkpoint_dir else None


def train(plan, model_config, dataset, log_path=None, resume=None, init_seed=None, max_epochs=None):
    """Run every stage of ``plan``; returns a :class:`TrainResult`.

    ``resume`` is a checkpoint path written by an earlier run of the same
    plan. Metrics lines are appended to ``log_path`` as they are produced.
    ``max_epochs`` stops the call early, as if interrupted, after that many
    epochs; the latest ``last.ckpt`` resumes it.
    """
    if dataset.num_classes != model_config.num_classes:
        raise ValueError(
            f"dataset has {dataset.num_classes} classes but the model predicts {model_config.num_classes}"
        )
    train_clips, val_clips = dataset.split(plan.val_fraction)
    if not train_clips:
        raise ValueError("training split is empty")
    if not val_clips:
        raise ValueError("validation split is empty")
    if plan.checkpoint_dir:
        os.makedirs(plan.checkpoint_dir, exist_ok=True)
    init_seed = plan.seed if init_seed is None else init_seed

    log, stage_acc = [], []
    start_stage, start_epoch = 0, 0
    model = None
    if resume is not None:
        ckpt = load_checkpoint(resume, expected_config=model_config)
        model = restore(ckpt)
        start_stage = int(ckpt.extra.get("stage", 0))
        start_epoch = int(ckpt.extra.get("epoch", 0))
        stage_acc = [float(v) for v in ckpt.extra.get("stage_accuracy", "").split(",") if v]
        kept = int(ckpt.extra.get("log_lines", 0))
        if log_path and os.path.exists(log_path):
            with open(log_path) as fh:
                log = fh.read().splitlines()[:kept]
        if ckpt.extra.get("finished") == "true":
            return TrainResult(model, ckpt, log, stage_acc)
    else:
        model = build_model(model_config, init_seed)
    if log_path:
        with open(log_path, "w") as fh:
            fh.writelines(line + "\n" for line in log)

    def checkpoint(stage_i, epoch_in_stage, finished, names):
        extra = {
            "stage": stage_i,
            "epoch": epoch_in_stage,
            "finished": "true" if finished else "false",
            "log_lines": len(log),
            "stage_accuracy": ",".join(format(a, ".17g") for a in stage_acc),
        }
        ck = snapshot(model, epoch=len(log), rng_seed=init_seed, extra=extra)
        for name in names:
            path = _ckpt_path(plan, name)
            if path:
                save_checkpoint(ck, path)
        return ck

    ck = None
    budget = float("inf") if max_epochs is None else max_epochs
    for si in range(start_stage, len(plan.stages)):
        stage = plan.stages[si]
        configure_stage(model, stage)
        acc = None
        first = start_epoch if si == start_stage else 0
        promoted = False
        for epoch in range(first, stage.epochs):
            if budget <= 0:
                return TrainResult(model, ck, log, stage_acc)
            budget -= 1
            loss = run_epoch(model, train_clips, stage, dataset, plan, si, epoch)
            last = epoch == stage.epochs - 1
            acc = float("nan")
            if (epoch + 1) % plan.eval_every == 0 or last:
                acc = validate(model, val_clips, dataset)
            line = metrics_line(epoch, stage.optim.lr_at(epoch), loss, acc)
            log.append(line)
            if log_path:
                with open(log_path, "a") as fh:
                    fh.write(line + "\n")
            promoted = stage.promotion_threshold is not None and acc >= stage.promotion_threshold
            if np.isfinite(acc) and not (last or promoted):
                ck = checkpoint(si, epoch + 1, False, ["last.ckpt"])
            if promoted:
                break
        if acc is None or not np.isfinite(acc):
            acc = validate(model, val_clips, dataset)
        stage_acc.append(acc)
        final = si == len(plan.stages) - 1
        names = ["last.ckpt", f"stage{si}.ckpt"] + (["final.ckpt"] if final else [])
        # the boundary checkpoint points at the start of the next stage
        ck = checkpoint(si + 1 if not final else si, 0 if not final else stage.epochs, final, names)
    return TrainResult(model, ck, log, stage_acc)
