"""Flat ``key = value`` run configuration.

Keys are grouped by prefix: ``model.``, ``data.``, ``augment.``, ``train.``,
``eval.`` and ``stage<i>.`` for the stages of a training plan. Unknown keys
are errors. Seeds are not read from the file; they fan out from ``--seed``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

from .data import AugmentConfig, SyntheticSpec
from .models import ModelConfig, _as_bool
from .optim import OptimConfig
from .train import TrainPlan, TrainStage


class ConfigError(ValueError):
    pass


def derive_seed(seed, stream):
    """Independent sub-seed for a named stream (data, init, augment, eval)."""
    digest = hashlib.sha256(f"{int(seed)}:{stream}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def parse_kv(text, source="<config>"):
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _tuple(value, cast):
    return tuple(cast(v) for v in value.replace(",", " ").split())


def _coerce(cls, key, value):
    """Convert a string to the type of the matching default of ``cls``."""
    default = getattr(cls(), key)
    if isinstance(default, bool):
        return _as_bool(value)
    if isinstance(default, tuple):
        cast = type(default[0]) if default else float
        return _tuple(value, cast)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def _build(cls, kv, prefix, skip=()):
    names = {f.name for f in fields(cls)} - set(skip)
    kw = {}
    for key, value in kv.items():
        name = key[len(prefix):]
        if name not in names:
            raise ConfigError(f"unknown key {key!r}")
        kw[name] = _coerce(cls, name, value)
    return kw


STAGE_KEYS = ("clip_len", "shift_enabled", "epochs", "augment", "promotion_threshold")
OPTIM_KEYS = tuple(f.name for f in fields(OptimConfig))
TRAIN_KEYS = ("eval_every", "batch_size", "val_fraction", "stages")
EVAL_KEYS = ("num_clips", "policy", "batch_size", "crop")


@dataclass(frozen=True)
class EvalOptions:
    num_clips: int = 10
    policy: str = "ten_random"
    batch_size: int = 32
    crop: bool = False


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    stages: list = field(default_factory=list)
    stage_augment: list = field(default_factory=list)
    eval_every: int = 1
    batch_size: int = 16
    val_fraction: float = 0.1
    eval: EvalOptions = field(default_factory=EvalOptions)
    seed: int = 42

    @classmethod
    def parse(cls, text, seed=42, source="<config>"):
        kv = parse_kv(text, source)
        groups = {}
        for key, value in kv.items():
            prefix, dot, _ = key.partition(".")
            if not dot:
                raise ConfigError(f"{source}: key {key!r} has no section prefix")
            groups.setdefault(prefix, {})[key] = value
        try:
            return cls._from_groups(groups, seed)
        except ConfigError:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"{source}: {exc}") from exc

    @classmethod
    def _from_groups(cls, groups, seed):
        cfg = cls(seed=seed)
        model_kv = {k[len("model."):]: v for k, v in groups.pop("model", {}).items()}
        cfg.model = ModelConfig.from_dict(model_kv)
        data_kw = _build(SyntheticSpec, groups.pop("data", {}), "data.", skip=("seed",))
        cfg.data = SyntheticSpec(**data_kw, seed=derive_seed(seed, "data"))
        aug_kw = _build(AugmentConfig, groups.pop("augment", {}), "augment.", skip=("seed",))
        cfg.augment = AugmentConfig(**aug_kw, seed=derive_seed(seed, "augment"))
        train_kv = groups.pop("train", {})
        for key in train_kv:
            if key[len("train."):] not in TRAIN_KEYS:
                raise ConfigError(f"unknown key {key!r}")
        n_stages = int(train_kv.get("train.stages", 1))
        cfg.eval_every = int(train_kv.get("train.eval_every", 1))
        cfg.batch_size = int(train_kv.get("train.batch_size", 16))
        cfg.val_fraction = float(train_kv.get("train.val_fraction", 0.1))
        eval_kw = _build(EvalOptions, groups.pop("eval", {}), "eval.")
        cfg.eval = EvalOptions(**eval_kw)
        for i in range(n_stages):
            stage, use_aug = cls._stage(groups.pop(f"stage{i}", {}), i, cfg.model)
            cfg.stages.append(stage)
            cfg.stage_augment.append(use_aug)
        if groups:
            raise ConfigError(f"unknown keys {sorted(k for g in groups.values() for k in g)}")
        return cfg

    @staticmethod
    def _stage(kv, i, model):
        prefix = f"stage{i}."
        optim_kw, stage_kw = {}, {"clip_len": model.clip_len, "shift_enabled": model.shift.enabled,
                                  "epochs": 60}
        use_aug = False
        for key, value in kv.items():
            name = key[len(prefix):]
            if name in OPTIM_KEYS:
                optim_kw[name] = _coerce(OptimConfig, name, value)
            elif name == "augment":
                use_aug = _as_bool(value)
            elif name == "promotion_threshold":
                stage_kw[name] = None if value.lower() in ("", "none") else float(value)
            elif name in ("clip_len", "epochs"):
                stage_kw[name] = int(value)
            elif name == "shift_enabled":
                stage_kw[name] = _as_bool(value)
            else:
                raise ConfigError(f"unknown key {key!r}")
        return TrainStage(optim=OptimConfig(**optim_kw), **stage_kw), use_aug

    def plan(self, checkpoint_dir=None):
        stages = [replace(s, augment=self.augment if a else None)
                  for s, a in zip(self.stages, self.stage_augment)]
        return TrainPlan(stages, self.eval_every, checkpoint_dir, derive_seed(self.seed, "augment"),
                         self.batch_size, self.val_fraction)

    @property
    def init_seed(self):
        return derive_seed(self.seed, "init")

    @property
    def eval_seed(self):
        return derive_seed(self.seed, "eval")

    def text(self):
        """The fully resolved config, defaults included."""
        lines = [f"# resolved with --seed {self.seed}"]
        lines += [f"model.{line}" for line in self.model.text().splitlines()]
        for f in fields(SyntheticSpec)[:-1]:
            lines.append(f"data.{f.name} = {_fmt(getattr(self.data, f.name))}")
        for f in fields(AugmentConfig)[:-1]:
            lines.append(f"augment.{f.name} = {_fmt(getattr(self.augment, f.name))}")
        lines += [f"train.stages = {len(self.stages)}", f"train.eval_every = {self.eval_every}",
                  f"train.batch_size = {self.batch_size}", f"train.val_fraction = {self.val_fraction}"]
        for i, (s, a) in enumerate(zip(self.stages, self.stage_augment)):
            p = f"stage{i}."
            lines += [f"{p}clip_len = {s.clip_len}", f"{p}shift_enabled = {_fmt(s.shift_enabled)}",
                      f"{p}epochs = {s.epochs}", f"{p}augment = {_fmt(a)}",
                      f"{p}promotion_threshold = {_fmt(s.promotion_threshold)}"]
            lines += [f"{p}{k} = {getattr(s.optim, k)}" for k in OPTIM_KEYS]
        for f in fields(EvalOptions):
            lines.append(f"eval.{f.name} = {_fmt(getattr(self.eval, f.name))}")
        text = "\n".join(lines) + "\n"
        # seed lines are comments: the resolved file re-parses to the same config
        seeds = (f"# data.seed = {self.data.seed}\n# augment.seed = {self.augment.seed}\n"
                 f"# init_seed = {self.init_seed}\n# eval_seed = {self.eval_seed}\n")
        return text + seeds


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def parse_spec(text, seed=42, source="<spec>"):
    """A dataset spec: ``data.``-prefixed or bare SyntheticSpec keys."""
    kv = parse_kv(text, source)
    kv = {(k if k.startswith("data.") else f"data.{k}"): v for k, v in kv.items()}
    try:
        kw = _build(SyntheticSpec, kv, "data.", skip=("seed",))
        return SyntheticSpec(**kw, seed=derive_seed(seed, "data"))
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{source}: {exc}") from exc
