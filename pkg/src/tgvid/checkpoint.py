"""Versioned binary checkpoints.

Layout: ``TGCKPT01``, a u32-length-prefixed UTF-8 text block (run metadata
followed by a ``[model]`` section of ``key = value`` lines), then one entry
per array until EOF: u32 name length, name, u32 rank, u32 extents, raw
little-endian float64 values. Entry names are namespaced ``param:``,
``momentum:`` and ``buffer:``; parameters come first in construction order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .models import ModelConfig, build_model

MAGIC = b"TGCKPT01"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    parameters: dict
    optimizer_state: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    epoch: int = 0
    rng_seed: int = 0
    extra: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def snapshot(model, epoch=0, rng_seed=0, extra=None):
    params = model.named_parameters()
    buffers = {}
    for name, st in model.named_buffers().items():
        buffers[f"{name}.running_mean"] = st.mean.copy()
        buffers[f"{name}.running_var"] = st.var.copy()
        buffers[f"{name}.tracked"] = np.array([1.0 if st.tracked else 0.0])
    return Checkpoint(
        config=model.config,
        parameters={p.name: p.data.copy() for p in params},
        optimizer_state={p.name: p.momentum_buffer.copy() for p in params if p.momentum_buffer is not None},
        buffers=buffers,
        epoch=epoch,
        rng_seed=rng_seed,
        extra=dict(extra or {}),
    )


def restore(ckpt, model=None):
    """Load arrays into ``model`` (built fresh from the checkpoint config when omitted)."""
    if model is None:
        model = build_model(ckpt.config, ckpt.rng_seed)
    elif model.config.hash() != ckpt.config.hash():
        raise ValueError("checkpoint config does not match the model config")
    params = model.named_parameters()
    names = [p.name for p in params]
    if names != list(ckpt.parameters):
        missing = set(names) ^ set(ckpt.parameters)
        raise ValueError(f"checkpoint parameters do not match the model: {sorted(missing)[:5]}")
    for p in params:
        arr = ckpt.parameters[p.name]
        if arr.shape != p.shape:
            raise ValueError(f"{p.name}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data = arr.copy()
        p.grad = None
        buf = ckpt.optimizer_state.get(p.name)
        p.momentum_buffer = None if buf is None else buf.copy()
    for name, st in model.named_buffers().items():
        if f"{name}.running_mean" in ckpt.buffers:
            st.mean = ckpt.buffers[f"{name}.running_mean"].copy()
            st.var = ckpt.buffers[f"{name}.running_var"].copy()
            st.tracked = bool(ckpt.buffers[f"{name}.tracked"][0])
    return model


def _header_text(ckpt):
    lines = [
        f"format_version = {ckpt.format_version}",
        f"epoch = {ckpt.epoch}",
        f"rng_seed = {ckpt.rng_seed}",
        f"config_hash = {ckpt.config.hash()}",
    ]
    lines += [f"extra.{k} = {v}" for k, v in sorted(ckpt.extra.items())]
    return "\n".join(lines) + "\n[model]\n" + ckpt.config.text()


def save_checkpoint(ckpt, path):
    text = _header_text(ckpt).encode("utf-8")
    entries = [("param:", ckpt.parameters), ("momentum:", ckpt.optimizer_state), ("buffer:", ckpt.buffers)]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        for prefix, arrays in entries:
            for name, arr in arrays.items():
                key = (prefix + name).encode("utf-8")
                arr = np.asarray(arr, dtype="<f8")
                fh.write(struct.pack("<I", len(key)))
                fh.write(key)
                fh.write(struct.pack("<I", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(arr.tobytes())


def _parse_text(text):
    meta, model = {}, {}
    target = meta
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line == "[model]":
            target = model
            continue
        key, _, value = line.partition("=")
        target[key.strip()] = value.strip()
    return meta, model


def load_checkpoint(path, expected_config=None):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack_from("<I", buf, 8)
    pos = 12 + n
    meta, model_kv = _parse_text(buf[12:pos].decode("utf-8"))
    version = int(meta["format_version"])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    config = ModelConfig.from_dict(model_kv)
    if config.hash() != meta["config_hash"]:
        raise ValueError(f"{path}: stored config hash does not match its config block")
    if expected_config is not None and expected_config.hash() != config.hash():
        raise ValueError(
            f"{path}: config hash {config.hash()} does not match expected {expected_config.hash()}"
        )
    groups = {"param:": {}, "momentum:": {}, "buffer:": {}}
    while pos < len(buf):
        (klen,) = struct.unpack_from("<I", buf, pos)
        key = buf[pos + 4:pos + 4 + klen].decode("utf-8")
        pos += 4 + klen
        (rank,) = struct.unpack_from("<I", buf, pos)
        shape = struct.unpack_from(f"<{rank}I", buf, pos + 4)
        pos += 4 + 4 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(buf, "<f8", count, pos).reshape(shape).astype(np.float64)
        pos += 8 * count
        prefix = key[: key.index(":") + 1]
        groups[prefix][key[len(prefix):]] = arr
    extra = {k[len("extra."):]: v for k, v in meta.items() if k.startswith("extra.")}
    return Checkpoint(
        config=config,
        parameters=groups["param:"],
        optimizer_state=groups["momentum:"],
        buffers=groups["buffer:"],
        epoch=int(meta["epoch"]),
        rng_seed=int(meta["rng_seed"]),
        extra=extra,
        format_version=version,
    )
