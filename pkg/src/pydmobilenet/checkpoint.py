"""Binary checkpoint container.

Layout (all integers 32-bit little-endian)::

    b"PYDN" | version | name_len | name (utf-8) | epoch
    then, until end of file, one record per tensor:
    name_len | name | dtype tag (0 = float32) | rank | dims... | float32 payload

Tensor names are prefixed ``param/``, ``buffer/`` (BN running statistics),
``velocity/`` (optimizer state) or ``meta/`` (auxiliary arrays such as the
input normalization).  The whole file is parsed and validated before
anything is copied into a model.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"PYDN"
VERSION = 1
DTYPE_F32 = 0


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_name: str
    epoch: int
    tensors: dict

    def section(self, prefix: str) -> dict:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _u32(n: int) -> bytes:
    return struct.pack("<I", n)


def _record(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = _u32(len(raw)) + raw + _u32(DTYPE_F32) + _u32(arr.ndim)
    head += b"".join(_u32(d) for d in arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode_checkpoint(model_name: str, epoch: int, tensors: dict) -> bytes:
    name = model_name.encode("utf-8")
    parts = [MAGIC, _u32(VERSION), _u32(len(name)), name, _u32(epoch)]
    parts += [_record(k, v) for k, v in tensors.items()]
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated or corrupt checkpoint while reading {what}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def text(self, what: str) -> str:
        raw = self.take(self.u32(f"{what} length"), what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{what} is not valid UTF-8") from None

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    @property
    def done(self) -> bool:
        return self.pos == len(self.raw)


def decode_checkpoint(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    model_name = r.text("model name")
    epoch = r.u32("epoch")
    tensors = {}
    while not r.done:
        name = r.text("tensor name")
        tag = r.u32("dtype tag")
        if tag != DTYPE_F32:
            raise CheckpointError(f"tensor {name!r}: unknown dtype tag {tag}")
        rank = r.u32("rank")
        if rank > 8:
            raise CheckpointError(f"tensor {name!r}: implausible rank {rank}")
        dims = tuple(r.u32("dims") for _ in range(rank))
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        payload = r.take(4 * count, f"payload of {name!r}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return Checkpoint(model_name, epoch, tensors)


def model_tensors(model, optimizer=None) -> dict:
    out = {f"param/{k}": p.value for k, p in model.named_params()}
    out.update({f"buffer/{k}": b for k, b in model.named_buffers()})
    if optimizer is not None:
        names = [k for k, _ in model.named_params()]
        out.update({f"velocity/{k}": v for k, v in zip(names, optimizer.velocity)})
    return out


def save_checkpoint(path, model, optimizer=None, epoch: int = 0, extra=None) -> None:
    """Atomic write; ``extra`` maps names (e.g. ``meta/normalization``) to additional arrays."""
    tensors = model_tensors(model, optimizer)
    tensors.update(extra or {})
    data = encode_checkpoint(model.name, epoch, tensors)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    return decode_checkpoint(path.read_bytes())


def restore(ckpt: Checkpoint, model, optimizer=None, strict_name: bool = True) -> None:
    """Copy checkpoint tensors into ``model`` (and ``optimizer``) after full validation."""
    if strict_name and ckpt.model_name != model.name:
        raise CheckpointError(f"checkpoint is for {ckpt.model_name!r}, model is {model.name!r}")
    params = dict(model.named_params())
    buffers = dict(model.named_buffers())
    saved_p, saved_b = ckpt.section("param"), ckpt.section("buffer")
    if set(saved_p) != set(params):
        missing = sorted(set(params) ^ set(saved_p))[:3]
        raise CheckpointError(f"parameter names differ from the model, e.g. {missing}")
    for name, p in params.items():
        if saved_p[name].shape != p.value.shape:
            raise CheckpointError(f"{name}: checkpoint shape {saved_p[name].shape} != model {p.value.shape}")
    for name, b in buffers.items():
        if name not in saved_b or saved_b[name].shape != b.shape:
            raise CheckpointError(f"buffer {name} missing or mis-shaped")
    velocity = ckpt.section("velocity")
    if optimizer is not None and velocity and set(velocity) != set(params):
        raise CheckpointError("optimizer state does not match the model parameters")

    for name, p in params.items():
        p.value[...] = saved_p[name]
    for name, b in buffers.items():
        b[...] = saved_b[name]
    if optimizer is not None and velocity:
        for (name, _), v in zip(model.named_params(), optimizer.velocity):
            v[...] = velocity[name]


def build_from_checkpoint(ckpt: Checkpoint, **kw):
    """Instantiate the named standard network and load the checkpoint into it."""
    from .models import NetworkConfig, build_network

    weight = ckpt.tensors.get("param/classifier.weight")
    if weight is None:
        raise CheckpointError("checkpoint has no classifier weight")
    cfg = NetworkConfig.from_name(ckpt.model_name, classes=weight.shape[0], **kw)
    model = build_network(cfg)
    restore(ckpt, model)
    return model
