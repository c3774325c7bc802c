"""LAQ1 checkpoint files.

Layout (little-endian)::

    b"LAQ1"
    u32 version | u32 bits | u32 group | u32 layer count
    u32 record count
    record*:
        u32 name length | name (utf-8)
        u32 rank | u32 dims[rank]
        u8 kind
        kind 0: f64[prod(dims)]
        kind 1: u32 word count n | u32 words[n]    (codes packed at header bits)

``bits`` and ``group`` are 0 for an unquantized model. The record count
after the header makes files self-delimiting; readers reject trailing bytes.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np
import torch

from laqlab.model import Linear, ModelConfig, ToyTransformer
from laqlab.quant import PROJECTIONS, QuantizedLinear, QuantSpec, pack, unpack

MAGIC = b"LAQ1"
VERSION = 1
KIND_F64 = 0
KIND_PACKED = 1
CONFIG_FIELDS = ("vocab", "d_model", "n_layers", "n_heads", "mlp_hidden", "max_seq", "rope_base")
QUANT_FIELDS = ("codes", "scales", "zeros", "clip_low", "clip_high", "channel_scale")


class CheckpointError(ValueError):
    pass


@dataclass
class Record:
    name: str
    data: np.ndarray  # float64 values, or integer codes when packed
    packed: bool = False


@dataclass
class Checkpoint:
    bits: int = 0
    group: int = 0
    n_layers: int = 0
    records: dict[str, Record] = field(default_factory=dict)
    version: int = VERSION

    def add(self, name: str, data, packed: bool = False) -> None:
        if name in self.records:
            raise CheckpointError(f"duplicate record {name!r}")
        arr = np.asarray(data)
        self.records[name] = Record(name, arr if packed else arr.astype(np.float64), packed)

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: r.data for n, r in self.records.items()}

    @property
    def is_packed(self) -> bool:
        return any(r.packed for r in self.records.values())


def _write_u32(f: BinaryIO, *values: int) -> None:
    f.write(struct.pack(f"<{len(values)}I", *values))


def write_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def to_bytes(ckpt: Checkpoint) -> bytes:
    f = io.BytesIO()
    f.write(MAGIC)
    _write_u32(f, ckpt.version, ckpt.bits, ckpt.group, ckpt.n_layers, len(ckpt.records))
    for rec in ckpt.records.values():
        name = rec.name.encode("utf-8")
        _write_u32(f, len(name))
        f.write(name)
        dims = rec.data.shape
        _write_u32(f, len(dims), *dims)
        if rec.packed:
            if ckpt.bits not in (3, 4):
                raise CheckpointError(f"cannot pack codes at {ckpt.bits} bits")
            words = pack(rec.data, ckpt.bits)
            f.write(struct.pack("<B", KIND_PACKED))
            _write_u32(f, words.size)
            f.write(words.astype("<u4").tobytes())
        else:
            f.write(struct.pack("<B", KIND_F64))
            f.write(np.ascontiguousarray(rec.data, dtype="<f8").tobytes())
    return f.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated file: need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, n: int = 1):
        vals = struct.unpack(f"<{n}I", self.take(4 * n))
        return vals if n != 1 else vals[0]


def from_bytes(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not an LAQ1 file (bad magic)")
    version, bits, group, n_layers, n_records = r.u32(5)
    if version != VERSION:
        raise CheckpointError(f"unsupported LAQ1 version {version}")
    ckpt = Checkpoint(bits, group, n_layers, version=version)
    for _ in range(n_records):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = tuple(r.u32(rank)) if rank > 1 else ((r.u32(),) if rank == 1 else ())
        count = math.prod(dims)
        kind = r.take(1)[0]
        if kind == KIND_F64:
            data = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
            ckpt.add(name, data)
        elif kind == KIND_PACKED:
            n_words = r.u32()
            words = np.frombuffer(r.take(4 * n_words), dtype="<u4").astype(np.uint32)
            ckpt.add(name, unpack(words, bits, count).reshape(dims), packed=True)
        else:
            raise CheckpointError(f"record {name!r} has unknown payload kind {kind}")
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last record")
    return ckpt


def read_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def pack_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    """Same content with every code record stored as packed words."""
    if ckpt.bits not in (3, 4):
        raise CheckpointError(f"packing needs a 3- or 4-bit checkpoint, this one has bits={ckpt.bits}")
    out = Checkpoint(ckpt.bits, ckpt.group, ckpt.n_layers, version=ckpt.version)
    for name, rec in ckpt.records.items():
        if name.endswith(".codes"):
            out.add(name, np.asarray(rec.data).astype(np.uint8), packed=True)
        else:
            out.add(name, rec.data, rec.packed)
    return out


def unpack_checkpoint(ckpt: Checkpoint) -> Checkpoint:
    out = Checkpoint(ckpt.bits, ckpt.group, ckpt.n_layers, version=ckpt.version)
    for name, rec in ckpt.records.items():
        out.add(name, np.asarray(rec.data, dtype=np.float64))
    return out


# ------------------------------------------------------------ model <-> file


def model_to_checkpoint(model: ToyTransformer, extra: dict[str, np.ndarray] | None = None) -> Checkpoint:
    cfg = model.cfg
    specs = {
        p.spec for b in model.blocks for p in b.projections().values() if isinstance(p, QuantizedLinear)
    }
    if len(specs) > 1:
        raise CheckpointError("mixed quantization specs are not supported")
    spec = specs.pop() if specs else None
    ckpt = Checkpoint(spec.bits if spec else 0, spec.group_size if spec else 0, cfg.n_layers)
    ckpt.add("config", np.array([float(getattr(cfg, k)) for k in CONFIG_FIELDS]))
    with torch.no_grad():
        ckpt.add("embed", model.embed.numpy())
        ckpt.add("head", model.head.numpy())
        ckpt.add("final_norm", model.final_norm.numpy())
        for l, block in enumerate(model.blocks):
            ckpt.add(f"blocks.{l}.attn_norm", block.attn_norm.numpy())
            ckpt.add(f"blocks.{l}.mlp_norm", block.mlp_norm.numpy())
            for name in PROJECTIONS:
                p = getattr(block, name)
                if isinstance(p, QuantizedLinear):
                    if not p.frozen:
                        raise CheckpointError(f"blocks.{l}.{name} is still trainable; freeze before saving")
                    rec = p.export()
                    for key in QUANT_FIELDS:
                        ckpt.add(f"blocks.{l}.{name}.{key}", rec[key])
                else:
                    ckpt.add(f"blocks.{l}.{name}.weight", p.weight.numpy())
    for name, arr in (extra or {}).items():
        ckpt.add(name, arr)
    return ckpt


def _cfg_from(arr: np.ndarray) -> ModelConfig:
    if arr.shape != (len(CONFIG_FIELDS),):
        raise CheckpointError("config record has the wrong length")
    vals = {k: (float(v) if k == "rope_base" else int(v)) for k, v in zip(CONFIG_FIELDS, arr)}
    return ModelConfig(**vals)


def checkpoint_to_model(ckpt: Checkpoint) -> ToyTransformer:
    arrays = ckpt.arrays()
    if "config" not in arrays:
        raise CheckpointError("checkpoint has no config record")
    cfg = _cfg_from(arrays["config"])
    model = ToyTransformer(cfg, seed=0)
    spec = QuantSpec(ckpt.bits, ckpt.group) if ckpt.bits else None

    def get(name):
        if name not in arrays:
            raise CheckpointError(f"missing record {name!r}")
        return torch.as_tensor(np.asarray(arrays[name], dtype=np.float64).copy())

    with torch.no_grad():
        model.embed.copy_(get("embed"))
        model.head.copy_(get("head"))
        model.final_norm.copy_(get("final_norm"))
        for l, block in enumerate(model.blocks):
            block.attn_norm.copy_(get(f"blocks.{l}.attn_norm"))
            block.mlp_norm.copy_(get(f"blocks.{l}.mlp_norm"))
            for name in PROJECTIONS:
                prefix = f"blocks.{l}.{name}"
                if f"{prefix}.weight" in arrays:
                    setattr(block, name, Linear(get(f"{prefix}.weight")))
                else:
                    if spec is None:
                        raise CheckpointError(f"{prefix} is quantized but the header has bits=0")
                    rec = {k: arrays[f"{prefix}.{k}"] for k in QUANT_FIELDS}
                    setattr(block, name, QuantizedLinear.from_export(rec, spec))
    model.requires_grad_(False)
    return model


def save_model(model: ToyTransformer, path, packed: bool = False, extra=None) -> Checkpoint:
    ckpt = model_to_checkpoint(model, extra)
    if packed:
        ckpt = pack_checkpoint(ckpt)
    write_checkpoint(ckpt, path)
    return ckpt


def load_model(path) -> ToyTransformer:
    return checkpoint_to_model(read_checkpoint(path))


def config_dict(ckpt: Checkpoint) -> dict:
    return asdict(_cfg_from(ckpt.arrays()["config"]))
