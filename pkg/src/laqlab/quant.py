"""Grouped uniform weight quantization with straight-through gradients.

Per group of ``g`` consecutive row elements::

    q = clip(round(w / s + z), 0, 2^b - 1)      w_hat = s * (q - z)

The trainable layer :class:`QuantizedLinear` additionally carries a learnable
clipping range (group min/max shrunk by ``sigmoid(logit)``) and a positive
per-input-channel scale ``cs``: the layer computes ``(x / cs) @ Q(w * cs)^T``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch
from torch import nn

from laqlab import kernels

SCALE_FLOOR = 1e-8
# sigmoid(8) = 0.99966: the clip range starts at (almost) the full group range
CLIP_INIT = 8.0
PROJECTIONS = ("q", "k", "v", "o", "gate", "up", "down")
TILES = (64, 128, 256)


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 3
    group_size: int = 32

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if self.group_size <= 0:
            raise ValueError(f"group_size must be positive, got {self.group_size}")

    @property
    def qmax(self) -> int:
        return 2**self.bits - 1

    def n_groups(self, in_features: int) -> int:
        if in_features % self.group_size:
            raise ValueError(f"in-features {in_features} not divisible by group size {self.group_size}")
        return in_features // self.group_size


class _RoundClip(torch.autograd.Function):
    """``s * (clip(round(w/s + z), 0, qmax) - z)`` with STE on ``w``.

    Gradients for ``s`` and ``z`` hold the integer code fixed, which is the
    exact derivative of the forward away from rounding boundaries.
    """

    @staticmethod
    def forward(ctx, w, s, z, qmax):
        u = torch.round(w / s + z)
        inside = (u >= 0) & (u <= qmax)
        q = u.clamp(0, qmax)
        ctx.save_for_backward(inside, q, s, z)
        return s * (q - z)

    @staticmethod
    def backward(ctx, g):
        inside, q, s, z = ctx.saved_tensors
        return g * inside, g * (q - z), -g * s, None


def _per_element(t: torch.Tensor, group_size: int) -> torch.Tensor:
    return t.repeat_interleave(group_size, dim=-1)


def group_minmax(w: torch.Tensor, group_size: int) -> tuple[torch.Tensor, torch.Tensor]:
    out, inf = w.shape
    grouped = w.reshape(out, inf // group_size, group_size)
    return grouped.amin(dim=-1), grouped.amax(dim=-1)


def codes_from(w, spec: QuantSpec, s, z, clip_logits=None, channel_scale=None) -> torch.Tensor:
    """Integer codes the forward of :func:`fake_quant` would use (as float)."""
    with torch.no_grad():
        wc = _clipped(w, spec, clip_logits, channel_scale)
        sf, zf = _per_element(s, spec.group_size), _per_element(z, spec.group_size)
        return torch.round(wc / sf + zf).clamp(0, spec.qmax)


def _clipped(w, spec, clip_logits, channel_scale):
    spec.n_groups(w.shape[-1])
    if channel_scale is not None:
        w = w * channel_scale
    if clip_logits is not None:
        low, high = clip_logits
        mn, mx = group_minmax(w, spec.group_size)
        lo = _per_element(torch.sigmoid(low) * mn, spec.group_size)
        hi = _per_element(torch.sigmoid(high) * mx, spec.group_size)
        w = torch.minimum(torch.maximum(w, lo), hi)
    return w


def fake_quant(w, spec: QuantSpec, s, z, clip_logits=None, channel_scale=None) -> torch.Tensor:
    """Quantize-dequantize ``w * channel_scale`` per group; differentiable via STE.

    ``s`` and ``z`` have shape ``[out, in / g]``; ``clip_logits`` is a
    ``(low, high)`` pair of the same shape or ``None`` to disable clipping.
    """
    if torch.any(s <= 0):
        raise ValueError("scales must be positive")
    wc = _clipped(w, spec, clip_logits, channel_scale)
    sf, zf = _per_element(s, spec.group_size), _per_element(z, spec.group_size)
    return _RoundClip.apply(wc, sf, zf, spec.qmax)


class QuantizedLinear(nn.Module):
    """Bias-free linear layer with fake-quantized weight.

    Trainable: latent ``weight``, ``log_scale``, ``zero``, ``clip_low`` /
    ``clip_high`` logits and ``log_channel_scale``. After :meth:`freeze` the
    forward uses stored integer codes.
    """

    def __init__(self, weight: torch.Tensor, spec: QuantSpec, scale, zero, clip_low=None, clip_high=None, channel_scale=None):
        super().__init__()
        out, inf = weight.shape
        ng = spec.n_groups(inf)
        self.spec = spec
        self.weight = nn.Parameter(weight.detach().clone())
        self.log_scale = nn.Parameter(torch.log(torch.as_tensor(scale).detach().clone()))
        self.zero = nn.Parameter(torch.as_tensor(zero).detach().clone())
        full = torch.full((out, ng), CLIP_INIT)
        self.clip_low = nn.Parameter(full.clone() if clip_low is None else torch.as_tensor(clip_low).clone())
        self.clip_high = nn.Parameter(full.clone() if clip_high is None else torch.as_tensor(clip_high).clone())
        cs = torch.ones(inf) if channel_scale is None else torch.as_tensor(channel_scale)
        self.log_channel_scale = nn.Parameter(torch.log(cs.detach().clone()))
        self.register_buffer("frozen_codes", None)
        self.register_buffer("frozen_scales", None)
        self.register_buffer("frozen_channel_scale", None)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def scales(self) -> torch.Tensor:
        if self.frozen_scales is not None:
            return self.frozen_scales
        return torch.exp(self.log_scale)

    def channel_scale(self) -> torch.Tensor:
        if self.frozen_channel_scale is not None:
            return self.frozen_channel_scale
        return torch.exp(self.log_channel_scale)

    def quant_parameters(self) -> list[nn.Parameter]:
        return [self.log_scale, self.zero, self.clip_low, self.clip_high, self.log_channel_scale]

    def codes(self) -> torch.Tensor:
        if self.frozen_codes is not None:
            return self.frozen_codes
        return codes_from(
            self.weight, self.spec, self.scales(), self.zero, (self.clip_low, self.clip_high), self.channel_scale()
        )

    def quantized_weight(self) -> torch.Tensor:
        """``w_hat`` in the channel-scaled basis (what the codes encode)."""
        if self.frozen_codes is not None:
            sf = _per_element(self.scales(), self.spec.group_size)
            zf = _per_element(self.zero, self.spec.group_size)
            return sf * (self.frozen_codes - zf)
        return fake_quant(
            self.weight, self.spec, self.scales(), self.zero, (self.clip_low, self.clip_high), self.channel_scale()
        )

    def effective_weight(self) -> torch.Tensor:
        """Dense matrix ``W_eff`` with ``forward(x) == x @ W_eff^T``."""
        return self.quantized_weight() / self.channel_scale()

    def forward(self, x):
        return (x / self.channel_scale()) @ self.quantized_weight().T

    def freeze(self, scales=None, channel_scale=None) -> "QuantizedLinear":
        with torch.no_grad():
            codes = self.codes().detach().clone()
            self.frozen_scales = (self.scales() if scales is None else scales).detach().clone()
            self.frozen_channel_scale = (
                self.channel_scale() if channel_scale is None else channel_scale
            ).detach().clone()
            self.frozen_codes = codes
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def unfreeze(self) -> "QuantizedLinear":
        self.frozen_codes = self.frozen_scales = self.frozen_channel_scale = None
        for p in self.parameters():
            p.requires_grad_(True)
        return self

    @property
    def frozen(self) -> bool:
        return self.frozen_codes is not None

    def export(self) -> dict[str, np.ndarray]:
        with torch.no_grad():
            return {
                "codes": self.codes().numpy().astype(np.uint8),
                "scales": self.scales().numpy().copy(),
                "zeros": self.zero.numpy().copy(),
                "clip_low": self.clip_low.numpy().copy(),
                "clip_high": self.clip_high.numpy().copy(),
                "channel_scale": self.channel_scale().numpy().copy(),
            }

    @classmethod
    def from_export(cls, record: Mapping[str, np.ndarray], spec: QuantSpec) -> "QuantizedLinear":
        """Frozen layer rebuilt from stored codes (latent weight = dequantized)."""
        codes = torch.as_tensor(np.asarray(record["codes"], dtype=np.float64))
        s = torch.as_tensor(np.asarray(record["scales"], dtype=np.float64))
        z = torch.as_tensor(np.asarray(record["zeros"], dtype=np.float64))
        cs = torch.as_tensor(np.asarray(record["channel_scale"], dtype=np.float64))
        w = _per_element(s, spec.group_size) * (codes - _per_element(z, spec.group_size)) / cs
        layer = cls(
            w, spec, s, z,
            torch.as_tensor(np.asarray(record["clip_low"], dtype=np.float64)),
            torch.as_tensor(np.asarray(record["clip_high"], dtype=np.float64)),
            cs,
        )
        layer.frozen_codes = codes
        layer.freeze(scales=s, channel_scale=cs)
        return layer

    def extra_repr(self) -> str:
        return f"{self.in_features}->{self.out_features}, W{self.spec.bits}G{self.spec.group_size}"


def init_from_weights(w, spec: QuantSpec) -> QuantizedLinear:
    """Min/max init per group: ``s = (max - min) / qmax``, ``z = round(-min / s)``."""
    w = torch.as_tensor(w, dtype=torch.float64)
    spec.n_groups(w.shape[1])
    mn, mx = group_minmax(w, spec.group_size)
    s = torch.clamp((mx - mn) / spec.qmax, min=SCALE_FLOOR)
    z = torch.round(-mn / s)
    return QuantizedLinear(w, spec, s, z)


# ---------------------------------------------------------------- packing


def pack(codes, bits: int) -> np.ndarray:
    """Pack codes LSB-first into 32-bit words; pads with zero codes."""
    if bits not in (3, 4):
        raise ValueError(f"packing supports 3 or 4 bits, got {bits}")
    codes = np.asarray(codes).ravel()
    bad = np.flatnonzero((codes < 0) | (codes > 2**bits - 1) | (codes != np.round(codes)))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"code at index {i} = {codes[i]} outside [0, {2**bits - 1}]")
    block = 32 if bits == 3 else 8
    padded = np.zeros(-(-codes.size // block) * block, dtype=np.uint8)
    padded[: codes.size] = codes
    return kernels.pack_codes(padded, bits)


def unpack(words, bits: int, count: int) -> np.ndarray:
    if bits not in (3, 4):
        raise ValueError(f"packing supports 3 or 4 bits, got {bits}")
    words = np.ascontiguousarray(words, dtype=np.uint32)
    if count * bits > words.size * 32:
        raise ValueError(f"{words.size} words hold fewer than {count} {bits}-bit codes")
    return kernels.unpack_codes(words, bits, count)


@dataclass
class PackedLinear:
    bits: int
    words: np.ndarray
    scales: np.ndarray
    zeros: np.ndarray
    out_features: int
    in_features: int
    group_size: int
    channel_scale: np.ndarray | None = field(default=None)

    @classmethod
    def from_quantized(cls, layer: QuantizedLinear) -> "PackedLinear":
        rec = layer.export()
        return cls.from_arrays(rec["codes"], rec["scales"], rec["zeros"], layer.spec, rec["channel_scale"])

    @classmethod
    def from_arrays(cls, codes, scales, zeros, spec: QuantSpec, channel_scale=None) -> "PackedLinear":
        codes = np.asarray(codes)
        out, inf = codes.shape
        return cls(
            bits=spec.bits,
            words=pack(codes, spec.bits),
            scales=np.ascontiguousarray(scales, dtype=np.float64),
            zeros=np.ascontiguousarray(zeros, dtype=np.float64),
            out_features=out,
            in_features=inf,
            group_size=spec.group_size,
            channel_scale=None if channel_scale is None else np.asarray(channel_scale, dtype=np.float64),
        )

    def codes(self) -> np.ndarray:
        return unpack(self.words, self.bits, self.out_features * self.in_features).reshape(
            self.out_features, self.in_features
        )

    def dequantized(self) -> np.ndarray:
        """Dense ``s * (q - z)`` (channel-scaled basis)."""
        s = np.repeat(self.scales, self.group_size, axis=1)
        z = np.repeat(self.zeros, self.group_size, axis=1)
        return s * (self.codes().astype(np.float64) - z)


def packed_gemv(p: PackedLinear, x, tile: int = 128) -> np.ndarray:
    """``y = W_hat (x / cs)`` computed straight from the packed words.

    ``tile`` is the input-column block width; every 32-element chunk inside a
    tile reloads its group's scale and zero.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.shape != (p.in_features,):
        raise ValueError(f"x has shape {x.shape}, expected ({p.in_features},)")
    if tile not in TILES:
        raise ValueError(f"tile must be one of {TILES}, got {tile}")
    if p.in_features % tile:
        raise ValueError(f"tile {tile} does not divide in-features {p.in_features}")
    if p.group_size % 32:
        raise ValueError(f"group size {p.group_size} is not a multiple of 32")
    if p.channel_scale is not None:
        x = x / p.channel_scale
    return kernels.packed_gemv(
        p.words, p.scales, p.zeros, x, p.out_features, p.in_features, p.group_size, p.bits, tile
    )


def dense_gemv(p: PackedLinear, x) -> np.ndarray:
    """Reference: unpack, dequantize, dense matrix-vector product."""
    x = np.asarray(x, dtype=np.float64)
    if p.channel_scale is not None:
        x = x / p.channel_scale
    return p.dequantized() @ x


def rtn_quantize(model, spec: QuantSpec):
    """Round-to-nearest copy of ``model``: min/max init on every projection, frozen."""
    student = copy.deepcopy(model)
    for block in student.blocks:
        for name in PROJECTIONS:
            layer = getattr(block, name)
            w = layer.effective_weight() if isinstance(layer, QuantizedLinear) else layer.weight
            setattr(block, name, init_from_weights(w.detach(), spec).freeze())
    return student
