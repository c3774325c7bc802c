"""Toy pre-norm decoder transformer used as teacher and quantized student.

Blocks are RMSNorm -> causal multi-head attention with rotary keys/queries
-> residual, then RMSNorm -> SiLU-gated MLP -> residual. Every block exposes
its seven projections (q, k, v, o, gate, up, down) as attributes so that a
quantized student can swap them for :class:`~laqlab.quant.QuantizedLinear`.
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from laqlab.quant import PROJECTIONS, QuantizedLinear

RMS_EPS = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 64
    d_model: int = 32
    n_layers: int = 4
    n_heads: int = 4
    mlp_hidden: int = 64
    max_seq: int = 256
    rope_base: float = 10000.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.head_dim % 2:
            raise ValueError("rotary encoding needs an even head dimension")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


class Linear(nn.Module):
    """Bias-free dense projection, ``y = x @ W^T``."""

    def __init__(self, weight: torch.Tensor):
        super().__init__()
        self.weight = nn.Parameter(weight)

    def effective_weight(self) -> torch.Tensor:
        return self.weight

    def forward(self, x):
        return x @ self.weight.T


def rms_norm(x: torch.Tensor, gain: torch.Tensor) -> torch.Tensor:
    return x * torch.rsqrt((x * x).mean(dim=-1, keepdim=True) + RMS_EPS) * gain


def rope_tables(positions: torch.Tensor, head_dim: int, base: float):
    inv = base ** (-torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim)
    ang = positions[:, None].to(torch.float64) * inv[None, :]
    return torch.cos(ang), torch.sin(ang)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    """Rotate channel pairs ``(i, i + d/2)``; ``x`` is ``[B, T, H, Dh]``."""
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    c, s = cos[None, :, None, :], sin[None, :, None, :]
    return torch.cat([x1 * c - x2 * s, x1 * s + x2 * c], dim=-1)


@dataclass
class BlockTrace:
    """Intermediate values of one block on one batch."""

    input: torch.Tensor
    output: torch.Tensor
    proj: dict[str, torch.Tensor] = field(default_factory=dict)
    keys: torch.Tensor | None = None  # post-rotary [B, T, H, Dh]
    values: torch.Tensor | None = None  # [B, T, H, Dh]
    attn_probs: torch.Tensor | None = None  # [B, H, T, T]
    sites: dict[str, torch.Tensor] = field(default_factory=dict)


@dataclass
class LayerTrace:
    layers: list[BlockTrace]
    final_hidden: torch.Tensor


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        self.cfg = cfg
        d, m = cfg.d_model, cfg.mlp_hidden

        def w(out, inp):
            return torch.randn(out, inp, generator=gen) / math.sqrt(inp)

        self.attn_norm = nn.Parameter(torch.ones(d))
        self.q, self.k, self.v = Linear(w(d, d)), Linear(w(d, d)), Linear(w(d, d))
        self.o = Linear(w(d, d) / math.sqrt(2 * cfg.n_layers))
        self.mlp_norm = nn.Parameter(torch.ones(d))
        self.gate, self.up = Linear(w(m, d)), Linear(w(m, d))
        self.down = Linear(w(d, m) / math.sqrt(2 * cfg.n_layers))

    def projections(self) -> dict[str, nn.Module]:
        return {name: getattr(self, name) for name in PROJECTIONS}

    def keys_values(self, h: torch.Tensor, start: int = 0):
        """Post-rotary K and V for hidden states ``h`` ``[B, T, d]``."""
        cfg = self.cfg
        B, T, _ = h.shape
        x = rms_norm(h, self.attn_norm)
        cos, sin = rope_tables(torch.arange(start, start + T), cfg.head_dim, cfg.rope_base)
        k = apply_rope(self.k(x).view(B, T, cfg.n_heads, cfg.head_dim), cos, sin)
        v = self.v(x).view(B, T, cfg.n_heads, cfg.head_dim)
        return k, v

    def forward(self, h: torch.Tensor, record: bool = False, cache: dict | None = None):
        """Apply the block. ``cache`` holds prior ``k``/``v`` for incremental decoding."""
        cfg = self.cfg
        B, T, d = h.shape
        start = 0 if cache is None or "k" not in cache else cache["k"].shape[1]
        x = rms_norm(h, self.attn_norm)
        cos, sin = rope_tables(torch.arange(start, start + T), cfg.head_dim, cfg.rope_base)
        q_raw, k_raw, v_raw = self.q(x), self.k(x), self.v(x)
        q = apply_rope(q_raw.view(B, T, cfg.n_heads, cfg.head_dim), cos, sin)
        k = apply_rope(k_raw.view(B, T, cfg.n_heads, cfg.head_dim), cos, sin)
        v = v_raw.view(B, T, cfg.n_heads, cfg.head_dim)
        if cache is not None:
            if "k" in cache:
                k_all = torch.cat([cache["k"], k], dim=1)
                v_all = torch.cat([cache["v"], v], dim=1)
            else:
                k_all, v_all = k, v
            cache["k"], cache["v"] = k_all, v_all
        else:
            k_all, v_all = k, v
        S = k_all.shape[1]
        scores = torch.einsum("bthd,bshd->bhts", q, k_all) / math.sqrt(cfg.head_dim)
        allowed = torch.arange(S)[None, :] <= (torch.arange(start, start + T)[:, None])
        scores = scores.masked_fill(~allowed, float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        mixed = torch.einsum("bhts,bshd->bthd", probs, v_all).reshape(B, T, d)
        o = self.o(mixed)
        h_mid = h + o
        y = rms_norm(h_mid, self.mlp_norm)
        g, u = self.gate(y), self.up(y)
        hidden = F.silu(g) * u
        dn = self.down(hidden)
        out = h_mid + dn
        if not record:
            return out
        trace = BlockTrace(
            input=h,
            output=out,
            proj={"q": q_raw, "k": k_raw, "v": v_raw, "o": o, "gate": g, "up": u, "down": dn},
            keys=k,
            values=v,
            attn_probs=probs,
            sites={"attn_in": x, "attn_out_in": mixed, "mlp_in": y, "mlp_hidden_in": hidden},
        )
        return out, trace


class ToyTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        self.embed = nn.Parameter(torch.randn(cfg.vocab, cfg.d_model, generator=gen))
        self.blocks = nn.ModuleList([Block(cfg, gen) for _ in range(cfg.n_layers)])
        self.final_norm = nn.Parameter(torch.ones(cfg.d_model))
        self.head = nn.Parameter(torch.randn(cfg.vocab, cfg.d_model, generator=gen) / math.sqrt(cfg.d_model))

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    def embed_tokens(self, tokens) -> torch.Tensor:
        tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
        if tokens.dim() == 1:
            tokens = tokens[None, :]
        if tokens.shape[1] > self.cfg.max_seq:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq {self.cfg.max_seq}")
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.cfg.vocab):
            raise ValueError("token id outside vocabulary")
        return self.embed[tokens]

    def logits_from_hidden(self, h: torch.Tensor) -> torch.Tensor:
        return rms_norm(h, self.final_norm) @ self.head.T

    def run_layers(self, h: torch.Tensor, start: int, stop: int) -> torch.Tensor:
        """Apply blocks ``start .. stop-1`` to hidden states ``h``."""
        for block in self.blocks[start:stop]:
            h = block(h)
        return h

    def hidden_at(self, tokens, layer: int) -> torch.Tensor:
        """Input to block ``layer`` (``layer == n_layers`` gives the final hidden)."""
        return self.run_layers(self.embed_tokens(tokens), 0, layer)

    def forward(self, tokens) -> torch.Tensor:
        h = self.embed_tokens(tokens)
        return self.logits_from_hidden(self.run_layers(h, 0, self.n_layers))

    def decode_step(self, tokens, caches: list[dict]) -> torch.Tensor:
        """Logits for new ``tokens`` given per-layer K/V ``caches`` (mutated)."""
        h = self.embed_tokens(tokens)
        for block, cache in zip(self.blocks, caches):
            h = block(h, cache=cache)
        return self.logits_from_hidden(h)


def init_teacher(cfg: ModelConfig, seed: int = 0) -> ToyTransformer:
    return ToyTransformer(cfg, seed)


def forward_trace(model: ToyTransformer, tokens) -> tuple[torch.Tensor, LayerTrace]:
    h = model.embed_tokens(tokens)
    layers = []
    for block in model.blocks:
        h, tr = block(h, record=True)
        layers.append(tr)
    return model.logits_from_hidden(h), LayerTrace(layers=layers, final_hidden=h)


def pretrain_teacher(model: ToyTransformer, corpus, steps: int, lr: float = 3e-3, batch_size: int = 16,
                     seq_len: int = 64, seed: int = 0, weight_decay: float = 0.0):
    """Next-token cross-entropy training. Returns ``(model, loss_curve)``.

    Batches come from ``corpus.sample_batch`` at indices derived from ``seed``
    so that pretraining data never coincides with calibration batches.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    curve: list[float] = []
    if steps == 0:
        return model, curve
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda i: min(1.0, (i + 1) / 50) * 0.5 * (1 + math.cos(math.pi * i / steps)))
    for step in range(steps):
        tokens = torch.as_tensor(corpus.sample_batch(batch_size, seq_len + 1, index=10_000_000 + seed * 1_000_003 + step).tokens)
        logits = model(tokens[:, :-1])
        loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tokens[:, 1:].reshape(-1))
        if not torch.isfinite(loss):
            raise FloatingPointError(f"pretraining diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        curve.append(float(loss.detach()))
    return model, curve


def swap_quant_layer(model: ToyTransformer, layer: int, projections: Mapping[str, nn.Module]) -> ToyTransformer:
    """Student view of ``model`` whose block ``layer`` uses ``projections``.

    Embedding, head, norms and the other blocks are shared with ``model``
    (not copied), so the view costs nothing and ``model`` is left untouched.
    """
    if not 0 <= layer < model.n_layers:
        raise IndexError(f"layer {layer} outside [0, {model.n_layers})")
    missing = [p for p in PROJECTIONS if p not in projections]
    if missing:
        raise ValueError(f"missing projections: {missing}")
    view = copy.copy(model)
    view._modules = dict(model._modules)
    view.blocks = nn.ModuleList(list(model.blocks))
    block = copy.copy(model.blocks[layer])
    block._modules = dict(model.blocks[layer]._modules)
    for name in PROJECTIONS:
        setattr(block, name, projections[name])
    view.blocks[layer] = block
    return view


def unswap_quant_layer(student: ToyTransformer, teacher: ToyTransformer, layer: int) -> ToyTransformer:
    return swap_quant_layer(student, layer, teacher.blocks[layer].projections())


def quantized_layers(model: ToyTransformer, layer: int) -> dict[str, QuantizedLinear]:
    return {n: p for n, p in model.blocks[layer].projections().items() if isinstance(p, QuantizedLinear)}


def identity_block_(block: Block) -> Block:
    """Zero the attention and MLP output projections so the block is the identity."""
    with torch.no_grad():
        block.o.weight.zero_()
        block.down.weight.zero_()
    return block
