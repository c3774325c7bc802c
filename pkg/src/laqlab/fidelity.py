"""KV-cache and per-projection fidelity of quantized students.

Errors are per-token RMSEs: for each token the root-mean-square of the
difference vector, then averaged over tokens. Student quantities come from a
full student forward (student-prefix inputs everywhere), teacher quantities
from a full teacher forward on the same tokens. K is compared post-rotary.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from laqlab.metrics import top1_agreement
from laqlab.model import ToyTransformer, forward_trace
from laqlab.quant import PROJECTIONS, QuantSpec, rtn_quantize

METHODS = ("RTN", "LW-k0", "LW-k1", "E2E", "E2E-auxK")


def _per_token_rmse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """``[B, T, ...]`` -> ``[B, T]``."""
    d = (a - b).reshape(a.shape[0], a.shape[1], -1)
    return torch.sqrt((d * d).mean(-1))


def eval_batches(corpus, n_batches: int, batch_size: int = 8, seq_len: int = 64, offset: int = 5_000_000):
    """Held-out batches; the index offset keeps them clear of calibration batches."""
    return [corpus.sample_batch(batch_size, seq_len, index=offset + i).tokens for i in range(n_batches)]


@dataclass
class FidelityReport:
    k_rmse: list[float]  # per layer
    v_rmse: list[float]
    proj: dict[str, list[float]] = field(default_factory=dict)  # projection -> per layer

    @property
    def k_mean(self) -> float:
        return float(np.mean(self.k_rmse))

    @property
    def v_mean(self) -> float:
        return float(np.mean(self.v_rmse))

    def proj_mean(self) -> dict[str, float]:
        return {name: float(np.mean(self.proj[name])) for name in PROJECTIONS}

    def kv_rows(self):
        for layer, (k, v) in enumerate(zip(self.k_rmse, self.v_rmse)):
            yield {"layer": layer, "k_rmse": k, "v_rmse": v}

    def proj_rows(self):
        for name, value in self.proj_mean().items():
            yield {"projection": name, "rmse": value}


def fidelity(student: ToyTransformer, teacher: ToyTransformer, batches) -> FidelityReport:
    """Per-layer K/V RMSE and per-projection output RMSE over ``batches``.

    Every batch must have the same shape so that the batch mean equals the
    token mean.
    """
    L = teacher.n_layers
    k_sum, v_sum = np.zeros(L), np.zeros(L)
    p_sum = {name: np.zeros(L) for name in PROJECTIONS}
    n_tokens = 0
    for tokens in batches:
        tokens = torch.as_tensor(np.asarray(getattr(tokens, "tokens", tokens)), dtype=torch.long)
        with torch.no_grad():
            _, ts = forward_trace(student, tokens)
            _, tt = forward_trace(teacher, tokens)
        n_tokens += tokens.numel()
        for layer, (s, t) in enumerate(zip(ts.layers, tt.layers)):
            k_sum[layer] += float(_per_token_rmse(s.keys, t.keys).sum())
            v_sum[layer] += float(_per_token_rmse(s.values, t.values).sum())
            for name in PROJECTIONS:
                p_sum[name][layer] += float(_per_token_rmse(s.proj[name], t.proj[name]).sum())
    if n_tokens == 0:
        raise ValueError("no evaluation tokens")
    return FidelityReport(
        k_rmse=list(k_sum / n_tokens),
        v_rmse=list(v_sum / n_tokens),
        proj={name: list(p_sum[name] / n_tokens) for name in PROJECTIONS},
    )


def kv_rmse(student, teacher, corpus, n_batches: int = 4, **kw) -> FidelityReport:
    return fidelity(student, teacher, eval_batches(corpus, n_batches, **kw))


def proj_rmse(student, teacher, corpus, n_batches: int = 4, **kw) -> dict[str, float]:
    return fidelity(student, teacher, eval_batches(corpus, n_batches, **kw)).proj_mean()


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two series of equal length")
    if x.size < 3:
        raise ValueError("pearson needs at least 3 points")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    if sx == 0 or sy == 0:
        raise ValueError("pearson undefined for a zero-variance series")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


@dataclass(frozen=True)
class Recipe:
    method: str
    bits: int
    seed: int = 0
    group_size: int = 32

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")

    @property
    def name(self) -> str:
        return f"{self.method}-w{self.bits}g{self.group_size}-s{self.seed}"


def build_student(recipe: Recipe, teacher: ToyTransformer, corpus, train_cfg, e2e_steps: int | None = None,
                  aux_k_weight: float = 1.0, init: ToyTransformer | None = None) -> ToyTransformer:
    """Train (or round) one checkpoint. E2E methods start from ``init`` or,
    when it is ``None``, from a freshly trained ``k = 0`` layer-wise student."""
    from laqlab.qat import train_e2e, train_layerwise

    spec = QuantSpec(recipe.bits, recipe.group_size)
    cfg = replace(train_cfg, seed=recipe.seed)
    if recipe.method == "RTN":
        return rtn_quantize(teacher, spec)
    if recipe.method in ("LW-k0", "LW-k1"):
        cfg = replace(cfg, lookahead=int(recipe.method[-1]))
        return train_layerwise(teacher, spec, cfg, corpus).student
    if init is None:
        init = train_layerwise(teacher, spec, replace(cfg, lookahead=0), corpus).student
    aux = aux_k_weight if recipe.method == "E2E-auxK" else 0.0
    student, _ = train_e2e(teacher, spec, cfg, corpus, aux_k_weight=aux, init=init, steps=e2e_steps)
    return student


@dataclass
class SweepReport:
    rows: list[dict]  # checkpoint, bits, method, k_rmse, v_rmse, agreement

    def series(self, column: str) -> list[float]:
        return [r[column] for r in self.rows]

    def correlations(self) -> dict[str, float]:
        k, v, a = self.series("k_rmse"), self.series("v_rmse"), self.series("agreement")
        return {"k_agreement": pearson(k, a), "v_agreement": pearson(v, a), "k_v": pearson(k, v)}


def checkpoint_sweep(students: Sequence[tuple[Recipe, ToyTransformer]], teacher: ToyTransformer, eval_corpus,
                     n_batches: int = 4, batch_size: int = 8, seq_len: int = 64) -> SweepReport:
    """K/V RMSE and held-out teacher agreement per checkpoint."""
    if len(students) < 3:
        raise ValueError(f"checkpoint sweep needs at least 3 checkpoints, got {len(students)}")
    batches = eval_batches(eval_corpus, n_batches, batch_size, seq_len)
    rows = []
    for recipe, student in students:
        rep = fidelity(student, teacher, batches)
        agree = top1_agreement(student, teacher, batches)["overall"]
        rows.append(
            {
                "checkpoint": recipe.name,
                "bits": recipe.bits,
                "method": recipe.method,
                "k_rmse": rep.k_mean,
                "v_rmse": rep.v_mean,
                "agreement": agree,
            }
        )
    return SweepReport(rows)


def default_recipes(seed: int = 0) -> list[Recipe]:
    """Eight checkpoints spanning bit widths and methods."""
    out = []
    for bits in (3, 4):
        for method in ("RTN", "LW-k0", "LW-k1", "E2E-auxK"):
            out.append(Recipe(method, bits, seed))
    return out
