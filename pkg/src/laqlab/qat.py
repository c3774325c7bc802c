"""Layer-wise quantization-aware training with lookahead, and the E2E baseline.

Layer ``l`` is trained on the SmoothL1 distance between

* the student path: quantized block ``l`` applied to the student-prefix input
  (earlier blocks frozen and quantized), then teacher blocks ``l+1 .. l+k``;
* the teacher path: teacher blocks ``l .. l+k`` on the teacher-prefix input.

``k = 0`` is plain layer-wise reconstruction. Depth is truncated at the last
block, where the loss falls back to reconstruction of block ``l`` itself.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from laqlab.core import smooth_l1
from laqlab.model import ToyTransformer, forward_trace, swap_quant_layer
from laqlab.quant import PROJECTIONS, QuantizedLinear, QuantSpec, init_from_weights, rtn_quantize

log = logging.getLogger(__name__)

STAGED = "0->1"


class TrainingDiverged(FloatingPointError):
    def __init__(self, layer, epoch, step=None):
        where = f"layer {layer}, epoch {epoch}" if layer is not None else f"epoch {epoch}"
        if step is not None:
            where += f", step {step}"
        super().__init__(f"loss became NaN/inf at {where}")
        self.layer, self.epoch, self.step = layer, epoch, step


@dataclass
class TrainConfig:
    epochs: int = 20
    lr_quant: float = 1e-3
    lr_weight: float | None = None  # defaults to lr_quant / 2
    batch_size: int = 8
    seq_len: int = 64
    n_samples: int = 64
    lookahead: int | str = 1  # 0, 1, 2 or "0->1"
    switch_epoch: int | None = None  # staged schedule; defaults to epochs // 2
    beta: float = 1.0
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    calib_offset: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr_weight is None:
            self.lr_weight = self.lr_quant / 2
        if self.lookahead != STAGED and (not isinstance(self.lookahead, int) or self.lookahead < 0):
            raise ValueError(f"lookahead must be a non-negative int or {STAGED!r}, got {self.lookahead!r}")
        self.betas = tuple(self.betas)

    def depth_at(self, epoch: int) -> int:
        if self.lookahead == STAGED:
            switch = self.epochs // 2 if self.switch_epoch is None else self.switch_epoch
            return 0 if epoch < switch else 1
        return int(self.lookahead)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class LayerwiseResult:
    student: ToyTransformer
    curves: dict[int, list[float]] = field(default_factory=dict)  # layer -> epoch-mean loss

    def curve_rows(self):
        for layer, curve in self.curves.items():
            for epoch, loss in enumerate(curve):
                yield layer, epoch, loss


def _tokens(batch) -> torch.Tensor:
    t = batch.tokens if hasattr(batch, "tokens") else batch
    return torch.as_tensor(np.asarray(t), dtype=torch.long)


def residual(student: ToyTransformer, teacher: ToyTransformer, layer: int, batch) -> torch.Tensor:
    """``Q_l(h_hat_l) - F_l(h*_l)`` with student- and teacher-prefix inputs."""
    tokens = _tokens(batch)
    h_hat = student.hidden_at(tokens, layer)
    h_star = teacher.hidden_at(tokens, layer)
    return student.blocks[layer](h_hat) - teacher.blocks[layer](h_star)


def _lookahead(teacher: ToyTransformer, layer: int, k: int, out: torch.Tensor) -> torch.Tensor:
    stop = min(layer + 1 + k, teacher.n_layers)
    return teacher.run_layers(out, layer + 1, stop)


def lookahead_loss(student: ToyTransformer, teacher: ToyTransformer, layer: int, k: int, batch, beta: float = 1.0):
    """SmoothL1 after propagating both layer-``l`` outputs through teacher blocks ``l+1..l+k``."""
    if k < 0:
        raise ValueError(f"lookahead depth must be >= 0, got {k}")
    tokens = _tokens(batch)
    h_hat = student.hidden_at(tokens, layer)
    with torch.no_grad():
        target = teacher.blocks[layer](teacher.hidden_at(tokens, layer))
    return lookahead_from_outputs(teacher, layer, k, student.blocks[layer](h_hat), target, beta)


def lookahead_from_outputs(teacher: ToyTransformer, layer: int, k: int, out: torch.Tensor, target_out: torch.Tensor,
                           beta: float = 1.0) -> torch.Tensor:
    """Lookahead loss given the student's and the teacher's layer-``l`` outputs."""
    if k < 0:
        raise ValueError(f"lookahead depth must be >= 0, got {k}")
    with torch.no_grad():
        target = _lookahead(teacher, layer, k, target_out)
    return smooth_l1(_lookahead(teacher, layer, k, out), target, beta)


def make_quant_set(block, spec: QuantSpec) -> dict[str, QuantizedLinear]:
    return {name: init_from_weights(getattr(block, name).effective_weight().detach(), spec) for name in PROJECTIONS}


def _optimizer(qset: dict[str, QuantizedLinear], cfg: TrainConfig):
    weights = [q.weight for q in qset.values()]
    qparams = [p for q in qset.values() for p in q.quant_parameters()]
    return torch.optim.AdamW(
        [
            {"params": weights, "lr": cfg.lr_weight, "weight_decay": cfg.weight_decay},
            {"params": qparams, "lr": cfg.lr_quant, "weight_decay": 0.0},
        ],
        betas=cfg.betas,
    )


def calibration_set(corpus, cfg: TrainConfig) -> torch.Tensor:
    """``n_samples`` sequences drawn once; epochs reshuffle them into batches."""
    rows = []
    per = cfg.batch_size
    n_batches = -(-cfg.n_samples // per)
    for i in range(n_batches):
        rows.append(corpus.sample_batch(per, cfg.seq_len, index=cfg.calib_offset + i).tokens)
    return torch.as_tensor(np.concatenate(rows)[: cfg.n_samples], dtype=torch.long)


def _epoch_batches(data: torch.Tensor, cfg: TrainConfig, layer: int, epoch: int):
    gen = torch.Generator().manual_seed(int(cfg.seed * 1_000_003 + layer * 1009 + epoch))
    perm = torch.randperm(data.shape[0], generator=gen)
    for i in range(0, data.shape[0], cfg.batch_size):
        yield data[perm[i : i + cfg.batch_size]]


def train_layerwise(teacher: ToyTransformer, spec: QuantSpec, cfg: TrainConfig, corpus, start=None) -> LayerwiseResult:
    """Train blocks ``0 .. L-1`` in order; each is frozen before the next starts."""
    teacher.requires_grad_(False)
    data = calibration_set(corpus, cfg)
    student = teacher if start is None else start
    curves: dict[int, list[float]] = {}
    torch.manual_seed(cfg.seed)
    for layer in range(teacher.n_layers):
        qset = make_quant_set(teacher.blocks[layer], spec)
        student = swap_quant_layer(student, layer, qset)
        params = [p for q in qset.values() for p in q.parameters()]
        opt = _optimizer(qset, cfg)
        # prefix inputs and targets do not depend on this layer's parameters
        with torch.no_grad():
            h_hat_all = student.hidden_at(data, layer)
            out_star_all = teacher.blocks[layer](teacher.hidden_at(data, layer))
            targets = {}
        curve = []
        for epoch in range(cfg.epochs):
            k = cfg.depth_at(epoch)
            if k not in targets:
                with torch.no_grad():
                    targets[k] = _lookahead(teacher, layer, k, out_star_all)
            total, count = 0.0, 0
            for idx in _epoch_batches(torch.arange(data.shape[0]), cfg, layer, epoch):
                pred = _lookahead(teacher, layer, k, student.blocks[layer](h_hat_all[idx]))
                loss = smooth_l1(pred, targets[k][idx], cfg.beta)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(layer, epoch)
                opt.zero_grad()
                loss.backward(inputs=params)
                opt.step()
                total += float(loss.detach()) * len(idx)
                count += len(idx)
            curve.append(total / count)
        for q in qset.values():
            q.freeze()
        curves[layer] = curve
        log.info("layer %d: loss %.3e -> %.3e", layer, curve[0], curve[-1])
    return LayerwiseResult(student=student, curves=curves)


def kl_to_teacher(student_logits: torch.Tensor, teacher_logits: torch.Tensor) -> torch.Tensor:
    """Mean over positions of ``KL(p_teacher || p_student)``."""
    lp_t = F.log_softmax(teacher_logits, dim=-1)
    lp_s = F.log_softmax(student_logits, dim=-1)
    return (lp_t.exp() * (lp_t - lp_s)).sum(-1).mean()


def k_cache_rmse_loss(student_trace, teacher_trace) -> torch.Tensor:
    """Mean over layers of the RMSE between student and teacher K (post-rotary)."""
    errs = [
        torch.sqrt(((s.keys - t.keys) ** 2).mean() + 1e-30)
        for s, t in zip(student_trace.layers, teacher_trace.layers)
    ]
    return torch.stack(errs).mean()


def trainable_copy(student: ToyTransformer, spec: QuantSpec) -> ToyTransformer:
    """Independent student whose every projection is an unfrozen QuantizedLinear."""
    s = copy.deepcopy(student)
    for layer, block in enumerate(s.blocks):
        for name in PROJECTIONS:
            p = getattr(block, name)
            if isinstance(p, QuantizedLinear):
                p.unfreeze()
            else:
                setattr(block, name, init_from_weights(p.effective_weight().detach(), spec))
    s.requires_grad_(False)
    for block in s.blocks:
        for q in quantized_layers_of(block):
            q.requires_grad_(True)
    return s


def quantized_layers_of(block):
    return [p for p in block.projections().values() if isinstance(p, QuantizedLinear)]


def train_e2e(teacher: ToyTransformer, spec: QuantSpec, cfg: TrainConfig, corpus, aux_k_weight: float = 0.0,
              init: ToyTransformer | None = None, steps: int | None = None) -> tuple[ToyTransformer, list[float]]:
    """Joint training of all layers on forward KL to the teacher softmax.

    ``init`` is the starting student (a layer-wise checkpoint); RTN when
    ``None``. With ``aux_k_weight > 0`` the loss adds that multiple of the
    mean per-layer K-cache RMSE. ``steps`` defaults to ``epochs`` passes over
    the calibration set.
    """
    if aux_k_weight < 0:
        raise ValueError("aux_k_weight must be >= 0")
    teacher.requires_grad_(False)
    base = rtn_quantize(teacher, spec) if init is None else init
    student = trainable_copy(base, spec)
    qsets = {f"{l}.{n}": q for l, b in enumerate(student.blocks) for n, q in b.projections().items()}
    params = [p for q in qsets.values() for p in q.parameters()]
    opt = _optimizer(qsets, cfg)
    data = calibration_set(corpus, cfg)
    with torch.no_grad():
        t_logits_all, t_trace_all = forward_trace(teacher, data)
    curve = []
    step = 0
    for epoch in range(cfg.epochs):
        for idx in _epoch_batches(torch.arange(data.shape[0]), cfg, -1, epoch):
            if steps is not None and step >= steps:
                break
            s_logits, s_trace = forward_trace(student, data[idx])
            loss = kl_to_teacher(s_logits, t_logits_all[idx])
            if aux_k_weight > 0:
                errs = [
                    torch.sqrt(((s.keys - t.keys[idx]) ** 2).mean() + 1e-30)
                    for s, t in zip(s_trace.layers, t_trace_all.layers)
                ]
                loss = loss + aux_k_weight * torch.stack(errs).mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged(None, epoch, step)
            opt.zero_grad()
            loss.backward(inputs=params)
            opt.step()
            curve.append(float(loss.detach()))
            step += 1
    for q in qsets.values():
        q.freeze()
    return student, curve
