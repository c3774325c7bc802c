"""Experiment configurations and the runners behind each ``kind``.

A config is a JSON document::

    {
      "kind": "ablate-depth",
      "seed": 0,
      "model": {...ModelConfig...},
      "corpora": {"A": {...CorpusSpec...}, "B": {...}, "B_prime": {...}},
      "calibration": "B", "deployment": "B_prime",
      "teacher": {"corpus": "B", "pretrain_steps": 800, ...},
      "quant": {"bits": 3, "group_size": 32},
      "train": {...TrainConfig...},
      "options": {...kind-specific...},
      "output_dir": "depth"
    }

Runners return ``{filename: rows}`` tables (plus checkpoints written into the
run directory); the CLI turns tables into CSV files.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch

from laqlab import checkpoint as ckpt_io
from laqlab import fidelity, hessian, metrics
from laqlab.corpus import CorpusSpec, MarkovCorpus, TokenBatch, generic_spec, make_corpus, reasoning_spec, window
from laqlab.model import ModelConfig, ToyTransformer, forward_trace, init_teacher, pretrain_teacher
from laqlab.qat import STAGED, TrainConfig, train_e2e, train_layerwise
from laqlab.quant import TILES, PackedLinear, QuantSpec, dense_gemv, packed_gemv

log = logging.getLogger(__name__)

KINDS = (
    "train-layerwise",
    "train-e2e",
    "metrics",
    "hessian-align",
    "kv-fidelity",
    "ablate-depth",
    "ablate-data",
    "pack",
    "bench-gemv",
)
OUTPUT_ROOT_ENV = "LAQLAB_OUTPUT_ROOT"
CACHE_ENV = "LAQLAB_CACHE"

# desk-scale lab: wide enough that k <= 32 eigenspaces are proper subspaces
LAB_MODEL = ModelConfig(vocab=64, d_model=128, n_layers=4, n_heads=4, mlp_hidden=256, max_seq=256)
LAB_ALPHA = 0.02


class ConfigError(ValueError):
    """Invalid experiment config; the message names the offending field."""


def lab_corpora(vocab: int = 64) -> dict[str, CorpusSpec]:
    """Generic ``A``, reasoning-like ``B`` and its fresh-seed twin ``B_prime``."""
    b = dataclasses.replace(reasoning_spec(vocab, seed=1), alpha=LAB_ALPHA)
    return {"A": generic_spec(vocab, seed=0), "B": b, "B_prime": b.with_seed(2)}


@dataclass
class TeacherConfig:
    corpus: str = "B"
    pretrain_steps: int = 800
    lr: float = 3e-3
    batch_size: int = 16
    seq_len: int = 64
    seed: int = 0
    checkpoint: str | None = None  # load instead of pretraining


@dataclass
class ExperimentConfig:
    kind: str
    seed: int = 0
    model: ModelConfig = field(default_factory=lambda: LAB_MODEL)
    corpora: dict[str, CorpusSpec] = field(default_factory=lab_corpora)
    calibration: str = "B"
    deployment: str = "B_prime"
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    quant: QuantSpec = field(default_factory=QuantSpec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10))
    options: dict[str, Any] = field(default_factory=dict)
    output_dir: str | None = None
    workers: int = 1

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "seed": self.seed,
            "model": dataclasses.asdict(self.model),
            "corpora": {k: v.to_dict() for k, v in self.corpora.items()},
            "calibration": self.calibration,
            "deployment": self.deployment,
            "teacher": dataclasses.asdict(self.teacher),
            "quant": dataclasses.asdict(self.quant),
            "train": self.train.to_dict(),
            "options": self.options,
            "output_dir": self.output_dir,
            "workers": self.workers,
        }

    def corpus(self, name: str) -> MarkovCorpus:
        return make_corpus(self.corpora[name])


def _section(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}.{unknown[0]}: unknown field")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a decoded JSON config; raises :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a JSON object")
    known = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown field")
    kind = raw.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"kind: must be one of {', '.join(KINDS)}; got {kind!r}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed: must be an integer")
    model = _section(ModelConfig, raw["model"], "model") if "model" in raw else LAB_MODEL
    corpora = lab_corpora(model.vocab)
    for name, spec in (raw.get("corpora") or {}).items():
        if not isinstance(spec, dict):
            raise ConfigError(f"corpora.{name}: expected an object")
        try:
            corpora[name] = CorpusSpec.from_dict(spec)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"corpora.{name}: {e}") from None
    for name, spec in corpora.items():
        if spec.vocab != model.vocab:
            raise ConfigError(f"corpora.{name}.vocab: {spec.vocab} does not match model.vocab {model.vocab}")
    teacher = _section(TeacherConfig, raw.get("teacher"), "teacher")
    quant = _section(QuantSpec, raw.get("quant"), "quant")
    train_raw = dict(raw.get("train") or {})
    train_raw.setdefault("epochs", 10)
    train_raw.setdefault("seed", seed)
    train = _section(TrainConfig, train_raw, "train")
    if train.seq_len > model.max_seq:
        raise ConfigError(f"train.seq_len: {train.seq_len} exceeds model.max_seq {model.max_seq}")
    cfg = ExperimentConfig(
        kind=kind,
        seed=seed,
        model=model,
        corpora=corpora,
        calibration=raw.get("calibration", "B"),
        deployment=raw.get("deployment", "B_prime"),
        teacher=teacher,
        quant=quant,
        train=train,
        options=dict(raw.get("options") or {}),
        output_dir=raw.get("output_dir"),
        workers=raw.get("workers", 1),
    )
    for label, name in (("calibration", cfg.calibration), ("deployment", cfg.deployment), ("teacher.corpus", teacher.corpus)):
        if name not in corpora:
            raise ConfigError(f"{label}: corpus {name!r} is not defined (known: {', '.join(sorted(corpora))})")
    if not isinstance(cfg.workers, int) or cfg.workers < 1:
        raise ConfigError("workers: must be a positive integer")
    for group in (model.d_model, model.mlp_hidden):
        if group % quant.group_size:
            raise ConfigError(f"quant.group_size: {quant.group_size} does not divide layer width {group}")
    if kind in ("pack", "bench-gemv") and "checkpoint" not in cfg.options:
        raise ConfigError(f"options.checkpoint: required for kind {kind}")
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config: invalid JSON at line {e.lineno} column {e.colno}: {e.msg}") from None
    return parse_config(raw)


def content_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# ------------------------------------------------------------------ teacher


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, output_root() / ".cache"))


def teacher_key(model: ModelConfig, spec: CorpusSpec, tc: TeacherConfig) -> str:
    return content_hash({"model": dataclasses.asdict(model), "corpus": spec.to_dict(), "teacher": dataclasses.asdict(tc)})[:20]


def get_teacher(model: ModelConfig, spec: CorpusSpec, tc: TeacherConfig, cache: Path | None = None) -> ToyTransformer:
    """Pretrained teacher, loaded from ``tc.checkpoint`` or the cache when possible.

    Pretraining is deterministic, so a cached teacher is bit-identical to a
    fresh one.
    """
    if tc.checkpoint:
        return ckpt_io.load_model(tc.checkpoint)
    cache = cache_dir() if cache is None else Path(cache)
    path = cache / f"teacher-{teacher_key(model, spec, tc)}.laq"
    if path.exists():
        return ckpt_io.load_model(path)
    teacher = init_teacher(model, tc.seed)
    if tc.pretrain_steps:
        teacher, curve = pretrain_teacher(
            teacher, make_corpus(spec), tc.pretrain_steps, lr=tc.lr, batch_size=tc.batch_size,
            seq_len=tc.seq_len, seed=tc.seed,
        )
        log.info("teacher pretrained: loss %.3f -> %.3f", curve[0], float(np.mean(curve[-20:])))
    teacher.requires_grad_(False)
    cache.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(f".tmp{os.getpid()}")
    ckpt_io.save_model(teacher, tmp)
    tmp.replace(path)
    return ckpt_io.load_model(path)


def teacher_for(cfg: ExperimentConfig, cache: Path | None = None) -> ToyTransformer:
    return get_teacher(cfg.model, cfg.corpora[cfg.teacher.corpus], cfg.teacher, cache)


# ------------------------------------------------------------ shared evals


def eval_batches(corpus, n_batches: int = 4, batch_size: int = 8, seq_len: int = 64):
    return fidelity.eval_batches(corpus, n_batches, batch_size, seq_len)


def hidden_rmse(student: ToyTransformer, teacher: ToyTransformer, batches) -> list[float]:
    """Per-layer per-token RMSE of block outputs under full student/teacher forwards."""
    L = teacher.n_layers
    tot, n = np.zeros(L), 0
    for tokens in batches:
        with torch.no_grad():
            _, ts = forward_trace(student, tokens)
            _, tt = forward_trace(teacher, tokens)
        for l in range(L):
            d = ts.layers[l].output - tt.layers[l].output
            tot[l] += float(torch.sqrt((d * d).mean(-1)).sum())
        n += int(np.prod(np.asarray(tokens).shape))
    return list(tot / n)


def internal_metric(student, teacher, batches) -> float:
    """Mean over layers of the block-output RMSE (the next-layer-input error)."""
    return float(np.mean(hidden_rmse(student, teacher, batches)))


def final_kl(student, teacher, batches) -> float:
    from laqlab.qat import kl_to_teacher

    vals = []
    for tokens in batches:
        t = torch.as_tensor(np.asarray(tokens))
        with torch.no_grad():
            vals.append(float(kl_to_teacher(student(t), teacher(t))))
    return float(np.mean(vals))


class WindowedCorpus:
    """Calibration source that cuts a window out of longer sequences."""

    def __init__(self, corpus, mode: str, source_len: int, seed: int = 0):
        self.corpus, self.mode, self.source_len, self.seed = corpus, mode, source_len, seed

    def sample_batch(self, batch_size: int, seq_len: int, index: int = 0) -> TokenBatch:
        src = self.corpus.sample_batch(batch_size, self.source_len, index)
        return window(src, self.mode, seq_len, seed=self.seed * 1_000_003 + index)


def _depth_label(k) -> str:
    return STAGED if k == STAGED else str(k)


def _parse_depth(k):
    if k == STAGED:
        return STAGED
    try:
        return int(k)
    except (TypeError, ValueError):
        raise ConfigError(f"options.depths: {k!r} is not 0, 1, 2 or {STAGED!r}") from None


# ---------------------------------------------------------------- runners

Tables = dict[str, list[dict]]


def run_train_layerwise(cfg: ExperimentConfig, out: Path, teacher: ToyTransformer) -> Tables:
    res = train_layerwise(teacher, cfg.quant, cfg.train, cfg.corpus(cfg.calibration))
    ckpt_io.save_model(res.student, out / "student.laq")
    batches = eval_batches(cfg.corpus(cfg.deployment), cfg.options.get("eval_batches", 4))
    rep = fidelity.fidelity(res.student, teacher, batches)
    return {
        "curves.csv": [{"layer": l, "epoch": e, "loss": v} for l, e, v in res.curve_rows()],
        "kv_rmse.csv": list(rep.kv_rows()),
        "proj_rmse.csv": list(rep.proj_rows()),
    }


def run_train_e2e(cfg: ExperimentConfig, out: Path, teacher: ToyTransformer) -> Tables:
    calib = cfg.corpus(cfg.calibration)
    init = None
    if cfg.options.get("init", "layerwise") == "layerwise":
        init = train_layerwise(teacher, cfg.quant, dataclasses.replace(cfg.train, lookahead=0), calib).student
    student, curve = train_e2e(
        teacher, cfg.quant, cfg.train, calib, aux_k_weight=float(cfg.options.get("aux_k_weight", 0.0)),
        init=init, steps=cfg.options.get("steps"),
    )
    ckpt_io.save_model(student, out / "student.laq")
    rep = fidelity.fidelity(student, teacher, eval_batches(cfg.corpus(cfg.deployment), cfg.options.get("eval_batches", 4)))
    return {
        "e2e_curve.csv": [{"step": i, "loss": v} for i, v in enumerate(curve)],
        "kv_rmse.csv": list(rep.kv_rows()),
        "proj_rmse.csv": list(rep.proj_rows()),
    }


def run_metrics(cfg: ExperimentConfig, out: Path, teacher: ToyTransformer) -> Tables:
    opts = cfg.options
    deploy = cfg.corpus(cfg.deployment)
    tokens = deploy.sample_batch(opts.get("sequences", 16), opts.get("seq_len", 64), index=7_000_000).tokens
    calib = cfg.corpus(cfg.calibration)
    students = {}
    tc = dataclasses.replace(cfg.train, lookahead=0)
    lw = train_layerwise(teacher, cfg.quant, tc, calib).student
    students["LW"] = lw
    if opts.get("e2e", True):
        students["E2E"], _ = train_e2e(teacher, cfg.quant, tc, calib, init=lw, steps=opts.get("e2e_steps"))
    layers = list(range(teacher.n_layers))
    rep = metrics.anisotropy_report(
        teacher, tokens, layers, students, kind="E2E", per_sequence=opts.get("per_sequence", 1), seed=cfg.seed,
        entropy_floor_nats=opts.get("entropy_floor"),
    )
    lw_rep = metrics.anisotropy_report(
        teacher, tokens, layers[:1], students, kind="LW", per_sequence=1, seed=cfg.seed,
        entropy_floor_nats=opts.get("entropy_floor"),
    )
    summary = []
    for probe_kind, r in (("E2E", rep), ("LW", lw_rep)):
        for name, s in r.summary().items():
            summary.append({"probe": probe_kind, "direction": name, **s})
    batches = eval_batches(deploy, opts.get("eval_batches", 4))
    agree_rows = []
    for name, st in students.items():
        ag = metrics.top1_agreement(st, teacher, batches)
        for row in ag["buckets"]:
            agree_rows.append({"model": name, **row})
        agree_rows.append({"model": name, "bucket": "all", "fraction": 1.0, "agreement": ag["overall"], "count": ag["tokens"]})
    rng = np.random.default_rng([cfg.seed, 0xB0])
    ps = [rng.dirichlet(np.full(v, a)) for v in (4, 16, 64, 256) for a in (0.1, 1.0)]
    untrained = init_teacher(cfg.model, cfg.teacher.seed)
    sigma_rows = []
    for b, pos in metrics.select_positions(teacher, tokens[:4], metrics.entropy_floor(cfg.model.vocab), 2, seed=cfg.seed):
        for l in layers:
            sigma_rows.append({"layer": l, "sample": b, "position": pos,
                               "sigma_max": metrics.sigma_max_J(teacher, tokens[b], l, pos)})
    return {
        "anisotropy.csv": [
            {k: r[k] for k in ("layer", "position", "direction", "responsiveness", "relative", "sample")}
            for r in rep.rows + lw_rep.rows
        ],
        "anisotropy_summary.csv": summary,
        "agreement.csv": agree_rows,
        "bounds.csv": metrics.bounds_audit(ps),
        "sigma.csv": sigma_rows,
        "peaky.csv": [
            {"model": "pretrained", "fraction_pmax_gt_0.9": metrics.peaky_fraction(teacher, batches)},
            {"model": "untrained", "fraction_pmax_gt_0.9": metrics.peaky_fraction(untrained, batches)},
        ],
    }


def run_hessian_align(cfg: ExperimentConfig, out: Path, teacher: ToyTransformer) -> Tables:
    opts = cfg.options
    n, T = opts.get("n_sequences", 32), opts.get("seq_len", 256)
    cal_names = opts.get("calibrations", ["A", cfg.calibration])
    for name in cal_names:
        if name not in cfg.corpora:
            raise ConfigError(f"options.calibrations: corpus {name!r} is not defined")
    H_eval = hessian.accumulate(teacher, cfg.corpus(cfg.deployment), n, T)
    H_cals = {name: hessian.accumulate(teacher, cfg.corpus(name), n, T) for name in cal_names}
    sweep = hessian.k_sweep(H_cals, H_eval, opts.get("ks", hessian.DEFAULT_KS))
    per_key = []
    for name, H in H_cals.items():
        for k in sweep.ks():
            for (layer, site), c in hessian.subspace_overlap(H, H_eval, k).per_key.items():
                per_key.append({"k": k, "corpus": name, "layer": layer, "site": site, "mean_cosine": c})
    tables = {"overlap.csv": sweep.rows, "overlap_keys.csv": per_key}
    if opts.get("students", True):
        rows = []
        batches = eval_batches(cfg.corpus(cfg.deployment), opts.get("eval_batches", 4))
        for name in cal_names:
            for s in opts.get("seeds", [cfg.seed]):
                tc = dataclasses.replace(cfg.train, lookahead=0, seed=s)
                st = train_layerwise(teacher, cfg.quant, tc, cfg.corpus(name)).student
                rows.append({"calibration": name, "seed": s,
                             "agreement": metrics.top1_agreement(st, teacher, batches)["overall"]})
        tables["calibration_agreement.csv"] = rows
    return tables


def run_kv_fidelity(cfg: ExperimentConfig, out: Path, teacher: ToyTransformer) -> Tables:
    opts = cfg.options
    recipes = [
        fidelity.Recipe(r["method"], r["bits"], r.get("seed", cfg.seed), r.get("group_size", cfg.quant.group_size))
        for r in opts.get("recipes", [dataclasses.asdict(r) for r in fidelity.default_recipes(cfg.seed)])
    ]
    calib = cfg.corpus(cfg.calibration)
    students = []
    for rec in recipes:
        st = fidelity.build_student(rec, teacher, calib, cfg.train, e2e_steps=opts.get("e2e_steps"),
                                    aux_k_weight=float(opts.get("aux_k_weight", 1.0)))
        ckpt_io.save_model(st, out / f"{rec.name}.laq")
        students.append((rec, st))
    report = fidelity.checkpoint_sweep(students, teacher, cfg.corpus(cfg.deployment), opts.get("eval_batches", 4))
    corr = report.correlations()
    return {
        "sweep.csv": report.rows,
        "correlations.csv": [{"pair": k, "pearson": v} for k, v in corr.items()],
    }


def run_ablate_depth(cfg: ExperimentConfig, out: Path, teacher: ToyTransformer) -> Tables:
    depths = [_parse_depth(k) for k in cfg.options.get("depths", [0, STAGED, 1, 2])]
    seeds = cfg.options.get("seeds", [cfg.seed])
    calib = cfg.corpus(cfg.calibration)
    batches = eval_batches(cfg.corpus(cfg.deployment), cfg.options.get("eval_batches", 4))
    rows, proj_rows = [], []
    for k in depths:
        for s in seeds:
            tc = dataclasses.replace(cfg.train, lookahead=k, seed=s)
            st = train_layerwise(teacher, cfg.quant, tc, calib).student
            ckpt_io.save_model(st, out / f"depth-{_depth_label(k).replace('->', 'to')}-s{s}.laq")
            rep = fidelity.fidelity(st, teacher, batches)
            rows.append({
                "depth": _depth_label(k),
                "seed": s,
                "internal_rmse": internal_metric(st, teacher, batches),
                "k_rmse": rep.k_mean,
                "v_rmse": rep.v_mean,
                "kl": final_kl(st, teacher, batches),
                "agreement": metrics.top1_agreement(st, teacher, batches)["overall"],
            })
            for name, v in rep.proj_mean().items():
                proj_rows.append({"depth": _depth_label(k), "seed": s, "projection": name, "rmse": v})
    return {"depth.csv": rows, "depth_proj_rmse.csv": proj_rows}


def run_ablate_data(cfg: ExperimentConfig, out: Path, teacher: ToyTransformer) -> Tables:
    opts = cfg.options
    calib = cfg.corpus(cfg.calibration)
    batches = eval_batches(cfg.corpus(cfg.deployment), opts.get("eval_batches", 4))
    variants = []
    for n in opts.get("n_samples", [16, 64]):
        variants.append(("n_samples", str(n), calib, dataclasses.replace(cfg.train, n_samples=int(n))))
    for T in opts.get("seq_lens", [16, 64]):
        variants.append(("seq_len", str(T), calib, dataclasses.replace(cfg.train, seq_len=int(T))))
    source_len = int(opts.get("source_len", 4 * cfg.train.seq_len))
    if source_len > cfg.model.max_seq:
        raise ConfigError(f"options.source_len: {source_len} exceeds model.max_seq {cfg.model.max_seq}")
    for mode in opts.get("windows", ["prefix", "response", "middle", "suffix"]):
        variants.append(("window", mode, WindowedCorpus(calib, mode, source_len, cfg.seed), cfg.train))
    rows = []
    for axis, value, corpus, tc in variants:
        st = train_layerwise(teacher, cfg.quant, tc, corpus).student
        rows.append({
            "axis": axis,
            "value": value,
            "internal_rmse": internal_metric(st, teacher, batches),
            "agreement": metrics.top1_agreement(st, teacher, batches)["overall"],
        })
    return {"data.csv": rows}


def run_pack(cfg: ExperimentConfig, out: Path, teacher=None) -> Tables:
    src = Path(cfg.options["checkpoint"])
    ck = ckpt_io.read_checkpoint(src)
    packed = ckpt_io.pack_checkpoint(ck)
    ckpt_io.write_checkpoint(packed, out / "packed.laq")
    back = ckpt_io.unpack_checkpoint(ckpt_io.read_checkpoint(out / "packed.laq"))
    rows = []
    for name, rec in ck.records.items():
        if name.endswith(".codes"):
            same = np.array_equal(np.asarray(rec.data), np.asarray(back.records[name].data))
            if not same:
                raise RuntimeError(f"pack round trip changed {name}")
            rows.append({"record": name, "count": int(np.asarray(rec.data).size), "roundtrip": "exact"})
    return {"pack.csv": rows}


def packed_layers(ck: ckpt_io.Checkpoint) -> dict[str, PackedLinear]:
    arrays = ck.arrays()
    out = {}
    for name in sorted(arrays):
        if name.endswith(".codes"):
            spec = QuantSpec(ck.bits, ck.group)
            prefix = name[: -len(".codes")]
            out[prefix] = PackedLinear.from_arrays(
                np.asarray(arrays[name]).astype(np.uint8), arrays[f"{prefix}.scales"], arrays[f"{prefix}.zeros"],
                spec, arrays[f"{prefix}.channel_scale"],
            )
    return out


class KernelMismatch(RuntimeError):
    pass


def bench_gemv(ck: ckpt_io.Checkpoint, repeats: int = 50, tiles=TILES, seed: int = 0,
               clock: Callable[[], float] = time.perf_counter) -> list[dict]:
    """Median/p90 latency of packed vs dense GEMV per layer and tile.

    Every kernel output is checked against the dense oracle first; a mismatch
    aborts before any timing.
    """
    layers = packed_layers(ck)
    if not layers:
        raise ValueError("checkpoint has no quantized layers")
    rng = np.random.default_rng(seed)
    inputs = {name: rng.standard_normal(p.in_features) for name, p in layers.items()}
    for name, p in layers.items():
        ref = dense_gemv(p, inputs[name])
        for tile in tiles:
            if p.in_features % tile:
                continue
            got = packed_gemv(p, inputs[name], tile)
            err = np.max(np.abs(got - ref)) / max(np.max(np.abs(ref)), 1e-300)
            if err > 1e-5:
                raise KernelMismatch(f"{name} tile {tile}: relative error {err:.2e}")
    rows = []
    low = repeats < 5
    for name, p in layers.items():
        x = inputs[name]
        dense = p.dequantized()
        xs = x / p.channel_scale if p.channel_scale is not None else x
        t_dense = []
        for _ in range(repeats):
            t0 = clock()
            dense @ xs
            t_dense.append(clock() - t0)
        for tile in tiles:
            if p.in_features % tile:
                rows.append({"layer": name, "tile": tile, "out": p.out_features, "in": p.in_features,
                             "packed_median_us": "", "packed_p90_us": "", "dense_median_us": "", "dense_p90_us": "",
                             "repeats": repeats, "confidence": "skipped: tile does not divide in-features"})
                continue
            ts = []
            for _ in range(repeats):
                t0 = clock()
                packed_gemv(p, x, tile)
                ts.append(clock() - t0)
            rows.append({
                "layer": name, "tile": tile, "out": p.out_features, "in": p.in_features,
                "packed_median_us": 1e6 * float(np.median(ts)),
                "packed_p90_us": 1e6 * float(np.quantile(ts, 0.9)),
                "dense_median_us": 1e6 * float(np.median(t_dense)),
                "dense_p90_us": 1e6 * float(np.quantile(t_dense, 0.9)),
                "repeats": repeats,
                "confidence": "low" if low else "ok",
            })
    return rows


def run_bench_gemv(cfg: ExperimentConfig, out: Path, teacher=None) -> Tables:
    ck = ckpt_io.read_checkpoint(cfg.options["checkpoint"])
    tiles = tuple(cfg.options.get("tiles", TILES))
    bad = [t for t in tiles if t not in TILES]
    if bad:
        raise ConfigError(f"options.tiles: {bad[0]} not in {TILES}")
    return {"bench.csv": bench_gemv(ck, int(cfg.options.get("repeats", 50)), tiles, cfg.seed)}


RUNNERS: dict[str, Callable] = {
    "train-layerwise": run_train_layerwise,
    "train-e2e": run_train_e2e,
    "metrics": run_metrics,
    "hessian-align": run_hessian_align,
    "kv-fidelity": run_kv_fidelity,
    "ablate-depth": run_ablate_depth,
    "ablate-data": run_ablate_data,
    "pack": run_pack,
    "bench-gemv": run_bench_gemv,
}
NEEDS_TEACHER = {k for k in KINDS if k not in ("pack", "bench-gemv")}
