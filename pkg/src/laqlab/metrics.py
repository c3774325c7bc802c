"""Loss-induced residual metrics and the probes built on them.

A residual direction ``v`` lives at one position ``p`` of the layer-``l``
output. Downstream computation is truncated to positions ``<= p``.

* ``E2E``: ``M v = J^T H_KL J v`` with ``J`` the map to the position-``p``
  logits through blocks ``l+1..``, the final norm and the head, and
  ``H_KL = diag(p*) - p* p*^T`` at the teacher softmax.
* ``LA``: ``M v = J_{l+1}^T J_{l+1} v`` through block ``l+1`` alone.
* ``LW``: ``M v = v``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from laqlab.core import eigh_sym, jvp, power_iter, vjp
from laqlab.model import ToyTransformer

PROBE_KINDS = ("E2E", "LA", "LW")
PAPER_VOCAB = 151_936
AGREEMENT_BUCKETS = (0.0, 0.01, 0.1, 0.5, 1.0, 2.0, 5.0)


def fisher(p) -> np.ndarray:
    """Categorical Fisher ``diag(p) - p p^T``."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("probability vector has negative entries")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"probability vector sums to {p.sum()}, not 1")
    return np.diag(p) - np.outer(p, p)


def fisher_bound(p) -> float:
    """Gershgorin bound ``2 max_i p_i (1 - p_i)`` on ``lambda_max(fisher(p))``."""
    p = np.asarray(p, dtype=np.float64)
    return float(2.0 * np.max(p * (1.0 - p)))


def entropy_floor(vocab: int, nats: float = 2.0, reference_vocab: int = PAPER_VOCAB) -> float:
    """Entropy threshold rescaled from a ``reference_vocab``-sized vocabulary."""
    return nats * math.log(vocab) / math.log(reference_vocab)


def _pos_fn(model: ToyTransformer, h: torch.Tensor, start: int, stop: int, position: int, head: bool):
    """``delta -> output at position`` of blocks ``start..stop-1`` (+ head) on ``h + delta e_p``."""
    h = h[:, : position + 1].detach()
    mask = torch.zeros_like(h)
    mask[:, position] = 1.0

    def f(delta):
        x = h + mask * delta[None, None, :]
        y = model.run_layers(x, start, stop)[0, position]
        return model.logits_from_hidden(y) if head else y

    return f


@dataclass
class MetricProbe:
    """Linearized metric at one (layer, position) of one sequence.

    ``apply(v)`` maps a numpy vector of size ``d`` to ``M v``.
    """

    kind: str
    layer: int
    position: int
    dim: int
    apply: Callable[[np.ndarray], np.ndarray]
    p_star: np.ndarray | None = None
    jac: Callable[[np.ndarray], np.ndarray] | None = None  # v -> J v
    jac_t: Callable[[np.ndarray], np.ndarray] | None = None  # u -> J^T u


def make_probe(model: ToyTransformer, tokens, layer: int, position: int, kind: str = "E2E",
               dense: bool = False) -> MetricProbe:
    """Probe linearized at the teacher-prefix output of block ``layer``.

    With ``dense=True`` the Jacobian is materialized once by vectorized
    forward-mode differentiation and products become matrix products; the
    operator is the same, only cheaper when many products are needed.
    """
    if kind not in PROBE_KINDS:
        raise ValueError(f"kind must be one of {PROBE_KINDS}")
    tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    if tokens.dim() == 1:
        tokens = tokens[None]
    tokens = tokens[:1]
    T = tokens.shape[1]
    if not 0 <= position < T:
        raise IndexError(f"position {position} outside sequence of length {T}")
    d = model.cfg.d_model
    if kind == "LW":
        return MetricProbe(kind, layer, position, d, apply=lambda v: np.array(v, dtype=np.float64, copy=True))
    with torch.no_grad():
        h = model.hidden_at(tokens[:, : position + 1], layer + 1)
    L = model.n_layers
    if kind == "E2E":
        f = _pos_fn(model, h, layer + 1, L, position, head=True)
        with torch.no_grad():
            p_star = torch.softmax(f(torch.zeros(d)), dim=-1).numpy()
        H = torch.as_tensor(fisher(p_star))
    else:
        if layer + 1 >= L:
            return MetricProbe("LA", layer, position, d, apply=lambda v: np.array(v, dtype=np.float64, copy=True))
        f = _pos_fn(model, h, layer + 1, layer + 2, position, head=False)
        p_star, H = None, None
    zero = torch.zeros(d)
    if dense:
        Jd = torch.func.jacfwd(f)(zero).detach().numpy()
        Hd = None if H is None else H.numpy()

        def apply_dense(v):
            jv = Jd @ v
            return Jd.T @ (Hd @ jv if Hd is not None else jv)

        return MetricProbe(kind, layer, position, d, apply=apply_dense, p_star=p_star,
                           jac=lambda v: Jd @ np.asarray(v), jac_t=lambda u: Jd.T @ np.asarray(u))

    def jac(v):
        return jvp(f, zero, torch.as_tensor(np.asarray(v, dtype=np.float64))).detach().numpy()

    def jac_t(u):
        return vjp(f, zero, torch.as_tensor(np.asarray(u, dtype=np.float64))).detach().numpy()

    def apply(v):
        jv = torch.as_tensor(jac(v))
        u = H @ jv if H is not None else jv
        return jac_t(u.numpy())

    return MetricProbe(kind, layer, position, d, apply=apply, p_star=p_star, jac=jac, jac_t=jac_t)


def metric_apply(probe: MetricProbe, v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (probe.dim,):
        raise ValueError(f"direction has shape {v.shape}, expected ({probe.dim},)")
    return probe.apply(v)


def dense_jacobian(probe: MetricProbe) -> np.ndarray:
    """Materialize ``J`` column by column from forward-mode products."""
    if probe.jac is None:
        return np.eye(probe.dim)
    return np.stack([probe.jac(e) for e in np.eye(probe.dim)], axis=1)


def leading_direction(probe: MetricProbe, seed: int = 0, max_steps: int = 20) -> tuple[float, np.ndarray]:
    return power_iter(probe.apply, probe.dim, max_steps=max_steps, seed=seed)


def sigma_max_J(model: ToyTransformer, tokens, layer: int, position: int, seed: int = 0, max_steps: int = 100) -> float:
    """Largest singular value of the layer-``l``-output -> logits Jacobian."""
    probe = make_probe(model, tokens, layer, position, "E2E")
    lam, _ = power_iter(lambda v: probe.jac_t(probe.jac(v)), probe.dim, max_steps=max_steps, seed=seed)
    return math.sqrt(max(lam, 0.0))


@dataclass
class KVDirection:
    direction: np.ndarray | None
    magnitude: float
    degenerate: bool


def kv_grad_dir(student: ToyTransformer, teacher: ToyTransformer, layer: int, position: int, tokens,
                which: str = "K", tol: float = 1e-300) -> KVDirection:
    """Normalized ``grad_{h_l[p]} ||X_{l+1}^student(h_l) - X_{l+1}^teacher(h_l)||^2`` for X in {K, V}.

    ``h_l`` is the teacher-prefix output of block ``layer``, truncated to
    positions ``<= p``.
    """
    if which not in ("K", "V"):
        raise ValueError("which must be 'K' or 'V'")
    if layer + 1 >= teacher.n_layers:
        raise IndexError(f"layer {layer} has no next layer")
    tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    if tokens.dim() == 1:
        tokens = tokens[None]
    with torch.no_grad():
        h = teacher.hidden_at(tokens[:1, : position + 1], layer + 1)
    h = h.clone().requires_grad_(True)
    ks, vs = student.blocks[layer + 1].keys_values(h)
    kt, vt = teacher.blocks[layer + 1].keys_values(h)
    diff = (ks - kt) if which == "K" else (vs - vt)
    err = (diff * diff).sum()
    (g,) = torch.autograd.grad(err, h)
    g = g[0, position].detach().numpy()
    mag = float(np.linalg.norm(g))
    if mag <= tol:
        return KVDirection(None, mag, True)
    return KVDirection(g / mag, mag, False)


def token_entropy(logits: torch.Tensor) -> torch.Tensor:
    lp = torch.log_softmax(logits, dim=-1)
    return -(lp.exp() * lp).sum(-1)


def select_positions(teacher: ToyTransformer, tokens, floor_nats: float, per_sequence: int, seed: int = 0,
                     min_position: int = 1) -> list[tuple[int, int]]:
    """Seeded sample of up to ``per_sequence`` positions per sequence whose
    teacher entropy is at least ``floor_nats`` (near-deterministic positions
    excluded)."""
    tokens = torch.as_tensor(np.asarray(tokens), dtype=torch.long)
    with torch.no_grad():
        logits = teacher(tokens)
    H = token_entropy(logits)
    pmax = torch.softmax(logits, -1).amax(-1)
    rng = np.random.default_rng([seed, 0xE7])
    out = []
    for b in range(tokens.shape[0]):
        cand = [
            t for t in range(min_position, tokens.shape[1]) if H[b, t] >= floor_nats and pmax[b, t] < 1 - 1e-12
        ]
        if cand:
            pick = rng.choice(len(cand), size=min(per_sequence, len(cand)), replace=False)
            out.extend((b, cand[i]) for i in sorted(pick))
    return out


@dataclass
class AnisotropyReport:
    rows: list[dict] = field(default_factory=list)  # layer, sample, position, direction, responsiveness, relative

    def directions(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r["direction"] not in seen:
                seen.append(r["direction"])
        return seen

    def summary(self) -> dict[str, dict[str, float]]:
        out = {}
        for name in self.directions():
            vals = np.array([r["relative"] for r in self.rows if r["direction"] == name])
            q25, med, q75 = np.quantile(vals, [0.25, 0.5, 0.75])
            out[name] = {"median": float(med), "q25": float(q25), "q75": float(q75), "n": int(vals.size)}
        return out


def responsiveness(probe: MetricProbe, v) -> float:
    v = np.asarray(v, dtype=np.float64)
    return float(np.linalg.norm(probe.apply(v)) / np.linalg.norm(v))


def anisotropy_report(teacher: ToyTransformer, tokens, layers: Sequence[int], students: dict | None = None,
                      kind: str = "E2E", entropy_floor_nats: float | None = None, per_sequence: int = 2,
                      seed: int = 0, max_steps: int = 20, dense: bool = True) -> AnisotropyReport:
    """Responsiveness ``||M v|| / ||v||`` relative to the leading direction.

    Directions: ``v*`` (power iteration), a seeded Gaussian ``v_r`` and, per
    named student, ``g_K`` and ``g_V``.
    """
    floor = entropy_floor(teacher.cfg.vocab) if entropy_floor_nats is None else entropy_floor_nats
    positions = select_positions(teacher, tokens, floor, per_sequence, seed=seed)
    if not positions:
        raise ValueError(f"no positions reach the entropy floor {floor:.3f} nats; lower it")
    tokens = np.asarray(tokens)
    rng = np.random.default_rng(seed)
    report = AnisotropyReport()
    students = students or {}
    for layer in layers:
        for b, pos in positions:
            probe = make_probe(teacher, tokens[b], layer, pos, kind, dense=dense)
            _, v_star = leading_direction(probe, seed=int(rng.integers(2**31)), max_steps=max_steps)
            dirs = {"v_star": v_star, "random": rng.standard_normal(probe.dim)}
            if layer + 1 < teacher.n_layers:
                for name, st in students.items():
                    for which in ("K", "V"):
                        g = kv_grad_dir(st, teacher, layer, pos, tokens[b], which)
                        if not g.degenerate:
                            dirs[f"g_{which}_{name}"] = g.direction
            r_star = responsiveness(probe, v_star)
            for name, v in dirs.items():
                r = responsiveness(probe, v)
                report.rows.append(
                    {
                        "layer": layer,
                        "sample": b,
                        "position": pos,
                        "direction": name,
                        "responsiveness": r,
                        "relative": r / r_star if r_star > 0 else float("nan"),
                    }
                )
    return report


def top1_agreement(model: ToyTransformer, reference: ToyTransformer, batches, buckets=AGREEMENT_BUCKETS) -> dict:
    """Token-weighted argmax agreement, overall and per reference-entropy bucket (nats)."""
    agree_n = np.zeros(len(buckets) - 1)
    count_n = np.zeros(len(buckets) - 1)
    total_agree = total = 0
    for batch in batches:
        tokens = torch.as_tensor(np.asarray(getattr(batch, "tokens", batch)), dtype=torch.long)
        with torch.no_grad():
            ref = reference(tokens)
            a = (model(tokens).argmax(-1) == ref.argmax(-1)).numpy().ravel()
            H = token_entropy(ref).numpy().ravel()
        total_agree += int(a.sum())
        total += a.size
        idx = np.digitize(H, buckets[1:-1])
        inside = H < buckets[-1]
        for i in range(len(buckets) - 1):
            sel = (idx == i) & inside
            agree_n[i] += a[sel].sum()
            count_n[i] += sel.sum()
    rows = []
    for i in range(len(buckets) - 1):
        rows.append(
            {
                "bucket": f"[{buckets[i]},{buckets[i + 1]})",
                "fraction": count_n[i] / total if total else 0.0,
                "agreement": agree_n[i] / count_n[i] if count_n[i] else float("nan"),
                "count": int(count_n[i]),
            }
        )
    return {"overall": total_agree / total if total else float("nan"), "buckets": rows, "tokens": total}


def peaky_fraction(model: ToyTransformer, batches, threshold: float = 0.9) -> float:
    hits = total = 0
    for batch in batches:
        tokens = torch.as_tensor(np.asarray(getattr(batch, "tokens", batch)), dtype=torch.long)
        with torch.no_grad():
            pmax = torch.softmax(model(tokens), -1).amax(-1)
        hits += int((pmax > threshold).sum())
        total += pmax.numel()
    return hits / total


def bounds_audit(ps: Sequence[np.ndarray]) -> list[dict]:
    rows = []
    for p in ps:
        lam = float(eigh_sym(fisher(p))[0][0])
        bound = fisher_bound(p)
        rows.append({"p_max": float(np.max(p)), "lambda_max": lam, "bound": bound, "slack": bound - lam})
    return rows
