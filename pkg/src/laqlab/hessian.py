"""Activation second moments and top-k subspace overlap between corpora.

For each (layer, site) the accumulator sums ``phi phi^T`` over every token,
where ``phi`` is the input of one of the block's linear maps:

* ``attn_in``: normalized block input (feeds q, k, v);
* ``attn_out_in``: concatenated head outputs (feeds o);
* ``mlp_in``: normalized mid-block state (feeds gate, up);
* ``mlp_hidden_in``: gated hidden activation (feeds down).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from laqlab.core import eigh_sym, principal_cosines
from laqlab.model import ToyTransformer, forward_trace

log = logging.getLogger(__name__)

SITES = ("attn_in", "attn_out_in", "mlp_in", "mlp_hidden_in")
MAX_EIGVECS = 256
DEFAULT_KS = (4, 8, 16, 32)

Key = tuple[int, str]


@dataclass
class HessianAccumulator:
    layer: int
    site: str
    sum: np.ndarray
    count: int = 0
    _basis: np.ndarray | None = field(default=None, repr=False, compare=False)

    @classmethod
    def empty(cls, layer: int, site: str, dim: int) -> "HessianAccumulator":
        return cls(layer, site, np.zeros((dim, dim)))

    @property
    def dim(self) -> int:
        return self.sum.shape[0]

    def add(self, phi) -> None:
        """Add rows of ``phi`` (``[..., d]``) to the running sum."""
        phi = np.asarray(phi, dtype=np.float64).reshape(-1, self.dim)
        self.sum += phi.T @ phi
        self.count += phi.shape[0]
        self._basis = None

    def merge(self, other: "HessianAccumulator") -> "HessianAccumulator":
        if (self.layer, self.site, self.dim) != (other.layer, other.site, other.dim):
            raise ValueError("cannot merge accumulators for different keys")
        return HessianAccumulator(self.layer, self.site, self.sum + other.sum, self.count + other.count)

    def moment(self) -> np.ndarray:
        if self.count <= 0:
            raise ValueError(f"accumulator ({self.layer}, {self.site}) is empty")
        m = self.sum / self.count
        return (m + m.T) / 2

    def basis(self) -> np.ndarray:
        """Eigenvectors of the normalized moment, descending, truncated to ``MAX_EIGVECS``."""
        if self._basis is None:
            _, V = eigh_sym(self.moment())
            self._basis = V[:, : min(MAX_EIGVECS, self.dim)]
        return self._basis


def accumulate(model: ToyTransformer, corpus, n_sequences: int = 32, seq_len: int = 256, batch_size: int = 8,
               offset: int = 0) -> dict[Key, HessianAccumulator]:
    """Uncentered second moments at every (layer, site) over ``n_sequences`` sequences."""
    acc: dict[Key, HessianAccumulator] = {}
    done, index = 0, offset
    while done < n_sequences:
        n = min(batch_size, n_sequences - done)
        tokens = corpus.sample_batch(n, seq_len, index=index).tokens
        with torch.no_grad():
            _, trace = forward_trace(model, tokens)
        for layer, bt in enumerate(trace.layers):
            for site in SITES:
                phi = bt.sites[site].numpy()
                key = (layer, site)
                if key not in acc:
                    acc[key] = HessianAccumulator.empty(layer, site, phi.shape[-1])
                acc[key].add(phi)
        done += n
        index += 1
    return acc


def overlap(h_cal: HessianAccumulator, h_eval: HessianAccumulator, k: int) -> float:
    """Mean of the ``k`` principal cosines between the top-``k`` eigenspaces."""
    if (h_cal.layer, h_cal.site) != (h_eval.layer, h_eval.site):
        raise ValueError("overlap needs accumulators for the same (layer, site)")
    if not 1 <= k <= min(h_cal.dim, MAX_EIGVECS):
        raise ValueError(f"k={k} outside [1, {min(h_cal.dim, MAX_EIGVECS)}]")
    return float(np.mean(principal_cosines(h_cal.basis()[:, :k], h_eval.basis()[:, :k])))


@dataclass
class SubspaceOverlap:
    k: int
    per_key: dict[Key, float]

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_key.values())))


def subspace_overlap(H_cal: Mapping[Key, HessianAccumulator], H_eval: Mapping[Key, HessianAccumulator],
                     k: int) -> SubspaceOverlap:
    if set(H_cal) != set(H_eval):
        raise ValueError("calibration and evaluation accumulators cover different keys")
    return SubspaceOverlap(k, {key: overlap(H_cal[key], H_eval[key], k) for key in sorted(H_cal)})


@dataclass
class KSweep:
    rows: list[dict]  # k, corpus, mean_cosine, rank

    def ranking(self, k: int) -> list[str]:
        sel = sorted((r for r in self.rows if r["k"] == k), key=lambda r: r["rank"])
        return [r["corpus"] for r in sel]

    def ks(self) -> list[int]:
        return sorted({r["k"] for r in self.rows})

    def invariant(self) -> bool:
        ranks = [tuple(self.ranking(k)) for k in self.ks()]
        return len(set(ranks)) <= 1

    def value(self, k: int, corpus: str) -> float:
        for r in self.rows:
            if r["k"] == k and r["corpus"] == corpus:
                return r["mean_cosine"]
        raise KeyError((k, corpus))


def k_sweep(H_cals: Mapping[str, Mapping[Key, HessianAccumulator]], H_eval: Mapping[Key, HessianAccumulator],
            ks: Iterable[int] = DEFAULT_KS) -> KSweep:
    """Mean overlap per calibration corpus per ``k``; rank 1 is the best aligned."""
    dim = min(min(a.dim for a in H_eval.values()), MAX_EIGVECS)
    valid = []
    for k in ks:
        if 1 <= k <= dim:
            valid.append(int(k))
        else:
            log.warning("dropping k=%s outside [1, %d]", k, dim)
    rows = []
    for k in valid:
        means = {name: subspace_overlap(H, H_eval, k).mean for name, H in H_cals.items()}
        order = sorted(means, key=lambda n: (-means[n], n))
        for name in means:
            rows.append({"k": k, "corpus": name, "mean_cosine": means[name], "rank": order.index(name) + 1})
    return KSweep(rows)


def site_dims(model: ToyTransformer) -> dict[str, int]:
    d, m = model.cfg.d_model, model.cfg.mlp_hidden
    return {"attn_in": d, "attn_out_in": d, "mlp_in": d, "mlp_hidden_in": m}


def to_records(acc: Mapping[Key, HessianAccumulator]) -> dict[str, np.ndarray]:
    """Flatten accumulators into named arrays for an LAQ1 file."""
    out = {}
    for (layer, site), a in sorted(acc.items()):
        out[f"hessian.{layer}.{site}.sum"] = a.sum
        out[f"hessian.{layer}.{site}.count"] = np.array([float(a.count)])
    return out


def from_records(records: Mapping[str, np.ndarray]) -> dict[Key, HessianAccumulator]:
    acc = {}
    for name, arr in records.items():
        parts = name.split(".")
        if len(parts) != 4 or parts[0] != "hessian" or parts[3] != "sum":
            continue
        layer, site = int(parts[1]), parts[2]
        count = int(records[f"hessian.{layer}.{site}.count"][0])
        acc[(layer, site)] = HessianAccumulator(layer, site, np.array(arr, dtype=np.float64), count)
    return acc


def keys_for(layers: Sequence[int]) -> list[Key]:
    return [(l, s) for l in layers for s in SITES]
