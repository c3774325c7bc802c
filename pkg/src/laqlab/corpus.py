"""Seeded synthetic token streams: Markov chains with optional motif injection.

The transition matrix depends only on ``(vocab, alpha, chain_seed)``, so two
specs that differ only in ``seed`` describe the same distribution and emit
different streams. Every batch is a pure function of ``(spec, index)``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

WINDOW_MODES = ("prefix", "response", "middle", "suffix")


@dataclass(frozen=True)
class CorpusSpec:
    vocab: int = 64
    alpha: float = 1.0
    motifs: tuple[tuple[int, ...], ...] = ()
    motif_rate: float = 0.0
    seed: int = 0
    chain_seed: int = 0
    kind: str = "markov"

    def __post_init__(self):
        if self.kind != "markov":
            raise ValueError(f"unknown corpus kind {self.kind!r}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0 <= self.motif_rate < 1:
            raise ValueError("motif_rate must be in [0, 1)")
        object.__setattr__(self, "motifs", tuple(tuple(int(t) for t in m) for m in self.motifs))
        for m in self.motifs:
            if not m or min(m) < 0 or max(m) >= self.vocab:
                raise ValueError(f"motif {m} has tokens outside the vocabulary")

    def with_seed(self, seed: int) -> "CorpusSpec":
        return CorpusSpec(**{**asdict(self), "seed": seed})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["motifs"] = [list(m) for m in self.motifs]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusSpec":
        d = dict(d)
        d["motifs"] = tuple(tuple(m) for m in d.get("motifs", ()))
        return cls(**d)


@dataclass
class TokenBatch:
    tokens: np.ndarray  # int64 [B, T]

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 2:
            raise ValueError("tokens must be a [B, T] matrix")

    @property
    def shape(self):
        return self.tokens.shape


def _dirichlet_rows(rng: np.random.Generator, vocab: int, alpha: float) -> np.ndarray:
    # log-space gamma sampling keeps tiny alpha from underflowing to all-zero rows:
    # Gamma(a) = Gamma(a + 1) * U^(1/a)
    log_g = np.log(rng.gamma(alpha + 1.0, size=(vocab, vocab))) + np.log(rng.uniform(size=(vocab, vocab))) / alpha
    log_g -= log_g.max(axis=1, keepdims=True)
    p = np.exp(log_g)
    return p / p.sum(axis=1, keepdims=True)


class MarkovCorpus:
    """Token stream generator for one :class:`CorpusSpec`."""

    def __init__(self, spec: CorpusSpec):
        self.spec = spec
        rng = np.random.default_rng([spec.chain_seed, spec.vocab, int(round(spec.alpha * 1e6))])
        self.transitions = _dirichlet_rows(rng, spec.vocab, spec.alpha)
        self._cdf = np.cumsum(self.transitions, axis=1)
        self._cdf[:, -1] = 1.0

    def sample_batch(self, batch_size: int, seq_len: int, index: int = 0) -> TokenBatch:
        """Batch number ``index`` of this corpus (deterministic).

        Each step, a sequence not inside a motif starts one with probability
        ``motif_rate``; otherwise it takes a Markov step. The chain resumes
        from a motif's last token.
        """
        spec = self.spec
        rng = np.random.default_rng([spec.seed, index, 0x5EED])
        n_motifs = len(spec.motifs)
        state = rng.integers(spec.vocab, size=batch_size)
        out = np.empty((batch_size, seq_len), dtype=np.int64)
        if n_motifs:
            width = max(len(m) for m in spec.motifs)
            table = np.zeros((n_motifs, width), dtype=np.int64)
            lengths = np.array([len(m) for m in spec.motifs])
            for i, m in enumerate(spec.motifs):
                table[i, : len(m)] = m
        motif_id = np.zeros(batch_size, dtype=np.int64)
        motif_pos = np.full(batch_size, -1)
        rows = np.arange(batch_size)
        for t in range(seq_len):
            u = rng.random((3, batch_size))
            nxt = np.minimum((u[0][:, None] >= self._cdf[state]).sum(axis=1), spec.vocab - 1)
            if n_motifs:
                active = motif_pos >= 0
                begin = ~active & (u[1] < spec.motif_rate)
                motif_id[begin] = np.minimum((u[2][begin] * n_motifs).astype(np.int64), n_motifs - 1)
                motif_pos[begin] = 0
                active |= begin
                tok = np.where(active, table[motif_id, np.maximum(motif_pos, 0)], nxt)
                motif_pos[active] += 1
                motif_pos[motif_pos >= lengths[motif_id]] = -1
            else:
                tok = nxt
            out[rows, t] = tok
            state = tok
        return TokenBatch(out)

    def stream(self, n_tokens: int, index: int = 0) -> np.ndarray:
        return self.sample_batch(1, n_tokens, index).tokens[0]


def make_corpus(spec: CorpusSpec) -> MarkovCorpus:
    return MarkovCorpus(spec)


def sample_batch(gen: MarkovCorpus, batch_size: int, seq_len: int, index: int = 0) -> TokenBatch:
    return gen.sample_batch(batch_size, seq_len, index)


def window(batch: TokenBatch, mode: str, length: int, seed: int = 0, response_start: int | None = None) -> TokenBatch:
    """Cut a ``length``-token window out of every sequence.

    ``prefix``/``suffix`` take the first/last tokens; ``response`` starts at
    ``response_start`` (default a quarter into the sequence); ``middle`` draws
    a seeded offset per sequence from the span that excludes the first and
    last ``length`` tokens.
    """
    tokens = batch.tokens
    B, T = tokens.shape
    if mode not in WINDOW_MODES:
        raise ValueError(f"mode must be one of {WINDOW_MODES}, got {mode!r}")
    if length > T:
        raise ValueError(f"sequence length {T} shorter than window {length}")
    if mode == "prefix":
        return TokenBatch(tokens[:, :length].copy())
    if mode == "suffix":
        return TokenBatch(tokens[:, T - length :].copy())
    if mode == "response":
        start = T // 4 if response_start is None else response_start
        if start + length > T:
            raise ValueError(f"response window [{start}, {start + length}) exceeds length {T}")
        return TokenBatch(tokens[:, start : start + length].copy())
    if T < 3 * length:
        raise ValueError(f"middle window needs T >= 3 * length, got T={T}, length={length}")
    rng = np.random.default_rng([seed, 0x3DD1E])
    offsets = rng.integers(length, T - 2 * length + 1, size=B)
    return TokenBatch(np.stack([tokens[b, o : o + length] for b, o in enumerate(offsets)]))


def spec_hash(spec: CorpusSpec) -> str:
    return hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def make_motifs(vocab: int, n_motifs: int, length: int, seed: int) -> tuple[tuple[int, ...], ...]:
    rng = np.random.default_rng([seed, 0x4D071F])
    return tuple(tuple(int(t) for t in rng.integers(vocab, size=length)) for _ in range(n_motifs))


def generic_spec(vocab: int = 64, seed: int = 0) -> CorpusSpec:
    """Corpus "A": diffuse transitions, no motifs."""
    return CorpusSpec(vocab=vocab, alpha=2.0, seed=seed, chain_seed=11)


def reasoning_spec(vocab: int = 64, seed: int = 1) -> CorpusSpec:
    """Corpus "B": sharp transitions with injected recurring motifs."""
    return CorpusSpec(
        vocab=vocab,
        alpha=0.05,
        motifs=make_motifs(vocab, 6, 5, seed=23),
        motif_rate=0.08,
        seed=seed,
        chain_seed=23,
    )
