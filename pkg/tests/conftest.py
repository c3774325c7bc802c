import dataclasses
import os
from pathlib import Path

import numpy as np
import pytest
import torch

import laqlab  # noqa: F401  sets the float64 default
from laqlab.corpus import make_corpus
from laqlab.experiments import LAB_MODEL, TeacherConfig, eval_batches, get_teacher, lab_corpora
from laqlab.model import ModelConfig, init_teacher
from laqlab.qat import TrainConfig, train_e2e, train_layerwise
from laqlab.quant import QuantSpec

MICRO = ModelConfig(vocab=16, d_model=8, n_layers=2, n_heads=2, mlp_hidden=16, max_seq=32)
SMALL = ModelConfig()

_RESULTS: list[tuple[int, bool, str]] = []


def record(criterion: int, passed: bool, detail: str) -> None:
    line = f"criterion {criterion:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    _RESULTS.append((criterion, passed, line))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in sorted(_RESULTS):
        terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def micro():
    return init_teacher(MICRO, seed=3).requires_grad_(False)


@pytest.fixture(scope="session")
def small():
    return init_teacher(SMALL, seed=0).requires_grad_(False)


def _cache_root(config) -> Path:
    env = os.environ.get("LAQLAB_CACHE")
    return Path(env) if env else Path(config.cache.mkdir("laqlab"))


class Lab:
    """Pretrained desk-scale teacher plus memoized students.

    Students are keyed by every setting that affects them, so tests that ask
    for the same recipe share one training run.
    """

    train = TrainConfig(epochs=10, n_samples=64, batch_size=8, seq_len=64)

    def __init__(self, cache: Path):
        self.specs = lab_corpora(LAB_MODEL.vocab)
        self.teacher = get_teacher(LAB_MODEL, self.specs["B"], TeacherConfig(), cache)
        self._students = {}

    def corpus(self, name: str):
        return make_corpus(self.specs[name])

    def eval(self, n_batches: int = 4):
        return eval_batches(self.corpus("B_prime"), n_batches)

    def layerwise(self, calib: str = "B", depth=0, seed: int = 0, bits: int = 3):
        key = ("lw", calib, depth, seed, bits)
        if key not in self._students:
            cfg = dataclasses.replace(self.train, lookahead=depth, seed=seed)
            self._students[key] = train_layerwise(self.teacher, QuantSpec(bits, 32), cfg, self.corpus(calib)).student
        return self._students[key]

    def e2e(self, seed: int = 0, bits: int = 3, aux: float = 0.0):
        key = ("e2e", seed, bits, aux)
        if key not in self._students:
            init = self.layerwise("B", 0, seed, bits)
            cfg = dataclasses.replace(self.train, seed=seed)
            self._students[key], _ = train_e2e(
                self.teacher, QuantSpec(bits, 32), cfg, self.corpus("B"), aux_k_weight=aux, init=init
            )
        return self._students[key]


@pytest.fixture(scope="session")
def lab(request):
    torch.set_num_threads(1)
    return Lab(_cache_root(request.config))
