import dataclasses

import numpy as np
import pytest
import torch

from laqlab import fidelity
from laqlab.corpus import make_corpus, reasoning_spec
from laqlab.model import forward_trace
from laqlab.qat import TrainConfig
from laqlab.quant import PROJECTIONS, QuantSpec, rtn_quantize

from conftest import MICRO

TINY = TrainConfig(epochs=2, n_samples=8, batch_size=4, seq_len=12)


@pytest.fixture(scope="module")
def corpus():
    return make_corpus(reasoning_spec(MICRO.vocab))


def test_teacher_has_zero_error(micro, corpus):
    rep = fidelity.kv_rmse(micro, micro, corpus, n_batches=2, batch_size=2, seq_len=8)
    assert rep.k_mean == 0.0 and rep.v_mean == 0.0
    assert all(v == 0.0 for v in rep.proj_mean().values())
    assert len(list(rep.kv_rows())) == MICRO.n_layers
    assert [r["projection"] for r in rep.proj_rows()] == list(PROJECTIONS)


def test_rmse_matches_direct_oracle(micro, rng):
    student = rtn_quantize(micro, QuantSpec(3, 8))
    batches = [rng.integers(0, MICRO.vocab, (2, 6)) for _ in range(2)]
    rep = fidelity.fidelity(student, micro, batches)
    # oracle: per-token vectors flattened over heads, explicit loop
    errs = []
    for b in batches:
        with torch.no_grad():
            _, s = forward_trace(student, b)
            _, t = forward_trace(micro, b)
        for i in range(2):
            for j in range(6):
                d = (s.layers[1].keys[i, j] - t.layers[1].keys[i, j]).numpy().ravel()
                errs.append(np.sqrt(np.mean(d * d)))
    assert rep.k_rmse[1] == pytest.approx(np.mean(errs), rel=1e-12)
    assert rep.k_mean > 0


def test_fidelity_needs_tokens(micro):
    with pytest.raises(ValueError):
        fidelity.fidelity(micro, micro, [])


def test_pearson(rng):
    x = rng.standard_normal(20)
    assert fidelity.pearson(x, 2 * x + 1) == pytest.approx(1.0)
    assert fidelity.pearson(x, -x) == pytest.approx(-1.0)
    y = rng.standard_normal(20)
    assert fidelity.pearson(x, y) == pytest.approx(np.corrcoef(x, y)[0, 1], abs=1e-12)
    with pytest.raises(ValueError, match="3 points"):
        fidelity.pearson([1, 2], [3, 4])
    with pytest.raises(ValueError, match="zero-variance"):
        fidelity.pearson([1, 1, 1], [1, 2, 3])


def test_recipes():
    rs = fidelity.default_recipes(seed=2)
    assert len(rs) == 8 and len({r.name for r in rs}) == 8
    assert {r.bits for r in rs} == {3, 4}
    with pytest.raises(ValueError):
        fidelity.Recipe("GPTQ", 3)


def test_build_student_methods(micro, corpus):
    for method in fidelity.METHODS:
        st = fidelity.build_student(fidelity.Recipe(method, 3, group_size=8), micro, corpus, TINY, e2e_steps=2)
        assert all(p.frozen for b in st.blocks for p in b.projections().values())


def test_checkpoint_sweep(micro, corpus):
    students = [(fidelity.Recipe("RTN", b, group_size=8), rtn_quantize(micro, QuantSpec(b, 8))) for b in (2, 3, 4, 6)]
    rep = fidelity.checkpoint_sweep(students, micro, corpus, n_batches=1, batch_size=2, seq_len=8)
    assert len(rep.rows) == 4
    ks = rep.series("k_rmse")
    assert ks[0] > ks[-1]
    corr = rep.correlations()
    assert set(corr) == {"k_agreement", "v_agreement", "k_v"}
    with pytest.raises(ValueError, match="at least 3"):
        fidelity.checkpoint_sweep(students[:2], micro, corpus)
    same = [(fidelity.Recipe("RTN", 3, s, 8), rtn_quantize(micro, QuantSpec(3, 8))) for s in range(3)]
    with pytest.raises(ValueError, match="zero-variance"):
        fidelity.checkpoint_sweep(same, micro, corpus, n_batches=1, batch_size=2, seq_len=8).correlations()


def test_eval_batches_are_held_out(corpus):
    from laqlab.qat import calibration_set

    ev = fidelity.eval_batches(corpus, 2, 4, 12)
    cal = calibration_set(corpus, dataclasses.replace(TINY))
    assert not any(np.array_equal(e[i], c.numpy()) for e in ev for i in range(4) for c in cal)
