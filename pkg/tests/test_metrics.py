import math

import numpy as np
import pytest
import torch

from laqlab import metrics
from laqlab.model import identity_block_, init_teacher
from laqlab.quant import QuantSpec, rtn_quantize

from conftest import MICRO


@pytest.fixture
def tokens(rng):
    return rng.integers(0, MICRO.vocab, (1, 7))


def dense_metric(model, tokens, layer, position, kind):
    """Materialize M from the full autograd Jacobian of the truncated map."""
    t = torch.as_tensor(tokens[:, : position + 1])
    h = model.hidden_at(t, layer + 1).detach()

    def f(x):
        hh = h.clone()
        hh[0, position] = x
        stop = model.n_layers if kind == "E2E" else layer + 2
        y = model.run_layers(hh, layer + 1, stop)[0, position]
        return model.logits_from_hidden(y) if kind == "E2E" else y

    x0 = h[0, position].clone()
    J = torch.autograd.functional.jacobian(f, x0).numpy()
    if kind == "LA":
        return J.T @ J, J
    p = torch.softmax(f(x0), -1).detach().numpy()
    H = np.diag(p) - np.outer(p, p)
    return J.T @ H @ J, J


def test_fisher_examples(rng):
    np.testing.assert_array_equal(metrics.fisher(np.eye(4)[2]), np.zeros((4, 4)))
    F = metrics.fisher([0.5, 0.5])
    np.testing.assert_allclose(F, [[0.25, -0.25], [-0.25, 0.25]])
    assert np.linalg.eigvalsh(F)[-1] == pytest.approx(0.5)
    p = rng.dirichlet(np.ones(16))
    F = metrics.fisher(p)
    for i in range(16):
        for j in range(16):
            assert F[i, j] == pytest.approx((p[i] if i == j else 0.0) - p[i] * p[j], abs=1e-16)
    np.testing.assert_allclose(F.sum(1), 0, atol=1e-15)
    with pytest.raises(ValueError, match="negative"):
        metrics.fisher([1.5, -0.5])
    with pytest.raises(ValueError, match="sums"):
        metrics.fisher([0.5, 0.4])


def test_fisher_bound(rng):
    assert metrics.fisher_bound(np.array([0.99, 0.01])) == pytest.approx(0.0198)
    assert metrics.fisher_bound(np.array([0.5, 0.5])) == 0.5
    for _ in range(1000):
        p = rng.dirichlet(np.full(rng.integers(2, 20), rng.uniform(0.05, 2)))
        b = metrics.fisher_bound(p)
        assert 0 <= b <= 0.5
        assert np.linalg.eigvalsh(metrics.fisher(p))[-1] <= b + 1e-9


def test_bounds_audit_slack_nonnegative(rng):
    rows = metrics.bounds_audit([rng.dirichlet(np.ones(8)) for _ in range(5)])
    assert all(r["slack"] >= -1e-12 and r["lambda_max"] <= 0.5 for r in rows)


def test_entropy_floor_scaling():
    assert metrics.entropy_floor(151_936) == pytest.approx(2.0)
    assert metrics.entropy_floor(64) == pytest.approx(2 * math.log(64) / math.log(151_936))


def test_lw_probe_is_identity(micro, tokens, rng):
    probe = metrics.make_probe(micro, tokens, 0, 3, "LW")
    v = rng.standard_normal(MICRO.d_model)
    assert np.array_equal(metrics.metric_apply(probe, v), v)
    lam, _ = metrics.leading_direction(probe, seed=4)
    assert lam == pytest.approx(1.0, abs=1e-15)


def test_la_probe_on_identity_block(tokens, rng):
    m = init_teacher(MICRO, seed=2)
    identity_block_(m.blocks[1])
    probe = metrics.make_probe(m, tokens, 0, 4, "LA")
    v = rng.standard_normal(MICRO.d_model)
    np.testing.assert_allclose(metrics.metric_apply(probe, v), v, atol=1e-10)


@pytest.mark.parametrize("kind,layer", [("E2E", 0), ("E2E", 1), ("LA", 0)])
@pytest.mark.parametrize("dense", [False, True])
def test_probe_matches_dense_oracle(micro, tokens, rng, kind, layer, dense):
    pos = 5
    M, J = dense_metric(micro, tokens, layer, pos, kind)
    probe = metrics.make_probe(micro, tokens, layer, pos, kind, dense=dense)
    for _ in range(3):
        v = rng.standard_normal(MICRO.d_model)
        got = metrics.metric_apply(probe, v)
        assert np.linalg.norm(got - M @ v) <= 1e-6 * np.linalg.norm(M @ v)
    np.testing.assert_allclose(metrics.dense_jacobian(probe), J, rtol=1e-9, atol=1e-12)


def test_probe_symmetric_psd(micro, tokens, rng):
    probe = metrics.make_probe(micro, tokens, 0, 6, "E2E")
    u, v = rng.standard_normal((2, MICRO.d_model))
    a, b = u @ probe.apply(v), v @ probe.apply(u)
    assert abs(a - b) <= 1e-6 * max(abs(a), abs(b))
    assert v @ probe.apply(v) >= -1e-14


def test_probe_errors(micro, tokens):
    with pytest.raises(IndexError):
        metrics.make_probe(micro, tokens, 0, 7, "E2E")
    with pytest.raises(ValueError):
        metrics.make_probe(micro, tokens, 0, 1, "XX")
    probe = metrics.make_probe(micro, tokens, 0, 1, "E2E")
    with pytest.raises(ValueError, match="shape"):
        metrics.metric_apply(probe, np.zeros(3))


def test_probe_causal_truncation(micro, rng):
    a = rng.integers(0, MICRO.vocab, (1, 8))
    b = a.copy()
    b[0, 5:] = (b[0, 5:] + 3) % MICRO.vocab
    v = rng.standard_normal(MICRO.d_model)
    pa, pb = metrics.make_probe(micro, a, 0, 4), metrics.make_probe(micro, b, 0, 4)
    np.testing.assert_array_equal(pa.apply(v), pb.apply(v))


def test_leading_direction_matches_eigh(micro, tokens):
    M, _ = dense_metric(micro, tokens, 0, 5, "E2E")
    probe = metrics.make_probe(micro, tokens, 0, 5, "E2E", dense=True)
    lam, v = metrics.leading_direction(probe, seed=0, max_steps=200)
    w, V = np.linalg.eigh(M)
    assert lam == pytest.approx(w[-1], rel=1e-3)
    assert abs(v @ V[:, -1]) > 0.99


def test_leading_direction_diag_dominant_la(tokens):
    m = init_teacher(MICRO, seed=2)
    identity_block_(m.blocks[1])
    probe = metrics.make_probe(m, tokens, 0, 3, "LA")
    base = probe.apply  # identity block: M = I, then conjugate by a diagonal
    scale = np.ones(MICRO.d_model)
    scale[2] = 3.0
    probe.apply = lambda v: scale * base(scale * v)
    _, v = metrics.leading_direction(probe, seed=1)
    assert abs(abs(v[2]) - 1) < 1e-6


def test_sigma_max_constructed_case(tokens):
    m = init_teacher(MICRO, seed=5)
    identity_block_(m.blocks[1])
    row = np.zeros(MICRO.d_model)
    row[3] = 2.5
    with torch.no_grad():
        m.head.zero_()
        m.head[0] = torch.as_tensor(row)
    pos, layer = 4, MICRO.n_layers - 1
    sigma = metrics.sigma_max_J(m, tokens, layer, pos, seed=0)
    # logits_0 = row . rmsnorm(h): the Jacobian is row^T (I - h h^T/|h|^2) / rms(h)
    h = m.hidden_at(torch.as_tensor(tokens[:, : pos + 1]), MICRO.n_layers)[0, pos].detach().numpy()
    rms = np.sqrt(np.mean(h * h))
    proj = row - h * (h @ row) / (h @ h)
    assert sigma == pytest.approx(np.linalg.norm(proj) / rms, rel=1e-8)


def test_sigma_max_matches_svd(micro, tokens):
    _, J = dense_metric(micro, tokens, 0, 6, "E2E")
    sigma = metrics.sigma_max_J(micro, tokens, 0, 6, seed=2)
    assert sigma == pytest.approx(np.linalg.svd(J, compute_uv=False)[0], rel=0.01)


def test_kv_grad_dir(micro, tokens):
    g = metrics.kv_grad_dir(micro, micro, 0, 4, tokens, "K")
    assert g.degenerate and g.direction is None and g.magnitude == 0.0
    rtn = rtn_quantize(micro, QuantSpec(3, 8))
    for which in ("K", "V"):
        g = metrics.kv_grad_dir(rtn, micro, 0, 4, tokens, which)
        assert not g.degenerate and g.magnitude > 0
        assert np.linalg.norm(g.direction) == pytest.approx(1.0)
    with pytest.raises(IndexError):
        metrics.kv_grad_dir(rtn, micro, MICRO.n_layers - 1, 4, tokens)
    with pytest.raises(ValueError):
        metrics.kv_grad_dir(rtn, micro, 0, 4, tokens, "Q")


def test_kv_grad_dir_matches_finite_difference(micro, tokens, rng):
    rtn = rtn_quantize(micro, QuantSpec(3, 8))
    pos = 3
    h = micro.hidden_at(torch.as_tensor(tokens[:, : pos + 1]), 1).detach()

    def err(x):
        hh = h.clone()
        hh[0, pos] = torch.as_tensor(x)
        ks, _ = rtn.blocks[1].keys_values(hh)
        kt, _ = micro.blocks[1].keys_values(hh)
        return float(((ks - kt) ** 2).sum())

    x0 = h[0, pos].numpy()
    eps = 1e-6
    fd = np.array([(err(x0 + eps * e) - err(x0 - eps * e)) / (2 * eps) for e in np.eye(MICRO.d_model)])
    g = metrics.kv_grad_dir(rtn, micro, 0, pos, tokens, "K")
    np.testing.assert_allclose(g.direction * g.magnitude, fd, rtol=1e-5, atol=1e-9)


def test_select_positions_respects_floor(micro, rng):
    toks = rng.integers(0, MICRO.vocab, (4, 12))
    pos = metrics.select_positions(micro, toks, 0.5, per_sequence=3, seed=1)
    with torch.no_grad():
        H = metrics.token_entropy(micro(torch.as_tensor(toks)))
    assert pos and all(H[b, t] >= 0.5 and t >= 1 for b, t in pos)
    assert pos == metrics.select_positions(micro, toks, 0.5, per_sequence=3, seed=1)
    assert metrics.select_positions(micro, toks, 100.0, 3) == []


def test_anisotropy_report(micro, rng):
    toks = rng.integers(0, MICRO.vocab, (2, 10))
    rtn = rtn_quantize(micro, QuantSpec(3, 8))
    rep = metrics.anisotropy_report(micro, toks, [0, 1], {"RTN": rtn}, "E2E", entropy_floor_nats=0.0, per_sequence=2)
    s = rep.summary()
    assert s["v_star"]["median"] == 1.0 and all(r["relative"] == 1.0 for r in rep.rows if r["direction"] == "v_star")
    assert {"random", "g_K_RTN", "g_V_RTN"} <= set(s)
    assert all(0 <= r["relative"] <= 1 + 1e-6 for r in rep.rows)
    lw = metrics.anisotropy_report(micro, toks, [0], {"RTN": rtn}, "LW", entropy_floor_nats=0.0)
    assert all(r["relative"] == 1.0 for r in lw.rows)
    with pytest.raises(ValueError, match="lower"):
        metrics.anisotropy_report(micro, toks, [0], kind="E2E", entropy_floor_nats=100.0)


def test_top1_agreement(micro, rng):
    batches = [rng.integers(0, MICRO.vocab, (2, 9)) for _ in range(3)]
    same = metrics.top1_agreement(micro, micro, batches)
    assert same["overall"] == 1.0 and same["tokens"] == 54
    assert sum(r["count"] for r in same["buckets"]) == 54  # uniform-16 entropy < 5 nats
    other = metrics.top1_agreement(init_teacher(MICRO, seed=9), micro, batches)
    # oracle: direct argmax comparison
    with torch.no_grad():
        ref = np.mean([(init_teacher(MICRO, 9)(torch.as_tensor(b)).argmax(-1) == micro(torch.as_tensor(b)).argmax(-1)).double().mean() for b in batches])
    assert other["overall"] == pytest.approx(float(ref))
    assert sum(r["fraction"] for r in other["buckets"]) == pytest.approx(1.0)


def test_peaky_fraction(micro, rng):
    batches = [rng.integers(0, MICRO.vocab, (2, 9))]
    assert metrics.peaky_fraction(micro, batches, threshold=0.0) == 1.0
    assert metrics.peaky_fraction(micro, batches, threshold=1.0) == 0.0
