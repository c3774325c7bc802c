import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from laqlab import core


def test_grad_polynomial_and_sum():
    x = torch.tensor(3.0, requires_grad=True)
    assert float(core.grad(x * x, [x])[0]) == 6.0
    v = torch.randn(5, requires_grad=True)
    assert torch.equal(core.grad(v.sum(), {"v": v})["v"], torch.ones(5))


def test_grad_errors_and_unused():
    a = torch.randn(3, requires_grad=True)
    b = torch.randn(2, requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        core.grad(a * 2, [a])
    g = core.grad((a * a).sum(), {"a": a, "b": b})
    assert g.unused == ("b",)
    assert torch.equal(g["b"], torch.zeros(2))


def test_grad_mlp_matches_finite_differences(rng):
    W1 = torch.as_tensor(rng.standard_normal((6, 4)), dtype=torch.float64).requires_grad_(True)
    W2 = torch.as_tensor(rng.standard_normal((3, 6)), dtype=torch.float64).requires_grad_(True)
    x = torch.as_tensor(rng.standard_normal(4))

    def f(w1, w2):
        return (torch.tanh(w2 @ torch.tanh(w1 @ x)) ** 2).sum()

    g = core.grad(f(W1, W2), [W1, W2])
    h = 1e-5
    for i, W in enumerate((W1, W2)):
        num = np.zeros(W.shape)
        for idx in np.ndindex(*W.shape):
            E = torch.zeros(W.shape)
            E[idx] = h
            args_p = [W1.detach(), W2.detach()]
            args_m = [W1.detach(), W2.detach()]
            args_p[i] = args_p[i] + E
            args_m[i] = args_m[i] - E
            num[idx] = (float(f(*args_p)) - float(f(*args_m))) / (2 * h)
        np.testing.assert_allclose(g[i].numpy(), num, rtol=1e-4, atol=1e-9)


def test_jvp_examples(rng):
    x = torch.as_tensor(rng.standard_normal(4))
    v = torch.as_tensor(rng.standard_normal(4))
    assert torch.equal(core.jvp(lambda t: t, x, v), v)
    A = torch.as_tensor(rng.standard_normal((3, 4)))
    torch.testing.assert_close(core.jvp(lambda t: A @ t, x, v), A @ v, rtol=0, atol=1e-14)
    with pytest.raises(ValueError, match="shape"):
        core.jvp(lambda t: t, x, torch.zeros(3))


def test_jvp_matches_central_difference(rng):
    W = torch.as_tensor(rng.standard_normal((5, 4)))
    f = lambda t: torch.sin(W @ torch.tanh(t))  # noqa: E731
    x = torch.as_tensor(rng.standard_normal(4))
    v = torch.as_tensor(rng.standard_normal(4))
    h = 1e-5
    fd = (f(x + h * v) - f(x - h * v)) / (2 * h)
    np.testing.assert_allclose(core.jvp(f, x, v).numpy(), fd.numpy(), rtol=1e-4, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_jvp_vjp_transpose_consistency(seed):
    g = np.random.default_rng(seed)
    W = torch.as_tensor(g.standard_normal((3, 5)))
    f = lambda t: torch.tanh(W @ t) * t[:3]  # noqa: E731
    x, v, u = (torch.as_tensor(g.standard_normal(n)) for n in (5, 5, 3))
    lhs = float(core.jvp(f, x, v) @ u)
    rhs = float(v @ core.vjp(f, x, u))
    assert abs(lhs - rhs) <= 1e-8 * max(abs(lhs), 1e-12) + 1e-14


def test_eigh_examples():
    w, V = core.eigh_sym(np.eye(3))
    np.testing.assert_allclose(w, [1, 1, 1])
    w, V = core.eigh_sym(np.diag([3.0, 1.0, 2.0]))
    np.testing.assert_allclose(w, [3, 2, 1])
    with pytest.raises(ValueError):
        core.eigh_sym(np.zeros((2, 3)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 24))
def test_eigh_reconstruction_and_trace(seed, n):
    g = np.random.default_rng(seed)
    A = g.standard_normal((n, n))
    A = (A + A.T) / 2
    w, V = core.eigh_sym(A)
    norm = np.linalg.norm(A)
    assert np.all(np.diff(w) <= 1e-12)
    np.testing.assert_allclose(V @ np.diag(w) @ V.T, A, atol=1e-8 * max(norm, 1))
    np.testing.assert_allclose(V.T @ V, np.eye(n), atol=1e-8)
    np.testing.assert_allclose(A @ V, V * w, atol=1e-7 * max(norm, 1))
    assert abs(w.sum() - np.trace(A)) <= 1e-8 * max(norm, 1)
    np.testing.assert_allclose(w, np.linalg.eigvalsh(A)[::-1], atol=1e-9 * max(norm, 1))


def test_power_iter_examples():
    lam, v = core.power_iter(lambda x: np.diag([5.0, 1.0]) @ x, 2, seed=0)
    assert abs(lam - 5) < 1e-6
    assert abs(abs(v[0]) - 1) < 1e-6
    lam, v = core.power_iter(lambda x: x, 7, seed=3)
    assert abs(lam - 1) < 1e-15
    assert abs(np.linalg.norm(v) - 1) < 1e-15


def test_power_iter_top_eigenvalue(rng):
    n = 32
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    w = np.concatenate([[3.0], np.linspace(1.8, 0.0, n - 1)])  # gap 3 / 1.8 > 1.5
    M = Q @ np.diag(w) @ Q.T
    lam, _ = core.power_iter(lambda x: M @ x, n, max_steps=20, seed=1)
    assert abs(lam - core.eigh_sym(M)[0][0]) / 3.0 < 0.01


def test_power_iter_deterministic_and_nan():
    M = np.diag([2.0, 1.0, 0.5])
    a = core.power_iter(lambda x: M @ x, 3, seed=9)
    b = core.power_iter(lambda x: M @ x, 3, seed=9)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])
    with pytest.raises(FloatingPointError, match="step 0"):
        core.power_iter(lambda x: x * np.nan, 3)


def test_principal_cosines_examples(rng):
    U, _ = np.linalg.qr(rng.standard_normal((6, 3)))
    np.testing.assert_allclose(core.principal_cosines(U, U), 1.0, atol=1e-12)
    E = np.eye(4)
    np.testing.assert_allclose(core.principal_cosines(E[:, :2], E[:, 2:]), 0.0, atol=1e-15)
    with pytest.raises(ValueError):
        core.principal_cosines(np.ones((2, 3)), np.ones((2, 3)))


def test_principal_cosines_svd_oracle_and_permutation(rng):
    U, _ = np.linalg.qr(rng.standard_normal((32, 4)))
    V, _ = np.linalg.qr(rng.standard_normal((32, 4)))
    c = core.principal_cosines(U, V)
    np.testing.assert_allclose(c, np.linalg.svd(U.T @ V, compute_uv=False), atol=1e-10)
    perm = rng.permutation(4)
    np.testing.assert_allclose(core.principal_cosines(U[:, perm], V[:, ::-1]), c, atol=1e-10)
    assert np.all(np.diff(c) <= 1e-15) and np.all((0 <= c) & (c <= 1))


def test_smooth_l1_examples():
    a = torch.randn(4, 3)
    assert float(core.smooth_l1(a, a)) == 0.0
    assert float(core.smooth_l1(torch.tensor(2.0), torch.tensor(0.0), 1.0)) == 1.5
    assert float(core.smooth_l1(torch.tensor(0.5), torch.tensor(0.0), 1.0)) == 0.125
    with pytest.raises(ValueError):
        core.smooth_l1(torch.zeros(2), torch.zeros(3))
    with pytest.raises(ValueError):
        core.smooth_l1(a, a, beta=0.0)
