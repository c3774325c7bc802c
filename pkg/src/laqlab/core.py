"""Numeric core: gradients, directional derivatives and a small linalg kit.

Autodiff is torch's reverse mode and ``torch.func.jvp`` in float64. The
symmetric eigensolver is cyclic Jacobi from :mod:`laqlab.kernels`.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping

import numpy as np
import torch

torch.set_default_dtype(torch.float64)

DTYPE = torch.float64


class Gradients(dict):
    """Parameter -> gradient map. ``unused`` names parameters not in the graph."""

    def __init__(self, *args, unused=(), **kwargs):
        super().__init__(*args, **kwargs)
        self.unused = tuple(unused)


def grad(loss: torch.Tensor, params: Mapping[str, torch.Tensor] | Iterable[torch.Tensor]) -> Gradients:
    """Reverse-mode gradients of a scalar ``loss``.

    ``params`` is a name->tensor mapping or a sequence (keys become indices).
    Parameters the loss does not depend on get a zero gradient and are listed
    in ``Gradients.unused``.
    """
    if loss.dim() != 0:
        raise ValueError(f"grad needs a scalar loss, got shape {tuple(loss.shape)}")
    if not isinstance(params, Mapping):
        params = dict(enumerate(params))
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True, retain_graph=True)
    out, unused = {}, []
    for name, t, g in zip(names, tensors, grads):
        if g is None:
            unused.append(name)
            g = torch.zeros_like(t)
        out[name] = g
    return Gradients(out, unused=unused)


def jvp(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Forward-mode directional derivative ``(df/dx) v``."""
    if tuple(v.shape) != tuple(x.shape):
        raise ValueError(f"tangent shape {tuple(v.shape)} does not match primal {tuple(x.shape)}")
    _, tangent = torch.func.jvp(f, (x,), (v,))
    return tangent


def vjp(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Reverse-mode vector-Jacobian product ``(df/dx)^T u``."""
    y, pullback = torch.func.vjp(f, x)
    if tuple(u.shape) != tuple(y.shape):
        raise ValueError(f"cotangent shape {tuple(u.shape)} does not match output {tuple(y.shape)}")
    return pullback(u)[0]


def _as_numpy(a) -> np.ndarray:
    if isinstance(a, torch.Tensor):
        return a.detach().cpu().numpy().astype(np.float64)
    return np.asarray(a, dtype=np.float64)


def eigh_sym(A) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a symmetric matrix, eigenvalues descending.

    The input is symmetrized as ``(A + A^T) / 2`` first.
    """
    A = _as_numpy(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"eigh_sym needs a square matrix, got shape {A.shape}")
    from laqlab import kernels

    return kernels.jacobi_eigh(0.5 * (A + A.T))


def power_iter(
    apply: Callable[[np.ndarray], np.ndarray],
    dim: int,
    max_steps: int = 20,
    seed: int = 0,
    tol: float = 1e-10,
    v0: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    """Leading eigenpair of a symmetric PSD linear map by power iteration.

    Stops early once successive Rayleigh quotients differ by less than
    ``tol``. Returns ``(rayleigh_quotient, unit_vector)``.
    """
    if v0 is None:
        v = np.random.default_rng(seed).standard_normal(dim)
    else:
        v = np.asarray(v0, dtype=np.float64).copy()
    v /= np.linalg.norm(v)
    lam = None
    for step in range(max_steps):
        mv = np.asarray(apply(v), dtype=np.float64)
        if not np.all(np.isfinite(mv)):
            raise FloatingPointError(f"power_iter: non-finite map output at step {step}")
        rayleigh = float(v @ mv)
        norm = np.linalg.norm(mv)
        if norm == 0.0:
            return 0.0, v
        converged = lam is not None and abs(rayleigh - lam) < tol
        lam = rayleigh
        if converged:
            break
        v = mv / norm
    mv = np.asarray(apply(v), dtype=np.float64)
    return float(v @ mv), v


def principal_cosines(U, V) -> np.ndarray:
    """Cosines of the principal angles between span(U) and span(V), descending.

    These are the singular values of ``U^T V``, obtained here from the
    eigenvalues of ``(U^T V)^T (U^T V)``.
    """
    U, V = _as_numpy(U), _as_numpy(V)
    if U.ndim != 2 or U.shape != V.shape:
        raise ValueError(f"bases must share shape (d, k), got {U.shape} and {V.shape}")
    d, k = U.shape
    if k > d:
        raise ValueError(f"k={k} exceeds ambient dimension d={d}")
    G = U.T @ V
    w, _ = eigh_sym(G.T @ G)
    return np.clip(np.sqrt(np.clip(w, 0.0, None)), 0.0, 1.0)


def smooth_l1(a: torch.Tensor, b: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Mean SmoothL1 (Huber with quadratic branch ``0.5 d^2 / beta``)."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = (a - b).abs()
    return torch.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta).mean()
