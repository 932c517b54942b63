"""Independent numerical oracles: central finite differences and brute-force helpers."""

from __future__ import annotations

import itertools

import numpy as np
import torch


def central_difference(fn, tensor: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    """Numerical gradient of the scalar ``fn()`` with respect to every entry of ``tensor``."""
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.data.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = float(fn())
        flat[i] = orig - eps
        down = float(fn())
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


ZERO_GRAD_FLOOR = 1e-6


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    """Norm-wise relative error.

    The denominator has a small floor so parameters whose true gradient is
    identically zero (e.g. a key bias, which softmax cancels) compare on
    absolute error instead of amplifying finite-difference noise.
    """
    a, n = analytic.detach().reshape(-1), numeric.reshape(-1)
    scale = max(float(a.norm()), float(n.norm()), ZERO_GRAD_FLOOR)
    return float((a - n).norm()) / scale


def check_gradients(fn, params, eps: float = 1e-3) -> dict[str, float]:
    """Relative error per named parameter between autograd and central differences."""
    params = list(params)
    for _, p in params:
        p.grad = None
    fn().backward()
    errors = {}
    with torch.no_grad():
        for name, p in params:
            analytic = p.grad.clone() if p.grad is not None else torch.zeros_like(p)
            errors[name] = relative_error(analytic, central_difference(fn, p, eps))
    return errors


def brute_force_lcs(a, b) -> int:
    """Longest common subsequence by enumerating every subsequence of the shorter input."""
    if len(a) > len(b):
        a, b = b, a
    for k in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), k):
            sub = [a[i] for i in idx]
            it = iter(b)
            if all(tok in it for tok in sub):
                return k
    return 0


def softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()
