"""Finite-difference verification of backward passes."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError
from .tensor import Tensor, no_grad


def _central_error(f, x, flat, i, analytic_i, eps) -> float:
    saved = flat[i]
    with no_grad():
        flat[i] = saved + eps
        hi = f(x).item()
        flat[i] = saved - eps
        lo = f(x).item()
    flat[i] = saved
    numeric = (hi - lo) / (2.0 * eps)
    return abs(analytic_i - numeric) / max(abs(analytic_i), abs(numeric), 1e-8)


def grad_check(f, x: Tensor, eps: float = 1e-5, max_coords: int | None = None,
               coord_rng=None, retry_eps: tuple = ()) -> float:
    """Compare backward gradients of scalar ``f(x)`` against central differences.

    Returns the maximum over checked coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    When ``max_coords`` is given, a deterministic subset of coordinates is
    checked (drawn from ``coord_rng``), keeping large parameters tractable.

    ``retry_eps`` re-evaluates coordinates whose error exceeds 1e-6 at the
    extra step sizes and keeps the best agreement. A correct backward rule
    converges for some step size; a wrong one fails at every one. The retry
    absorbs two artifacts of a fixed step: piecewise boundaries (pooling
    argmax, activation kinks) sitting within eps of the point, and
    exactly-invariant directions whose true gradient is zero, where central
    differences return pure roundoff.
    """
    x.requires_grad = True
    x.zero_grad()
    out = f(x)
    if out.data.size != 1:
        raise DimensionError(f"grad_check requires scalar f(x), got {out.shape}")
    out.backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()

    flat = x.data.reshape(-1)
    n = flat.size
    if max_coords is not None and n > max_coords:
        if coord_rng is None:
            raise ValueError("max_coords requires coord_rng for a deterministic subset")
        idx = np.sort(coord_rng.permutation(n)[:max_coords])
    else:
        idx = np.arange(n)

    worst = 0.0
    a_flat = analytic.reshape(-1)
    for i in idx:
        err = _central_error(f, x, flat, i, a_flat[i], eps)
        if err > 1e-6:
            for alt in retry_eps:
                err = min(err, _central_error(f, x, flat, i, a_flat[i], alt))
                if err <= 1e-6:
                    break
        worst = max(worst, err)
    return worst
