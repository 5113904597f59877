"""Central finite-difference gradient verification (float64 mode)."""

from __future__ import annotations

import numpy as np


def max_relative_error(forward_scalar, params, h=1e-4):
    """Compare reverse-mode gradients of `forward_scalar()` against central
    finite differences, perturbing every element of every tensor in `params`.

    `forward_scalar` must rebuild the graph on each call and return a scalar
    Tensor. Returns the worst relative error over all parameter elements.
    """
    params = list(params)
    loss = forward_scalar()
    for p in params:
        p.grad = None
    loss.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        for p in params
    ]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = forward_scalar().item()
            flat[i] = orig - h
            fm = forward_scalar().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            err = abs(a_flat[i] - numeric) / max(abs(a_flat[i]) + abs(numeric), 1e-2)
            worst = max(worst, err)
    return worst
