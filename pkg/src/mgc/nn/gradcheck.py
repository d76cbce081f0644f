"""Central-difference gradient checking against reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Return the max relative error between analytic and numeric gradients.

    ``f`` must be a deterministic closure that rebuilds the graph from the
    current parameter values and returns a scalar tensor. Relative error per
    coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: f is not finite")
    out.backward()
    worst = 0.0
    for p in params:
        if not p.data.flags.c_contiguous:
            p.data = np.ascontiguousarray(p.data)
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("grad_check: f is not finite")
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
