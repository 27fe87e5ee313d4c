"""Finite-difference verification of tape gradients.

Analytic gradients are compared against central differences. The check runs
in float64: parameter data is upcast in place for the duration (ops follow
numpy promotion), then restored. Because tensors are mutated in place, loss
closures that capture module parameters directly work unchanged.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


def grad_check(loss_fn: Callable, params, eps: float = 1e-3,
               max_entries_per_param: int = 20, seed: int = 0) -> float:
    """Return the worst relative gradient error over sampled entries.

    `params` is a name -> Tensor mapping (a ParamStore works). For each
    parameter a subset of entries is probed; the relative error for one entry
    is |analytic - fd| / max(|analytic|, |fd|, 1e-8). Raises on non-finite
    losses or gradients, naming the offending parameter.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    entries = list(params.items())
    saved = [(t, t.data, t.requires_grad, t.grad) for _, t in entries]
    try:
        for _, t in entries:
            t.data = t.data.astype(np.float64)
            t.requires_grad = True
            t.grad = None
        loss = loss_fn(params)
        if not np.isfinite(loss.data).all():
            raise FloatingPointError("loss is non-finite before any perturbation")
        loss.backward()
        analytic = {}
        for name, t in entries:
            if t.grad is None:
                # constant loss wrt this parameter: analytic gradient is zero
                analytic[name] = np.zeros_like(t.data)
            else:
                if not np.isfinite(t.grad).all():
                    raise FloatingPointError(
                        f"non-finite analytic gradient in parameter '{name}'")
                analytic[name] = t.grad.copy()
            t.grad = None

        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))
        worst = 0.0
        for name, t in entries:
            n = t.data.size
            if n <= max_entries_per_param:
                idxs = np.arange(n)
            else:
                idxs = rng.choice(n, size=max_entries_per_param, replace=False)
            flat = t.data.reshape(-1)
            gflat = analytic[name].reshape(-1)
            for i in idxs:
                orig = flat[i]
                with no_grad():
                    flat[i] = orig + eps
                    up = float(loss_fn(params).data)
                    flat[i] = orig - eps
                    dn = float(loss_fn(params).data)
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(dn)):
                    raise FloatingPointError(
                        f"non-finite loss when perturbing '{name}' entry {int(i)}")
                fd = (up - dn) / (2.0 * eps)
                rel = abs(gflat[i] - fd) / max(abs(gflat[i]), abs(fd), 1e-8)
                if rel > worst:
                    worst = rel
        return float(worst)
    finally:
        for t, data, req, grad in saved:
            t.data = data
            t.requires_grad = req
            t.grad = grad
