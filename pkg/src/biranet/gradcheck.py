"""Central-difference verification of tape gradients."""

from __future__ import annotations

import numpy as np

from .tensor import Tape


def relative_error(analytic, numeric, floor=1e-7):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(fn, t, eps=1e-5, coords=None):
    """Central differences of scalar ``fn()`` w.r.t. the entries of ``t``.

    ``t.data`` is perturbed in place and restored.  When ``coords`` is given
    only those flat indices are probed; the rest of the result is NaN.
    """
    flat = t.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if coords is None else coords
    for i in idx:
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn().item()
        flat[i] = orig - eps
        fm = fn().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(t.shape)


def analytic_gradients(fn, inputs):
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        y = fn()
    tape.backward(y)
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]


def grad_check(fn, inputs, eps=1e-5, floor=1e-7, max_coords=None, rng=None):
    """Worst relative error between tape and finite-difference gradients.

    ``fn`` takes no arguments and must rebuild its graph from the current
    values of ``inputs`` on every call.  ``max_coords`` caps the number of
    probed entries per input (sampled with ``rng``).
    """
    if isinstance(inputs, np.ndarray) or not isinstance(inputs, (list, tuple)):
        inputs = [inputs]
    grads = analytic_gradients(fn, inputs)
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for t, g in zip(inputs, grads):
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        num = numeric_gradient(fn, t, eps, coords)
        probed = ~np.isnan(num)
        if probed.any():
            worst = max(worst, float(relative_error(g[probed], num[probed], floor).max()))
    return worst
