"""Central finite-difference oracle, independent of the tape."""

import numpy as np

from peeler import tensor as T

STEP = 1e-5
REL_TOL = 1e-4
# gradients smaller than this are compared absolutely (REL_TOL * FLOOR)
FLOOR = 1e-4


def numeric_grad(loss_fn, param, step=STEP):
    """loss_fn() -> scalar Tensor evaluated with the current param.data."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(loss_fn().data)
        flat[i] = orig - step
        down = float(loss_fn().data)
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * step)
    return grad


def analytic_grads(loss_fn, params):
    for p in params.values():
        p.zero_grad()
    with T.Tape() as tape:
        loss = loss_fn()
    T.backward(loss, tape)
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def max_rel_error(a, n):
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), FLOOR), initial=0.0))


def check(loss_fn, params):
    """Return the worst relative error over all parameters."""
    ana = analytic_grads(loss_fn, params)
    worst = 0.0
    for k, p in params.items():
        worst = max(worst, max_rel_error(ana[k], numeric_grad(loss_fn, p)))
    return worst
