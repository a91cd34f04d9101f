"""Central finite-difference gradient checking."""

import numpy as np

from .autodiff import backward, no_grad

STEP = 1e-5


def relative_error(analytic, numeric, floor=1e-6):
    """``||a - n|| / max(||a||, ||n||, floor)``.

    The floor keeps the ratio meaningful when both gradients vanish.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def numerical_gradient(loss_fn, tensor, step=STEP, coords=None):
    """Central differences of the scalar ``loss_fn()`` w.r.t. ``tensor.data``.

    ``coords`` restricts the probe to a subset of flat indices; other entries
    of the result stay NaN.
    """
    flat = tensor.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if coords is None else coords
    with no_grad():
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            hi = float(loss_fn().data)
            flat[i] = orig - step
            lo = float(loss_fn().data)
            flat[i] = orig
            out[i] = (hi - lo) / (2 * step)
    return out.reshape(tensor.shape)


def analytic_gradients(loss_fn, tensors):
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    backward(loss)
    return [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]


def check_gradients(loss_fn, tensors, step=STEP, max_coords=None, rng=None):
    """Largest relative error between backprop and finite differences.

    With ``max_coords`` each tensor is probed at that many random entries
    (drawn from ``rng``) instead of exhaustively.
    """
    analytic = analytic_gradients(loss_fn, tensors)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        coords = None
        if max_coords is not None and t.data.size > max_coords:
            rng = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(rng.choice(t.data.size, size=max_coords, replace=False))
        n = numerical_gradient(loss_fn, t, step=step, coords=coords)
        if coords is not None:
            a = a.reshape(-1)[coords]
            n = n.reshape(-1)[coords]
        worst = max(worst, relative_error(a, n))
    return worst
