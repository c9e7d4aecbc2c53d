"""Finite-difference oracle for analytic gradients.

Central differences at fp64. Kept independent of the tape internals: the
oracle only perturbs raw parameter arrays and re-evaluates the closure.
"""

import numpy as np

from . import tensor as T


def grad_check(f, params, h=1e-5, rng=None, max_coords_per_param=24):
    """Max relative error between analytic and central-difference gradients.

    `f` is a zero-argument closure returning a scalar Tensor that depends on
    the Tensors in `params` (a list or dict of name -> Tensor). Coordinates
    are subsampled per parameter when larger than `max_coords_per_param`.
    """
    if T.get_mode() != "fp64":
        raise T.NumericError("grad_check requires fp64 mode")
    if isinstance(params, dict):
        params = [params[k] for k in sorted(params)]
    for p in params:
        p.grad = None
    loss = f()
    T.backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    if rng is None:
        rng = T.Rng(0)
    worst = 0.0
    for p, ga in zip(params, analytic):
        n = p.data.size
        if n <= max_coords_per_param:
            coords = np.arange(n)
        else:
            coords = rng.integers(0, n, size=max_coords_per_param)
        flat = p.data.reshape(-1)
        for c in coords:
            c = int(c)
            orig = flat[c]
            flat[c] = orig + h
            fp = f().item()
            flat[c] = orig - h
            fm = f().item()
            flat[c] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(ga.reshape(-1)[c])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            if err > worst:
                worst = err
    return worst
