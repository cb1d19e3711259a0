"""Independent reference computations used by several test modules."""

import numpy as np


def central_difference(f, arr, h=1e-5, coords=None):
    """d f / d arr by central differences, perturbing ``arr`` in place (restored afterwards)."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    for i in coords:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), floor))


def check_param_grads(loss_fn, params, analytic, rng, h=1e-5, per_param=12):
    """Max relative error between ``analytic`` gradients and central differences of
    ``loss_fn()`` over up to ``per_param`` random coordinates of every parameter array."""
    worst = 0.0
    for name, arr in params.items():
        n = arr.size
        coords = rng.choice(n, size=min(per_param, n), replace=False)
        fd = central_difference(loss_fn, arr, h, coords)
        a = analytic[name].reshape(-1)[coords]
        worst = max(worst, rel_err(a, fd.reshape(-1)[coords]))
    return worst


def brute_force_nearest(entries, z):
    """Nearest codebook row by an explicit scan; first index wins ties."""
    out = []
    for v in np.atleast_2d(z):
        best, best_d = 0, None
        for k, e in enumerate(entries):
            d = float(np.sum((v - e) ** 2))
            if best_d is None or d < best_d:
                best, best_d = k, d
        out.append(best)
    return np.array(out)


def semi_implicit_free_fall(z0, v0, g, dt, n):
    """Hand-rolled semi-implicit Euler: velocity first, then position."""
    z, v = z0, v0
    for _ in range(n):
        v = v - g * dt
        z = z + v * dt
    return z, v
