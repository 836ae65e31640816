"""Central finite-difference oracle shared by the autodiff and acceptance tests."""
import numpy as np

from eqd import autodiff as ad

STEP = 1e-4


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    # the floor keeps gradients that are exactly zero (key biases under softmax)
    # from turning rounding noise into a relative error of 1
    num = np.linalg.norm(a - b)
    den = max(np.linalg.norm(a) + np.linalg.norm(b), floor)
    return float(num / den)


def check(fn, params, step=STEP, max_coords=None, rng=None):
    """Largest relative error between backward() and central differences.

    ``fn`` builds a fresh scalar loss from the current parameter values.  With
    ``max_coords`` only that many randomly chosen coordinates per tensor are
    perturbed.
    """
    loss = fn()
    grads = ad.backward(loss)
    worst = 0.0
    for p in params:
        analytic = grads.get(p, np.zeros_like(p.data))
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_coords, replace=False)
        num = np.empty(len(idx))
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + step
            with ad.no_grad():
                up = fn().item()
            flat[i] = old - step
            with ad.no_grad():
                down = fn().item()
            flat[i] = old
            num[j] = (up - down) / (2 * step)
        worst = max(worst, rel_error(analytic.reshape(-1)[idx], num))
    return worst
