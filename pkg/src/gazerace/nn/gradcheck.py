"""Central finite-difference gradient verification (run under 64-bit precision)."""

import numpy as np


def relative_error(a, b, floor=1e-12):
    """Norm-wise relative error ||a - b|| / (||a|| + ||b||).

    Per-entry ratios are dominated by finite-difference round-off (~1e-11 absolute)
    on entries many orders of magnitude below the tensor's scale, so the whole
    tensor is compared at once.
    """
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), floor))


def numeric_grad(f, x, h=1e-5):
    """Central differences of the scalar function ``f`` w.r.t. array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=float)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_module(module, x, seed=0, h=1e-5, max_entries=None):
    """Compare analytic and numeric gradients of ``sum(r * module(x))`` for a random projection r.

    Returns {name: relative error} for the input and every parameter. Batchnorm
    layers keep running-stat updates out of the comparison because the loss
    only depends on batch statistics in training mode.
    """
    rng = np.random.default_rng(seed)
    x = np.array(x, dtype=np.float64)
    out = module.forward(x)
    r = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(r * module.forward(x)))

    module.zero_grad()
    module.forward(x)
    dx = module.backward(r.astype(out.dtype))
    results = {"input": relative_error(dx, numeric_grad(loss, x, h))}
    for name, p in module.named_params():
        analytic = p.grad.copy()
        results[name] = relative_error(analytic, numeric_grad(loss, p.data, h))
    return results
