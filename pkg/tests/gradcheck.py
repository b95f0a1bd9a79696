"""Shared finite-difference oracles for the autodiff tests.

The checks here deliberately avoid the library's own machinery: gradients
are estimated by central differences on the raw numpy buffers, so a bug in
the backward rules cannot hide itself.
"""

import numpy as np


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar function ``f`` wrt ``x``.

    ``f`` takes no arguments and must read ``x`` afresh on every call
    (mutating ``x`` in place between calls is how we probe it).
    """
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_err(got: np.ndarray, want: np.ndarray) -> float:
    """Elementwise |got-want| / max(|want|, 1), reduced by max.

    The unit floor keeps near-zero reference entries from exploding the
    ratio; for O(1) gradients this is an ordinary relative error.
    """
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    return float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1.0)))
