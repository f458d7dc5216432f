"""Fused Adam update over flat float64 buffers."""

import numpy as np

from .._accel import njit


# reciprocal and fused multiply-add only; NaN/inf semantics are kept
@njit(fastmath={"arcp", "contract"})
def adam_update_numba(p, g, m, v, lr, beta1, beta2, c1, c2, eps):
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)


def adam_update_numpy(p, g, m, v, lr, beta1, beta2, c1, c2, eps):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
