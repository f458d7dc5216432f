"""Hash-grid lookup kernels.

Lattice cell of a clamped coordinate ``x`` at resolution ``N``: base corner
``min(floor(x*N), N-1)``, upper corner ``base+1``, fraction ``x*N - base``.
Features are folded one axis at a time with a lerp that is exact at both
ends, so lattice corners and constant tables reproduce stored values
exactly. Slot of corner ``c``: ``xor_i((c_i * prime_i) mod 2**32) mod T``; ``T`` is a power
of two so the reduction is a mask.
"""

import numpy as np

from .._accel import njit

MASK32 = np.uint64(0xFFFFFFFF)


# --------------------------------------------------------------------------- numba


@njit(nogil=True)
def _slot(corner, primes, table_size):
    h = np.uint64(0)
    for i in range(corner.shape[0]):
        h ^= (np.uint64(corner[i]) * primes[i]) & MASK32
    return np.int64(h & np.uint64(table_size - 1))


@njit(nogil=True)
def _cell_terms(points, p, res, primes, terms, weights):
    """Per-dimension hash terms and 1-D weights of the lower/upper corner."""
    d = points.shape[1]
    for i in range(d):
        s = points[p, i] * res
        b = np.int64(np.floor(s))
        if b > res - 1:
            b = res - 1
        f = s - b
        terms[i, 0] = (np.uint64(b) * primes[i]) & MASK32
        terms[i, 1] = (np.uint64(b + 1) * primes[i]) & MASK32
        weights[i, 0] = 1.0 - f
        weights[i, 1] = f


@njit(nogil=True)
def _lerp(a, b, f):
    # exact at both ends and for a == b
    if f < 0.5:
        return a + f * (b - a)
    return b - (1.0 - f) * (b - a)


@njit(nogil=True)
def encode_forward_numba(points, tables, resolutions, primes, out):
    n_pts, d = points.shape
    n_levels, table_size, n_feat = tables.shape
    n_corners = 1 << d
    mask = np.uint64(table_size - 1)
    terms = np.empty((d, 2), dtype=np.uint64)
    weights = np.empty((d, 2))
    vals = np.empty((n_corners, n_feat))
    for p in range(n_pts):
        for lvl in range(n_levels):
            _cell_terms(points, p, resolutions[lvl], primes, terms, weights)
            for c in range(n_corners):
                h = np.uint64(0)
                for i in range(d):
                    h ^= terms[i, (c >> i) & 1]
                slot = np.int64(h & mask)
                for f in range(n_feat):
                    vals[c, f] = tables[lvl, slot, f]
            # fold one axis at a time, lowest bit first
            m = n_corners
            for i in range(d):
                fi = weights[i, 1]
                m >>= 1
                for c in range(m):
                    for f in range(n_feat):
                        vals[c, f] = _lerp(vals[2 * c, f], vals[2 * c + 1, f], fi)
            o = lvl * n_feat
            for f in range(n_feat):
                out[p, o + f] = vals[0, f]
    return out


@njit(nogil=True)
def encode_backward_numba(points, tables, resolutions, primes, upstream, grad_tables, grad_points):
    """Accumulates into ``grad_tables`` in point order; writes ``grad_points``."""
    n_pts, d = points.shape
    n_levels, table_size, n_feat = tables.shape
    n_corners = 1 << d
    mask = np.uint64(table_size - 1)
    terms = np.empty((d, 2), dtype=np.uint64)
    weights = np.empty((d, 2))
    for p in range(n_pts):
        for i in range(d):
            grad_points[p, i] = 0.0
        for lvl in range(n_levels):
            res = resolutions[lvl]
            _cell_terms(points, p, res, primes, terms, weights)
            o = lvl * n_feat
            for c in range(n_corners):
                w = 1.0
                h = np.uint64(0)
                for i in range(d):
                    bit = (c >> i) & 1
                    w *= weights[i, bit]
                    h ^= terms[i, bit]
                slot = np.int64(h & mask)
                dot = 0.0
                for f in range(n_feat):
                    g = upstream[p, o + f]
                    grad_tables[lvl, slot, f] += w * g
                    dot += g * tables[lvl, slot, f]
                if dot == 0.0:
                    continue
                for k in range(d):
                    dw = dot * res
                    for i in range(d):
                        if i != k:
                            dw *= weights[i, (c >> i) & 1]
                    if (c >> k) & 1:
                        grad_points[p, k] += dw
                    else:
                        grad_points[p, k] -= dw


@njit(nogil=True)
def hash_slots_numba(lattice, primes, table_size):
    out = np.empty(lattice.shape[0], dtype=np.int64)
    for p in range(lattice.shape[0]):
        out[p] = _slot(lattice[p], primes, table_size)
    return out


# --------------------------------------------------------------------------- numpy


def hash_slots_numpy(lattice, primes, table_size):
    lattice = np.asarray(lattice, dtype=np.uint64)
    h = np.zeros(lattice.shape[0], dtype=np.uint64)
    for i in range(lattice.shape[1]):
        h ^= (lattice[:, i] * primes[i]) & MASK32
    return (h & np.uint64(table_size - 1)).astype(np.int64)


def _cell(points, res):
    s = points * res
    base = np.minimum(np.floor(s).astype(np.int64), res - 1)
    return base, s - base


def _corners(d):
    return [[(c >> i) & 1 for i in range(d)] for c in range(1 << d)]


def _lerp_numpy(a, b, f):
    f = f[:, None]
    return np.where(f < 0.5, a + f * (b - a), b - (1.0 - f) * (b - a))


def encode_forward_numpy(points, tables, resolutions, primes, out):
    n_levels, table_size, n_feat = tables.shape
    d = points.shape[1]
    for lvl in range(n_levels):
        base, frac = _cell(points, int(resolutions[lvl]))
        vals = [tables[lvl, hash_slots_numpy(base + np.array(bits), primes, table_size)] for bits in _corners(d)]
        for i in range(d):
            vals = [_lerp_numpy(vals[2 * c], vals[2 * c + 1], frac[:, i]) for c in range(len(vals) // 2)]
        out[:, lvl * n_feat : (lvl + 1) * n_feat] = vals[0]
    return out


def encode_backward_numpy(points, tables, resolutions, primes, upstream, grad_tables, grad_points):
    n_levels, table_size, n_feat = tables.shape
    n_pts, d = points.shape
    grad_points[:] = 0.0
    for lvl in range(n_levels):
        res = int(resolutions[lvl])
        base, frac = _cell(points, res)
        g = upstream[:, lvl * n_feat : (lvl + 1) * n_feat]
        for bits in _corners(d):
            bits = np.array(bits)
            factors = np.where(bits == 1, frac, 1.0 - frac)
            w = np.prod(factors, axis=1)
            slot = hash_slots_numpy(base + bits, primes, table_size)
            np.add.at(grad_tables[lvl], slot, w[:, None] * g)
            dot = np.sum(g * tables[lvl, slot], axis=1)
            for k in range(d):
                others = np.prod(np.delete(factors, k, axis=1), axis=1)
                sign = 1.0 if bits[k] else -1.0
                grad_points[:, k] += sign * dot * others * res
