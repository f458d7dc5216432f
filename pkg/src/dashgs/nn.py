"""Tiny ReLU MLPs with hand-written backward, and a bias-corrected Adam."""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ShapeMismatchError


class Mlp:
    """Affine layers with ReLU between them and an identity output.

    Weights are stored ``(fan_out, fan_in)`` so a batch ``x`` of shape
    ``(B, fan_in)`` maps through ``x @ W.T + b``.
    """

    def __init__(self, widths, rng=None, zero_last=False, weights=None, biases=None):
        self.widths = tuple(int(w) for w in widths)
        if len(self.widths) < 2:
            raise ShapeMismatchError("an MLP needs at least input and output widths")
        if weights is None:
            rng = np.random.default_rng() if rng is None else rng
            weights, biases = [], []
            for fan_in, fan_out in zip(self.widths[:-1], self.widths[1:]):
                bound = np.sqrt(6.0 / fan_in)
                weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
                biases.append(np.zeros(fan_out))
            if zero_last:
                weights[-1][:] = 0.0
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for (fan_in, fan_out), W, b in zip(zip(self.widths[:-1], self.widths[1:]), self.weights, self.biases):
            if W.shape != (fan_out, fan_in) or b.shape != (fan_out,):
                raise ShapeMismatchError("layer parameters do not match widths")

    @property
    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def forward(self, x):
        """Returns ``(y, cache)``; the cache feeds :meth:`backward`."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        if h.shape[1] != self.widths[0]:
            raise ShapeMismatchError(f"input width {h.shape[1]} != {self.widths[0]}")
        acts = [h]
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return (h[0] if single else h), (acts, single)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, upstream):
        """Returns ``(param_grads, grad_x)`` with grads ordered like :attr:`params`."""
        acts, single = cache
        g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        if g.shape != acts[-1].shape:
            raise ShapeMismatchError("upstream gradient shape does not match output")
        grads = []
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (acts[i + 1] > 0.0)
            grads.append(g.sum(axis=0))
            grads.append(g.T @ acts[i])
            g = g @ self.weights[i]
        grads.reverse()
        return grads, (g[0] if single else g)


class Adam:
    """Adam over a fixed list of arrays, updated in place.

    ``lrs`` gives one learning rate per array (or a scalar for all).
    """

    def __init__(self, params, lrs=1e-3, betas=(0.9, 0.999), eps=1e-15):
        self.params = list(params)
        if np.isscalar(lrs):
            lrs = [lrs] * len(self.params)
        self.lrs = [float(lr) for lr in lrs]
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        if len(grads) != len(self.params):
            raise ShapeMismatchError("one gradient per parameter required")
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for p, g, m, v, lr in zip(self.params, grads, self.m, self.v, self.lrs):
            if g.shape != p.shape:
                raise ShapeMismatchError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not p.flags.c_contiguous:
                raise ValueError("Adam updates parameters in place and needs contiguous arrays")
            kernels.adam_update(
                p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1), m.reshape(-1), v.reshape(-1),
                lr, self.beta1, self.beta2, c1, c2, self.eps,
            )

    def rebind(self, index, param, keep=None):
        """Point slot ``index`` at a resized array; moments follow ``keep`` rows
        (indices into the old rows, -1 for fresh zeros)."""
        m_old, v_old = self.m[index], self.v[index]
        m = np.zeros_like(param)
        v = np.zeros_like(param)
        if keep is not None:
            keep = np.asarray(keep)
            ok = keep >= 0
            m[ok] = m_old[keep[ok]]
            v[ok] = v_old[keep[ok]]
        self.params[index] = param
        self.m[index] = m
        self.v[index] = v

    def state_arrays(self, prefix):
        out = {f"{prefix}.step": np.array([self.step_count], dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}.m{i}"] = m
            out[f"{prefix}.v{i}"] = v
        return out

    def load_state_arrays(self, prefix, arrays):
        self.step_count = int(arrays[f"{prefix}.step"][0])
        for i in range(len(self.params)):
            self.m[i] = np.array(arrays[f"{prefix}.m{i}"], dtype=np.float64)
            self.v[i] = np.array(arrays[f"{prefix}.v{i}"], dtype=np.float64)


def adam_step(params, grads, state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """Functional single-array form: ``state`` is a dict with ``m``, ``v``, ``step``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ShapeMismatchError("params and grads differ in shape")
    b1, b2 = betas
    step = state.get("step", 0) + 1
    m = b1 * state.get("m", np.zeros_like(params)) + (1 - b1) * grads
    v = b2 * state.get("v", np.zeros_like(params)) + (1 - b2) * grads * grads
    m_hat = m / (1 - b1**step)
    v_hat = v / (1 - b2**step)
    state.update(m=m, v=v, step=step)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps)
