"""Small numpy neural-network kernel: dense layers, LSTM with BPTT, Adam.

Row-vector convention: inputs are ``(batch, features)`` and a dense layer
computes ``x @ w.T + b``. LSTM gate blocks are stacked in the order
input, forget, candidate, output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def glorot_uniform(fan_out, fan_in, rng, rows=None):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(rows or fan_out, fan_in))


# -- angle loss ---------------------------------------------------------------

def cosine_loss(delta_theta):
    """Periodic angle loss ``(1 - cos(delta))/2``, bounded in [0, 1]."""
    out = 0.5 * (1.0 - np.cos(delta_theta))
    return float(out) if np.ndim(out) == 0 else out


def cosine_loss_grad(delta_theta):
    """Derivative of :func:`cosine_loss` w.r.t. the estimate.

    ``delta_theta`` is ``theta_true - theta_hat``.
    """
    out = -0.5 * np.sin(delta_theta)
    return float(out) if np.ndim(out) == 0 else out


# -- dense ------------------------------------------------------------------

@dataclass
class DenseLayer:
    w: np.ndarray
    b: np.ndarray

    @classmethod
    def init(cls, n_in, n_out, rng):
        return cls(glorot_uniform(n_out, n_in, rng), np.zeros(n_out))

    @property
    def params(self):
        return [self.w, self.b]


def dense_forward(layer: DenseLayer, x):
    if x.shape[-1] != layer.w.shape[1]:
        raise ValueError(f"dense layer expects {layer.w.shape[1]} inputs, got {x.shape[-1]}")
    return x @ layer.w.T + layer.b


def dense_backward(layer: DenseLayer, x, dy):
    """Return ``(dx, dw, db)``; weight gradients are summed over leading axes."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ layer.w, dy2.T @ x2, dy2.sum(axis=0)


# -- LSTM -------------------------------------------------------------------

@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden, batch=None):
        shape = (hidden,) if batch is None else (batch, hidden)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class LstmCell:
    w: np.ndarray   # (4H, I+H)
    b: np.ndarray   # (4H,)

    @property
    def hidden_size(self):
        return self.b.shape[0] // 4

    @property
    def input_size(self):
        return self.w.shape[1] - self.hidden_size

    @property
    def params(self):
        return [self.w, self.b]

    @classmethod
    def init(cls, n_in, hidden, rng, forget_bias=1.0):
        w = np.vstack([glorot_uniform(hidden, n_in + hidden, rng) for _ in range(4)])
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = forget_bias
        return cls(w, b)


def _gates(cell, h, c, x):
    hs = cell.hidden_size
    z = np.concatenate([x, h], axis=-1) @ cell.w.T + cell.b
    i = sigmoid(z[..., :hs])
    f = sigmoid(z[..., hs:2 * hs])
    g = np.tanh(z[..., 2 * hs:3 * hs])
    o = sigmoid(z[..., 3 * hs:])
    c_new = f * c + i * g
    return i, f, g, o, c_new, np.tanh(c_new)


def lstm_step(cell: LstmCell, state: LstmState, x):
    if x.shape[-1] != cell.input_size:
        raise ValueError(f"LSTM expects {cell.input_size} inputs, got {x.shape[-1]}")
    _, _, _, o, c_new, tc = _gates(cell, state.h, state.c, x)
    h_new = o * tc
    return LstmState(h_new, c_new), h_new


@dataclass
class LstmCache:
    xs: np.ndarray
    hs: np.ndarray          # h_0 .. h_T, shape (T+1, B, H)
    cs: np.ndarray
    gates: list = field(default_factory=list)


def lstm_forward(cell: LstmCell, xs, state0: LstmState | None = None):
    """Run over ``xs`` of shape ``(T, B, I)``; returns ``(outputs, cache)``."""
    t_len, batch = xs.shape[0], xs.shape[1]
    if t_len == 0:
        raise ValueError("empty sequence")
    hsz = cell.hidden_size
    state0 = state0 or LstmState.zeros(hsz, batch)
    hs = np.empty((t_len + 1, batch, hsz))
    cs = np.empty_like(hs)
    hs[0], cs[0] = state0.h, state0.c
    cache = LstmCache(xs, hs, cs)
    for t in range(t_len):
        i, f, g, o, c_new, tc = _gates(cell, hs[t], cs[t], xs[t])
        cs[t + 1] = c_new
        hs[t + 1] = o * tc
        cache.gates.append((i, f, g, o, tc))
    return hs[1:], cache


def lstm_backward(cell: LstmCell, cache: LstmCache, dhs, dstate_final: LstmState | None = None):
    """Backpropagation through time.

    ``dhs`` is the loss gradient w.r.t. every output ``h_t``. Returns
    ``(dxs, dw, db, dstate0)``.
    """
    t_len = dhs.shape[0]
    hsz = cell.hidden_size
    n_in = cell.input_size
    dw = np.zeros_like(cell.w)
    db = np.zeros_like(cell.b)
    dxs = np.empty_like(cache.xs)
    dh_next = np.zeros_like(cache.hs[0]) if dstate_final is None else dstate_final.h.copy()
    dc_next = np.zeros_like(cache.cs[0]) if dstate_final is None else dstate_final.c.copy()
    for t in reversed(range(t_len)):
        i, f, g, o, tc = cache.gates[t]
        dh = dhs[t] + dh_next
        do = dh * tc
        dc = dh * o * (1.0 - tc * tc) + dc_next
        di = dc * g
        dg = dc * i
        df = dc * cache.cs[t]
        dz = np.concatenate([di * i * (1.0 - i), df * f * (1.0 - f),
                             dg * (1.0 - g * g), do * o * (1.0 - o)], axis=-1)
        inp = np.concatenate([cache.xs[t], cache.hs[t]], axis=-1)
        dw += dz.T @ inp
        db += dz.sum(axis=0)
        dinp = dz @ cell.w
        dxs[t] = dinp[:, :n_in]
        dh_next = dinp[:, n_in:]
        dc_next = dc * f
    return dxs, dw, db, LstmState(dh_next, dc_next)


# -- Adam -------------------------------------------------------------------

@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params, **hyper):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(params, grads, state: AdamState):
    """Bias-corrected Adam update; returns new ``(params, state)``."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter and gradient shapes differ")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_p.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t, state.lr, b1, b2, state.eps)


def clip_by_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return [g * scale for g in grads], norm
