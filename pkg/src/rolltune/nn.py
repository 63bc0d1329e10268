"""Dense numerics for the recurrent stacks.

Everything here operates on plain numpy float64 arrays, stored row-major.
The LSTM cell, its backward pass, Adadelta, and the finite-difference
checker are written out explicitly so that every gradient the package
relies on can be verified against an independent numerical oracle.

Conventions:
  * a "stack" is a list of LstmCellParams applied bottom to top,
  * scans run over a leading step axis with a row axis for whatever is
    batched (sequences, notes, transitions),
  * gate order inside packed weight blocks is input, forget, output,
    candidate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def sigmoid(x):
    """Numerically stable logistic function."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x):
    """log(sigmoid(x)) without overflow for large negative inputs."""
    return np.where(x >= 0, -np.log1p(np.exp(-np.abs(x))),
                    x - np.log1p(np.exp(-np.abs(x))))


def logsumexp(x, axis=None):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    if axis is None:
        return float(out.item())
    return np.squeeze(out, axis=axis)


def softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


class NonFiniteGradientError(ArithmeticError):
    """Raised when an optimizer receives NaN or infinite gradients."""


@dataclass
class LstmCellParams:
    """One LSTM cell. Each gate weight multiplies concat(x, h_prev).

    Weight shapes are (hidden, input + hidden); biases are (hidden,).
    """

    input_size: int
    hidden_size: int
    w_i: np.ndarray
    w_f: np.ndarray
    w_o: np.ndarray
    w_c: np.ndarray
    b_i: np.ndarray
    b_f: np.ndarray
    b_o: np.ndarray
    b_c: np.ndarray

    GATE_FIELDS = ("w_i", "w_f", "w_o", "w_c", "b_i", "b_f", "b_o", "b_c")

    @classmethod
    def fresh(cls, input_size, hidden_size, rng):
        """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases
        except the forget gate bias, which starts at 1.0."""
        fan_in = input_size + hidden_size
        bound = 1.0 / math.sqrt(fan_in)

        def w():
            return rng.uniform(-bound, bound, size=(hidden_size, fan_in))

        return cls(
            input_size=input_size,
            hidden_size=hidden_size,
            w_i=w(), w_f=w(), w_o=w(), w_c=w(),
            b_i=np.zeros(hidden_size),
            b_f=np.ones(hidden_size),
            b_o=np.zeros(hidden_size),
            b_c=np.zeros(hidden_size),
        )

    def validate(self):
        fan_in = self.input_size + self.hidden_size
        for name in ("w_i", "w_f", "w_o", "w_c"):
            arr = getattr(self, name)
            if arr.shape != (self.hidden_size, fan_in):
                raise ValueError(f"{name} has shape {arr.shape}, "
                                 f"expected {(self.hidden_size, fan_in)}")
        for name in ("b_i", "b_f", "b_o", "b_c"):
            if getattr(self, name).shape != (self.hidden_size,):
                raise ValueError(f"{name} has wrong shape")

    def packed(self):
        """Gate weights stacked into (wx, wh, b) with wx (4H, D), wh (4H, H),
        b (4H,). Gate order: i, f, o, c."""
        d = self.input_size
        wx = np.concatenate([self.w_i[:, :d], self.w_f[:, :d],
                             self.w_o[:, :d], self.w_c[:, :d]], axis=0)
        wh = np.concatenate([self.w_i[:, d:], self.w_f[:, d:],
                             self.w_o[:, d:], self.w_c[:, d:]], axis=0)
        b = np.concatenate([self.b_i, self.b_f, self.b_o, self.b_c])
        return wx, wh, b

    def unpack_grads(self, dwx, dwh, db):
        """Split packed gradient blocks back into per-gate arrays."""
        h = self.hidden_size
        out = {}
        for k, name in enumerate(("i", "f", "o", "c")):
            out[f"w_{name}"] = np.concatenate(
                [dwx[k * h:(k + 1) * h], dwh[k * h:(k + 1) * h]], axis=1)
            out[f"b_{name}"] = db[k * h:(k + 1) * h]
        return out

    def named_arrays(self, prefix=""):
        for name in self.GATE_FIELDS:
            yield prefix + name, getattr(self, name)

    def copy(self):
        return LstmCellParams(
            self.input_size, self.hidden_size,
            *(getattr(self, n).copy() for n in self.GATE_FIELDS))


def lstm_step(params: LstmCellParams, x, h_prev, c_prev):
    """Single forward step; accepts 1-D vectors or (rows, dim) batches.

    i, f, o are logistic gates, the candidate uses tanh:
      c = f * c_prev + i * tanh_candidate
      h = o * tanh(c)
    """
    h, c, _ = lstm_cell_forward(params, x, h_prev, c_prev)
    return h, c


def lstm_cell_forward(params: LstmCellParams, x, h_prev, c_prev):
    """Like lstm_step but also returns the cache lstm_cell_backward needs."""
    wx, wh, b = params.packed()
    z = x @ wx.T + h_prev @ wh.T + b
    hs = params.hidden_size
    i = sigmoid(z[..., 0 * hs:1 * hs])
    f = sigmoid(z[..., 1 * hs:2 * hs])
    o = sigmoid(z[..., 2 * hs:3 * hs])
    g = np.tanh(z[..., 3 * hs:4 * hs])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    cache = (x, h_prev, c_prev, i, f, o, g, c)
    return h, c, cache


def lstm_cell_backward(params: LstmCellParams, cache, dh, dc):
    """Backward through one cell step.

    dh, dc are gradients arriving at this step's h and c outputs.
    Returns (param_grads, dx, dh_prev, dc_prev); param_grads is a dict
    keyed like LstmCellParams.GATE_FIELDS.
    """
    x, h_prev, c_prev, i, f, o, g, c = cache
    tc = np.tanh(c)
    do = dh * tc
    dc_total = dc + dh * o * (1.0 - tc * tc)
    di = dc_total * g
    dg = dc_total * i
    df = dc_total * c_prev
    dc_prev = dc_total * f
    dz = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        do * o * (1.0 - o),
        dg * (1.0 - g * g),
    ], axis=-1)
    wx, wh, _ = params.packed()
    dx = dz @ wx
    dh_prev = dz @ wh
    flat_dz = dz.reshape(-1, dz.shape[-1])
    flat_x = np.atleast_2d(x).reshape(-1, params.input_size)
    flat_h = np.atleast_2d(h_prev).reshape(-1, params.hidden_size)
    dwx = flat_dz.T @ flat_x
    dwh = flat_dz.T @ flat_h
    db = flat_dz.sum(axis=0)
    grads = params.unpack_grads(dwx, dwh, db)
    return grads, dx, dh_prev, dc_prev


def stack_step(layers, x, states, keep_masks=None):
    """Advance a stack of cells one step.

    states is a list of (h, c) pairs, one per layer; returns the top
    output (after any dropout mask) and the new state list. Masks apply
    to the stream passed upward, not to the recurrent path.
    """
    new_states = []
    stream = x
    for li, layer in enumerate(layers):
        h_prev, c_prev = states[li]
        h, c = lstm_step(layer, stream, h_prev, c_prev)
        new_states.append((h, c))
        stream = h if keep_masks is None else h * keep_masks[li]
    return stream, new_states


@dataclass
class _LayerCache:
    inputs: np.ndarray      # (S, R, D) stream entering the layer
    i: np.ndarray
    f: np.ndarray
    o: np.ndarray
    g: np.ndarray
    c: np.ndarray
    h: np.ndarray
    h0: np.ndarray
    c0: np.ndarray
    mask: np.ndarray | None


def stack_forward(layers, xs, init_states=None, keep_masks=None):
    """Run a stack over a whole scan.

    xs has shape (S, R, D): S steps of R parallel rows. Returns the top
    stream (S, R, H_top), a cache for stack_backward, and the final
    (h, c) list. The per-step x contribution is batched into one matmul
    per layer; only the recurrent term runs inside the step loop.
    """
    s_len, rows, _ = xs.shape
    caches = []
    stream = xs
    finals = []
    for li, layer in enumerate(layers):
        hs = layer.hidden_size
        wx, wh, b = layer.packed()
        if init_states is None:
            h = np.zeros((rows, hs))
            c = np.zeros((rows, hs))
        else:
            h, c = (a.copy() for a in init_states[li])
        h0, c0 = h.copy(), c.copy()
        zx = stream.reshape(s_len * rows, -1) @ wx.T
        zx = zx.reshape(s_len, rows, 4 * hs) + b
        i_all = np.empty((s_len, rows, hs))
        f_all = np.empty_like(i_all)
        o_all = np.empty_like(i_all)
        g_all = np.empty_like(i_all)
        c_all = np.empty_like(i_all)
        h_all = np.empty_like(i_all)
        for s in range(s_len):
            z = zx[s] + h @ wh.T
            i = sigmoid(z[:, 0 * hs:1 * hs])
            f = sigmoid(z[:, 1 * hs:2 * hs])
            o = sigmoid(z[:, 2 * hs:3 * hs])
            g = np.tanh(z[:, 3 * hs:4 * hs])
            c = f * c + i * g
            h = o * np.tanh(c)
            i_all[s], f_all[s], o_all[s], g_all[s] = i, f, o, g
            c_all[s], h_all[s] = c, h
        mask = None if keep_masks is None else keep_masks[li]
        caches.append(_LayerCache(stream, i_all, f_all, o_all, g_all,
                                  c_all, h_all, h0, c0, mask))
        finals.append((h, c))
        stream = h_all if mask is None else h_all * mask
    return stream, caches, finals


def stack_backward(layers, caches, dstream, d_finals=None):
    """Backpropagate through a stack_forward scan.

    dstream is the gradient w.r.t. the top stream (S, R, H_top).
    Returns (per-layer grad dicts, dxs) where dxs is the gradient
    w.r.t. the original scan input.
    """
    grads_out = [None] * len(layers)
    for li in range(len(layers) - 1, -1, -1):
        layer = layers[li]
        cache = caches[li]
        hs = layer.hidden_size
        wx, wh, _ = layer.packed()
        s_len, rows, _ = cache.h.shape
        if cache.mask is not None:
            dstream = dstream * cache.mask
        dh_carry = np.zeros((rows, hs))
        dc_carry = np.zeros((rows, hs))
        if d_finals is not None and d_finals[li] is not None:
            dfh, dfc = d_finals[li]
            dh_carry = dh_carry + dfh
            dc_carry = dc_carry + dfc
        dz_all = np.empty((s_len, rows, 4 * hs))
        for s in range(s_len - 1, -1, -1):
            dh = dstream[s] + dh_carry
            i, f, o, g, c = (cache.i[s], cache.f[s], cache.o[s],
                             cache.g[s], cache.c[s])
            tc = np.tanh(c)
            do = dh * tc
            dc = dc_carry + dh * o * (1.0 - tc * tc)
            c_prev = cache.c[s - 1] if s > 0 else cache.c0
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dc_carry = dc * f
            dz = dz_all[s]
            dz[:, 0 * hs:1 * hs] = di * i * (1.0 - i)
            dz[:, 1 * hs:2 * hs] = df * f * (1.0 - f)
            dz[:, 2 * hs:3 * hs] = do * o * (1.0 - o)
            dz[:, 3 * hs:4 * hs] = dg * (1.0 - g * g)
            dh_carry = dz @ wh
        flat_dz = dz_all.reshape(s_len * rows, 4 * hs)
        flat_x = cache.inputs.reshape(s_len * rows, -1)
        h_prev = np.concatenate([cache.h0[None], cache.h[:-1]], axis=0)
        flat_h = h_prev.reshape(s_len * rows, hs)
        dwx = flat_dz.T @ flat_x
        dwh = flat_dz.T @ flat_h
        db = flat_dz.sum(axis=0)
        grads_out[li] = layer.unpack_grads(dwx, dwh, db)
        dstream = (flat_dz @ wx).reshape(s_len, rows, -1)
    return grads_out, dstream


def dropout_mask(shape, keep_prob, rng, training=True):
    """Binary keep mask scaled by 1/keep_prob (inverted dropout).

    keep_prob is the probability an activation is kept. Outside
    training the mask is all ones so inference sees the full signal.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return np.ones(shape)
    return (rng.random(shape) < keep_prob).astype(np.float64) / keep_prob


@dataclass
class AdadeltaState:
    """Running averages for one parameter array."""

    avg_sq_grad: np.ndarray
    avg_sq_delta: np.ndarray

    @classmethod
    def zeros_like(cls, param):
        return cls(np.zeros_like(param), np.zeros_like(param))


def adadelta_update(param, grad, state, rho=0.95, eps=1e-6, lr=1.0):
    """One Adadelta step, in place.

    avg_sq_grad  <- rho * avg_sq_grad  + (1 - rho) * grad^2
    delta        <- -sqrt(avg_sq_delta + eps) / sqrt(avg_sq_grad + eps) * grad
    avg_sq_delta <- rho * avg_sq_delta + (1 - rho) * delta^2
    param        <- param + lr * delta

    Rejects non-finite gradients before touching any state.
    """
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(
            "gradient contains NaN or infinite entries; step rejected")
    state.avg_sq_grad *= rho
    state.avg_sq_grad += (1.0 - rho) * grad * grad
    delta = -np.sqrt(state.avg_sq_delta + eps) / \
        np.sqrt(state.avg_sq_grad + eps) * grad
    state.avg_sq_delta *= rho
    state.avg_sq_delta += (1.0 - rho) * delta * delta
    param += lr * delta
    return param, state


@dataclass
class Adadelta:
    """Adadelta over a named set of parameter arrays."""

    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 1.0
    states: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict):
        """Apply one update to every named array present in grads."""
        for name, grad in grads.items():
            param = params[name]
            if name not in self.states:
                self.states[name] = AdadeltaState.zeros_like(param)
            adadelta_update(param, grad, self.states[name],
                            self.rho, self.eps, self.lr)


def finite_difference_gradients(f, params: dict, eps=1e-5):
    """Central finite differences of a scalar function of named arrays.

    f is called with no arguments and reads the arrays in place; each
    coordinate is perturbed by +-eps. Intended for tests: cost is two
    evaluations per scalar parameter.
    """
    grads = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            hi = f()
            flat[k] = orig - eps
            lo = f()
            flat[k] = orig
            gflat[k] = (hi - lo) / (2.0 * eps)
        grads[name] = g
    return grads


def max_relative_error(analytic: dict, numeric: dict, floor=1e-5):
    """Worst-case elementwise relative disagreement between gradient sets.

    The denominator is floored so that coordinates whose true gradient
    is ~0 compare against finite-difference noise on an absolute scale.
    """
    worst = 0.0
    for name in analytic:
        a = analytic[name]
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst
