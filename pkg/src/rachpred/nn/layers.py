"""Recurrent cells and the concatenating dense head.

Arrays are float64. Single-step functions accept ``x`` of shape ``(d,)`` or
``(batch, d)``; the sequence versions used for training are time-major,
``(T, batch, d)``, and keep the caches needed by the backward passes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


def sigmoid(x):
    return expit(x)


LSTM_GATES = ("i", "f", "g", "o")
GRU_GATES = ("r", "z", "n")


@dataclass
class RecurrentLayerParams:
    """Stacked gate weights: ``Wx`` is (G*h, d), ``Wh`` is (G*h, h).

    Per-gate blocks such as ``W_ii`` or ``W_hf`` are views into the
    stacked arrays.
    """

    Wx: np.ndarray
    Wh: np.ndarray
    bx: np.ndarray
    bh: np.ndarray

    kind = ""
    gates = ()

    def __post_init__(self):
        _check_stack(self, len(self.gates))

    @property
    def hidden_size(self):
        return self.Wh.shape[1]

    @property
    def input_size(self):
        return self.Wx.shape[1]

    def block(self, name):
        """Gate block by name, e.g. ``'W_ii'``, ``'W_hf'``, ``'b_ig'``."""
        return _gate_block(self, name)

    def __getattr__(self, name):
        if name[:2] in ("W_", "b_") and len(name) == 4:
            return _gate_block(self, name)
        raise AttributeError(name)

    @classmethod
    def zeros(cls, d, h):
        n = len(cls.gates)
        return cls(np.zeros((n * h, d)), np.zeros((n * h, h)), np.zeros(n * h), np.zeros(n * h))

    @classmethod
    def uniform(cls, d, h, rng):
        n = len(cls.gates)
        k = 1.0 / np.sqrt(h)
        return cls(rng.uniform(-k, k, (n * h, d)), rng.uniform(-k, k, (n * h, h)),
                   rng.uniform(-k, k, n * h), rng.uniform(-k, k, n * h))

    def arrays(self):
        return {"Wx": self.Wx, "Wh": self.Wh, "bx": self.bx, "bh": self.bh}


@dataclass
class LstmLayerParams(RecurrentLayerParams):
    """One LSTM layer, gate blocks stacked in i, f, g, o order."""

    kind = "lstm"
    gates = LSTM_GATES

    def step_flops(self, elementwise=29):
        # 2 FLOPs per weight in the two matrix-vector products
        return 2 * (self.Wx.size + self.Wh.size) + elementwise * self.hidden_size


@dataclass
class GruLayerParams(RecurrentLayerParams):
    """One GRU layer, blocks stacked in r (reset), z (update), n order."""

    kind = "gru"
    gates = GRU_GATES

    def step_flops(self, elementwise=22):
        return 2 * (self.Wx.size + self.Wh.size) + elementwise * self.hidden_size


def _check_stack(p, n):
    G, d = p.Wx.shape
    if G % n:
        raise ShapeError(f"Wx rows {G} not divisible by {n} gates")
    h = G // n
    if p.Wh.shape != (G, h) or p.bx.shape != (G,) or p.bh.shape != (G,):
        raise ShapeError(f"inconsistent {p.kind} layer shapes for h={h}, d={d}")


def _gate_block(p, name):
    kind, src, gate = name[0], name[2], name[3]
    if gate not in p.gates or src not in "ih":
        raise AttributeError(name)
    h = p.hidden_size
    k = p.gates.index(gate)
    arr = {("W", "i"): p.Wx, ("W", "h"): p.Wh, ("b", "i"): p.bx, ("b", "h"): p.bh}[(kind, src)]
    return arr[k * h:(k + 1) * h]


@dataclass
class LayerState:
    h: np.ndarray
    c: np.ndarray | None = None

    def copy(self):
        return LayerState(self.h.copy(), None if self.c is None else self.c.copy())


def _check_input(x, p):
    if x.shape[-1] != p.input_size:
        raise ShapeError(f"input size {x.shape[-1]} != layer input size {p.input_size}")


def lstm_cell_forward(x, state: LayerState, p: LstmLayerParams):
    """One LSTM step. Returns ``(h_t, new_state)``."""
    _check_input(x, p)
    if state.h.shape[-1] != p.hidden_size:
        raise ShapeError("state size does not match layer hidden size")
    h = p.hidden_size
    z = x @ p.Wx.T + p.bx + state.h @ p.Wh.T + p.bh
    i = sigmoid(z[..., :h])
    f = sigmoid(z[..., h:2 * h])
    g = np.tanh(z[..., 2 * h:3 * h])
    o = sigmoid(z[..., 3 * h:])
    c = f * state.c + i * g
    h_t = o * np.tanh(c)
    return h_t, LayerState(h_t, c)


def gru_cell_forward(x, state: LayerState, p: GruLayerParams):
    """One GRU step (reset gate applied to the projected hidden state)."""
    _check_input(x, p)
    if state.h.shape[-1] != p.hidden_size:
        raise ShapeError("state size does not match layer hidden size")
    h = p.hidden_size
    ax = x @ p.Wx.T + p.bx
    ah = state.h @ p.Wh.T + p.bh
    r = sigmoid(ax[..., :h] + ah[..., :h])
    z = sigmoid(ax[..., h:2 * h] + ah[..., h:2 * h])
    n = np.tanh(ax[..., 2 * h:] + r * ah[..., 2 * h:])
    h_t = (1.0 - z) * n + z * state.h
    return h_t, LayerState(h_t)


def cell_forward(x, state, p):
    if p.kind == "lstm":
        return lstm_cell_forward(x, state, p)
    return gru_cell_forward(x, state, p)


def zero_state(p, batch_shape=()):
    h = np.zeros(batch_shape + (p.hidden_size,))
    return LayerState(h, np.zeros_like(h) if p.kind == "lstm" else None)


# ---------------------------------------------------------------- sequences

def lstm_sequence(X, state: LayerState, p: LstmLayerParams):
    """Run an LSTM layer over time-major ``X``; returns (H, final state, cache)."""
    T, B, _ = X.shape
    h = p.hidden_size
    Zx = X @ p.Wx.T + (p.bx + p.bh)
    H = np.empty((T, B, h))
    acts = np.empty((T, B, 4 * h))
    C = np.empty((T, B, h))
    h_prev, c_prev = state.h, state.c
    Hprev = np.empty((T, B, h))
    Cprev = np.empty((T, B, h))
    for t in range(T):
        Hprev[t] = h_prev
        Cprev[t] = c_prev
        z = Zx[t] + h_prev @ p.Wh.T
        a = acts[t]
        a[:, :2 * h] = sigmoid(z[:, :2 * h])
        a[:, 2 * h:3 * h] = np.tanh(z[:, 2 * h:3 * h])
        a[:, 3 * h:] = sigmoid(z[:, 3 * h:])
        c_prev = a[:, h:2 * h] * c_prev + a[:, :h] * a[:, 2 * h:3 * h]
        C[t] = c_prev
        h_prev = a[:, 3 * h:] * np.tanh(c_prev)
        H[t] = h_prev
    cache = (X, acts, C, Hprev, Cprev)
    return H, LayerState(h_prev.copy(), c_prev.copy()), cache


def lstm_sequence_backward(dH, cache, p: LstmLayerParams, dfinal: LayerState | None = None):
    """Gradients of a loss w.r.t. layer weights, inputs and initial state.

    ``dH`` is dL/dH over the sequence and ``dfinal`` an optional gradient
    w.r.t. the final state (when the loss also depends on what follows).
    Returns ``(grads, dX, dinit)``.
    """
    X, acts, C, Hprev, Cprev = cache
    T, B, h = dH.shape
    dZ = np.empty((T, B, 4 * h))
    dh_next = np.zeros((B, h)) if dfinal is None else dfinal.h.copy()
    dc_next = np.zeros((B, h)) if dfinal is None else dfinal.c.copy()
    for t in range(T - 1, -1, -1):
        a = acts[t]
        i, f, g, o = a[:, :h], a[:, h:2 * h], a[:, 2 * h:3 * h], a[:, 3 * h:]
        tc = np.tanh(C[t])
        dh = dH[t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dZ[t]
        dz[:, :h] = dc * g * i * (1.0 - i)
        dz[:, h:2 * h] = dc * Cprev[t] * f * (1.0 - f)
        dz[:, 2 * h:3 * h] = dc * i * (1.0 - g * g)
        dz[:, 3 * h:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = dz @ p.Wh
    flat = dZ.reshape(T * B, -1)
    grads = {
        "Wx": flat.T @ X.reshape(T * B, -1),
        "Wh": flat.T @ Hprev.reshape(T * B, -1),
        "bx": flat.sum(axis=0),
    }
    grads["bh"] = grads["bx"].copy()
    return grads, dZ @ p.Wx, LayerState(dh_next, dc_next)


def gru_sequence(X, state: LayerState, p: GruLayerParams):
    T, B, _ = X.shape
    h = p.hidden_size
    Ax = X @ p.Wx.T + p.bx
    H = np.empty((T, B, h))
    Hprev = np.empty((T, B, h))
    R = np.empty((T, B, h))
    Zg = np.empty((T, B, h))
    N = np.empty((T, B, h))
    Hn = np.empty((T, B, h))
    h_prev = state.h
    for t in range(T):
        Hprev[t] = h_prev
        ah = h_prev @ p.Wh.T + p.bh
        r = sigmoid(Ax[t, :, :h] + ah[:, :h])
        z = sigmoid(Ax[t, :, h:2 * h] + ah[:, h:2 * h])
        n = np.tanh(Ax[t, :, 2 * h:] + r * ah[:, 2 * h:])
        h_prev = (1.0 - z) * n + z * h_prev
        R[t], Zg[t], N[t], Hn[t], H[t] = r, z, n, ah[:, 2 * h:], h_prev
    return H, LayerState(h_prev.copy()), (X, Hprev, R, Zg, N, Hn)


def gru_sequence_backward(dH, cache, p: GruLayerParams, dfinal: LayerState | None = None):
    """GRU counterpart of :func:`lstm_sequence_backward`."""
    X, Hprev, R, Zg, N, Hn = cache
    T, B, h = dH.shape
    dAx = np.empty((T, B, 3 * h))
    dAh = np.empty((T, B, 3 * h))
    dh_next = np.zeros((B, h)) if dfinal is None else dfinal.h.copy()
    for t in range(T - 1, -1, -1):
        r, z, n = R[t], Zg[t], N[t]
        dh = dH[t] + dh_next
        dan = dh * (1.0 - z) * (1.0 - n * n)
        daz = dh * (Hprev[t] - n) * z * (1.0 - z)
        dar = dan * Hn[t] * r * (1.0 - r)
        dAx[t, :, :h] = dar
        dAx[t, :, h:2 * h] = daz
        dAx[t, :, 2 * h:] = dan
        dAh[t, :, :2 * h] = dAx[t, :, :2 * h]
        dAh[t, :, 2 * h:] = dan * r
        dh_next = dh * z + dAh[t] @ p.Wh
    fx = dAx.reshape(T * B, -1)
    fh = dAh.reshape(T * B, -1)
    grads = {
        "Wx": fx.T @ X.reshape(T * B, -1),
        "Wh": fh.T @ Hprev.reshape(T * B, -1),
        "bx": fx.sum(axis=0),
        "bh": fh.sum(axis=0),
    }
    return grads, dAx @ p.Wx, LayerState(dh_next)


def sequence_forward(X, state, p):
    if p.kind == "lstm":
        return lstm_sequence(X, state, p)
    return gru_sequence(X, state, p)


def sequence_backward(dH, cache, p, dfinal=None):
    if p.kind == "lstm":
        return lstm_sequence_backward(dH, cache, p, dfinal)
    return gru_sequence_backward(dH, cache, p, dfinal)


# --------------------------------------------------------------- dense head

@dataclass
class DenseHeadParams:
    """Feed-forward head with feature-concatenation shortcuts.

    Source 0 is the recurrent output; source ``k >= 1`` is the activation
    of dense layer ``k - 1``. ``wiring[j]`` lists the sources concatenated
    (in order) to form the input of layer ``j``. The last layer is linear,
    the others use a rectifier followed by dropout.
    """

    weights: list
    biases: list
    wiring: list
    dropout: float = 0.0
    source_size: int = field(default=0)

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ShapeError(f"dropout must be in [0, 1), got {self.dropout}")
        if len(self.weights) != len(self.biases) or len(self.weights) != len(self.wiring):
            raise ShapeError("weights, biases and wiring must have equal lengths")
        if not self.source_size and self.weights:
            self.source_size = self.weights[0].shape[1] if list(self.wiring[0]) == [0] else 0
        sizes = [self.source_size]
        for j, (W, b, wires) in enumerate(zip(self.weights, self.biases, self.wiring)):
            if any(not 0 <= s <= j for s in wires):
                raise ShapeError(f"layer {j} wired to a source that is not yet computed: {wires}")
            expect = sum(sizes[s] for s in wires)
            if W.shape[1] != expect or b.shape != (W.shape[0],):
                raise ShapeError(f"layer {j} expects input {W.shape[1]}, wiring gives {expect}")
            sizes.append(W.shape[0])

    @property
    def sizes(self):
        """Output size of every layer."""
        return [W.shape[0] for W in self.weights]

    @property
    def input_sizes(self):
        return [W.shape[1] for W in self.weights]

    @classmethod
    def build(cls, source_size, layer_sizes, wiring, dropout, rng=None):
        sizes = [source_size]
        weights, biases = [], []
        for j, m in enumerate(layer_sizes):
            fan_in = sum(sizes[s] for s in wiring[j])
            if rng is None:
                W, b = np.zeros((m, fan_in)), np.zeros(m)
            else:
                k = 1.0 / np.sqrt(fan_in)
                W, b = rng.uniform(-k, k, (m, fan_in)), rng.uniform(-k, k, m)
            weights.append(W)
            biases.append(b)
            sizes.append(m)
        return cls(weights, biases, [tuple(w) for w in wiring], dropout, source_size)

    def param_count(self):
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))


def _dropout_mask(shape, rate, rng):
    if rng is None:
        raise ValueError("train mode with dropout needs an rng")
    return (rng.random(shape) >= rate) / (1.0 - rate)


def dense_head_forward(features, params: DenseHeadParams, train_mode=False, rng=None,
                       return_cache=False):
    """Apply the head. Dropout (inverted) is active only in ``train_mode``."""
    if features.shape[-1] != params.source_size:
        raise ShapeError(f"head expects {params.source_size} features, got {features.shape[-1]}")
    drop = train_mode and params.dropout > 0
    masks = [None]
    sources = [features]
    pre = []
    last = len(params.weights) - 1
    for j, (W, b, wires) in enumerate(zip(params.weights, params.biases, params.wiring)):
        inp = sources[wires[0]] if len(wires) == 1 else np.concatenate([sources[s] for s in wires], axis=-1)
        a = inp @ W.T + b
        pre.append(a)
        if j == last:
            out = a
        else:
            out = np.maximum(a, 0.0)
            if drop:
                m = _dropout_mask(out.shape, params.dropout, rng)
                masks.append(m)
                out = out * m
        sources.append(out)
    if return_cache:
        return out, (sources, pre, masks if drop else None)
    return out


def dense_head_backward(dout, cache, params: DenseHeadParams):
    """Returns (weight grads, bias grads, d features)."""
    sources, pre, masks = cache
    n = len(params.weights)
    dsrc = [np.zeros_like(s) for s in sources]
    dsrc[n] = dout
    gW, gb = [None] * n, [None] * n
    for j in range(n - 1, -1, -1):
        W, wires = params.weights[j], params.wiring[j]
        da = dsrc[j + 1]
        if j != n - 1:
            if masks is not None:
                da = da * masks[j + 1]
            da = da * (pre[j] > 0)
        inp = sources[wires[0]] if len(wires) == 1 else np.concatenate([sources[s] for s in wires], axis=-1)
        a2 = da.reshape(-1, da.shape[-1])
        gW[j] = a2.T @ inp.reshape(-1, inp.shape[-1])
        gb[j] = a2.sum(axis=0)
        dinp = da @ W
        off = 0
        for s in wires:
            w = sources[s].shape[-1]
            dsrc[s] = dsrc[s] + dinp[..., off:off + w]
            off += w
    return gW, gb, dsrc[0]
