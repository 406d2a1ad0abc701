"""LSTM and bidirectional LSTM over [T, D] sequences.

lstm_forward is a single fused graph node: the whole recurrence runs in
numpy and the backward closure replays it in reverse (backpropagation
through time). This keeps the graph small enough that training stays fast
without changing any semantics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import _accumulate, _node
from .errors import DimensionError


@dataclass
class LstmParams:
    w_x: "ad.Tensor"   # [D, 4H], gate blocks ordered input, forget, cell, output
    w_h: "ad.Tensor"   # [H, 4H]
    bias: "ad.Tensor"  # [4H]
    hidden: int

    def named(self):
        yield "wx", self.w_x
        yield "wh", self.w_h
        yield "bias", self.bias


def init_lstm_params(rng, input_dim, hidden):
    w_x = ad.glorot_uniform(rng, (input_dim, 4 * hidden), input_dim, 4 * hidden)
    w_h = ad.glorot_uniform(rng, (hidden, 4 * hidden), hidden, 4 * hidden)
    bias = np.zeros(4 * hidden)
    bias[hidden:2 * hidden] = 1.0  # forget gate starts open
    return LstmParams(w_x, w_h, ad.Tensor(bias, requires_grad=True), hidden)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def lstm_forward(seq, params):
    """Run the LSTM over all T steps from zero initial state; returns [T, H]."""
    if seq.data.ndim != 2:
        raise DimensionError(f"lstm_forward expects a 2-d sequence, got {seq.data.ndim}-d")
    t_len, d = seq.data.shape
    if t_len < 1:
        raise DimensionError("lstm_forward: empty sequence (axis 0)")
    h = params.hidden
    if params.w_x.data.shape != (d, 4 * h):
        raise DimensionError(
            f"lstm_forward: input width {d} does not match w_x shape {params.w_x.data.shape}"
        )
    if params.w_h.data.shape != (h, 4 * h) or params.bias.data.shape != (4 * h,):
        raise DimensionError("lstm_forward: recurrent weight or bias shape inconsistent with hidden size")

    w_x, w_h, bias = params.w_x, params.w_h, params.bias
    zx = seq.data @ w_x.data + bias.data
    gate_i = np.empty((t_len, h))
    gate_f = np.empty((t_len, h))
    gate_g = np.empty((t_len, h))
    gate_o = np.empty((t_len, h))
    cells = np.empty((t_len, h))
    tanh_c = np.empty((t_len, h))
    hidden_seq = np.empty((t_len, h))
    h_prev = np.zeros(h)
    c_prev = np.zeros(h)
    for t in range(t_len):
        z = zx[t] + h_prev @ w_h.data
        gate_i[t] = _sigmoid(z[:h])
        gate_f[t] = _sigmoid(z[h:2 * h])
        gate_g[t] = np.tanh(z[2 * h:3 * h])
        gate_o[t] = _sigmoid(z[3 * h:])
        cells[t] = gate_f[t] * c_prev + gate_i[t] * gate_g[t]
        tanh_c[t] = np.tanh(cells[t])
        hidden_seq[t] = gate_o[t] * tanh_c[t]
        h_prev = hidden_seq[t]
        c_prev = cells[t]

    def bw(g):
        dz_all = np.empty((t_len, 4 * h))
        dh_next = np.zeros(h)
        dc_next = np.zeros(h)
        for t in range(t_len - 1, -1, -1):
            dh = g[t] + dh_next
            c_before = cells[t - 1] if t > 0 else np.zeros(h)
            do = dh * tanh_c[t]
            dc = dh * gate_o[t] * (1.0 - tanh_c[t] ** 2) + dc_next
            di = dc * gate_g[t]
            dg = dc * gate_i[t]
            df = dc * c_before
            dz = dz_all[t]
            dz[:h] = di * gate_i[t] * (1.0 - gate_i[t])
            dz[h:2 * h] = df * gate_f[t] * (1.0 - gate_f[t])
            dz[2 * h:3 * h] = dg * (1.0 - gate_g[t] ** 2)
            dz[3 * h:] = do * gate_o[t] * (1.0 - gate_o[t])
            dh_next = dz @ w_h.data.T
            dc_next = dc * gate_f[t]
        prev_hidden = np.vstack([np.zeros((1, h)), hidden_seq[:-1]])
        _accumulate(w_x, seq.data.T @ dz_all)
        _accumulate(w_h, prev_hidden.T @ dz_all)
        _accumulate(bias, dz_all.sum(axis=0))
        _accumulate(seq, dz_all @ w_x.data.T)

    return _node(hidden_seq, (seq, w_x, w_h, bias), bw)


def bilstm(seq, fwd, bwd):
    """Forward pass plus a reversed pass re-aligned to time, feature-concatenated."""
    if fwd.hidden != bwd.hidden:
        raise DimensionError(
            f"bilstm: direction hidden sizes differ ({fwd.hidden} vs {bwd.hidden})"
        )
    forward_out = lstm_forward(seq, fwd)
    backward_out = ad.reverse_rows(lstm_forward(ad.reverse_rows(seq), bwd))
    return ad.concat([forward_out, backward_out], axis=1)
