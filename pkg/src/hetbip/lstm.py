"""Batched LSTMs and mean-pooled Bi-LSTMs with explicit backward passes.

Every array carries a leading *stack* axis ``S`` so that several independent
LSTMs (both directions, several neighbor types) advance through one Python
loop. Sequences are right-padded to a common length ``T``; padded steps come
after every valid step, so they never influence valid outputs and receive zero
gradient once their outputs are masked out of the pooling.
"""
from __future__ import annotations

import numpy as np


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_forward(X, W, U, b, keep_cache=True):
    """``X``: ``(S, B, T, n)``; ``W``: ``(S, n, 4H)``; ``U``: ``(S, H, 4H)``; ``b``: ``(S, 4H)``.

    Gate layout along the 4H axis is input, forget, output, candidate.
    Returns hidden states ``(S, B, T, H)`` and a cache for :func:`lstm_backward`.
    """
    S, B, T, _ = X.shape
    H = U.shape[1]
    U0 = U
    dt = np.result_type(X, W)
    XW = (X.reshape(S, B * T, -1) @ W).reshape(S, B, T, -1) + b[:, None, None, :]
    h = np.zeros((S, B, H), dtype=dt)
    c = np.zeros((S, B, H), dtype=dt)
    out = np.empty((S, B, T, H), dtype=dt)
    if keep_cache:
        acts = np.empty((T, S, B, 4 * H), dtype=dt)
        cs = np.empty((T + 1, S, B, H), dtype=dt)
        tcs = np.empty((T, S, B, H), dtype=dt)
        cs[0] = c
    # sigmoid(x) = (1 + tanh(x / 2)) / 2, so one tanh covers all four gates
    scale = np.full(4 * H, 0.5, dtype=dt)
    scale[3 * H :] = 1.0
    XW *= scale
    U = U * scale
    for t in range(T):
        # h and c start at zero, so step 0 needs no recurrent term
        a = np.tanh(XW[:, :, t] + h @ U if t else XW[:, :, 0])
        sg = a[..., : 3 * H]
        sg += 1.0
        sg *= 0.5
        g = a[..., 3 * H :]
        c = sg[..., H : 2 * H] * c + sg[..., :H] * g if t else sg[..., :H] * g
        tc = np.tanh(c)
        h = sg[..., 2 * H :] * tc
        out[:, :, t] = h
        if keep_cache:
            acts[t] = a
            cs[t + 1] = c
            tcs[t] = tc
    cache = (X, W, U0, acts, cs, tcs, out) if keep_cache else None
    return out, cache


def lstm_backward(dout, cache):
    """Gradients ``(dX, dW, dU, db)`` given ``dout`` shaped like the forward output."""
    X, W, U, acts, cs, tcs, out = cache
    T, S, B, H4 = acts.shape
    H = H4 // 4
    dz_all = np.empty((S, B, T, H4), dtype=acts.dtype)
    dU = np.zeros_like(U)
    Ut = U.transpose(0, 2, 1)
    dh_next = np.zeros((S, B, H), dtype=acts.dtype)
    dc_next = np.zeros((S, B, H), dtype=acts.dtype)
    for t in range(T - 1, -1, -1):
        a = acts[t]
        i, f, o, g = a[..., :H], a[..., H : 2 * H], a[..., 2 * H : 3 * H], a[..., 3 * H :]
        tc = tcs[t]
        dh = dout[:, :, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = dz_all[:, :, t]
        dz[..., :H] = dc * g * i * (1.0 - i)
        dz[..., H : 2 * H] = dc * cs[t] * f * (1.0 - f)
        dz[..., 2 * H : 3 * H] = dh * tc * o * (1.0 - o)
        dz[..., 3 * H :] = dc * i * (1.0 - g * g)
        dc_next = dc * f
        if t > 0:
            dU += out[:, :, t - 1].transpose(0, 2, 1) @ dz
        dh_next = dz @ Ut
    flat = dz_all.reshape(S, B * T, H4)
    dW = X.reshape(S, B * T, -1).transpose(0, 2, 1) @ flat
    db = flat.sum(axis=1)
    dX = (flat @ W.transpose(0, 2, 1)).reshape(S, B, T, -1)
    return dX, dW, dU, db


def _reverse_index(lengths, T):
    idx = lengths[:, None] - 1 - np.arange(T)[None, :]
    mask = idx >= 0
    return np.where(mask, idx, 0), mask


class Layout:
    """Padding and reversal indices for a group of right-padded sequence batches."""

    def __init__(self, lengths_list, T_list):
        self.m = m = len(lengths_list)
        self.sizes = [(len(L), T) for L, T in zip(lengths_list, T_list)]
        self.Bm = max(B for B, _ in self.sizes)
        self.Tm = max(T for _, T in self.sizes)
        lens = np.ones((m, self.Bm), dtype=np.int64)
        self.masks = np.zeros((m, self.Bm, self.Tm), dtype=bool)
        self.revs = np.zeros((m, self.Bm, self.Tm), dtype=np.int64)
        self.rows = []
        for k, (L, T) in enumerate(zip(lengths_list, T_list)):
            B = len(L)
            rev, mask = _reverse_index(L, T)
            lens[k, :B] = L
            self.masks[k, :B, :T] = mask
            self.revs[k, :B, :T] = rev
            self.rows.append(np.arange(B)[:, None])
        self.mask2 = np.repeat(self.masks, 2, axis=0)[..., None]
        self.inv = 1.0 / np.repeat(lens, 2, axis=0)[..., None]


def multi_bilstm_mean_forward(seqs, weights, keep_cache=True, layout=None):
    """Several mean-pooled Bi-LSTMs advanced together.

    ``seqs`` is a list of ``(X, lengths)`` with ``X`` shaped ``(B_i, T_i, n)`` and
    every length >= 1. ``weights`` is a stacked ``(W, U, b)`` triple whose stack
    axis has two entries per sequence batch: forward then backward direction.
    Returns a list of ``(B_i, 2H)`` outputs. A precomputed :class:`Layout` for
    the same lengths may be passed in.
    """
    if layout is None:
        layout = Layout([L for _, L in seqs], [X.shape[1] for X, _ in seqs])
    n = seqs[0][0].shape[2]
    dt = np.result_type(*(X for X, _ in seqs))
    Xs = np.zeros((2 * layout.m, layout.Bm, layout.Tm, n), dtype=dt)
    for k, (X, _) in enumerate(seqs):
        B, T, _ = X.shape
        Xs[2 * k, :B, :T] = X
        Xs[2 * k + 1, :B, :T] = X[layout.rows[k], layout.revs[k, :B, :T]] * layout.masks[k, :B, :T, None]
    Hs, cache = lstm_forward(Xs, *weights, keep_cache)
    pooled = (Hs * layout.mask2).sum(axis=2) * layout.inv  # (2m, Bm, H)
    outs = [
        np.concatenate([pooled[2 * k, :B], pooled[2 * k + 1, :B]], axis=1)
        for k, (B, _) in enumerate(layout.sizes)
    ]
    return outs, ((cache, layout, Hs.shape[3]) if keep_cache else None)


def multi_bilstm_mean_backward(douts, fcache):
    """Returns a list of ``dX`` per sequence batch and the stacked ``(dW, dU, db)``."""
    cache, layout, H = fcache
    dpool = np.zeros((2 * layout.m, layout.Bm, H), dtype=douts[0].dtype)
    for k, d in enumerate(douts):
        B = d.shape[0]
        dpool[2 * k, :B] = d[:, :H]
        dpool[2 * k + 1, :B] = d[:, H:]
    dHs = layout.mask2 * (dpool * layout.inv)[:, :, None, :]
    dXs, dW, dU, db = lstm_backward(dHs, cache)
    dXlist = []
    for k, (B, T) in enumerate(layout.sizes):
        rev = layout.revs[k, :B, :T]
        mask = layout.masks[k, :B, :T, None]
        dXr = dXs[2 * k + 1, :B, :T]
        # reversal is an involution on the valid prefix
        dXlist.append(dXs[2 * k, :B, :T] + dXr[layout.rows[k], rev] * mask)
    return dXlist, (dW, dU, db)


def stack_directions(fwd, bwd):
    """Stack two ``(W, U, b)`` triples into the layout expected above."""
    return tuple(np.stack([f, b]) for f, b in zip(fwd, bwd))


def bilstm_mean_forward(X, lengths, fwd, bwd):
    outs, cache = multi_bilstm_mean_forward([(X, lengths)], stack_directions(fwd, bwd))
    return outs[0], cache


def bilstm_mean_backward(dout, cache):
    """Returns ``dX`` and the forward and backward ``(dW, dU, db)`` triples."""
    dX, (dW, dU, db) = multi_bilstm_mean_backward([dout], cache)
    return dX[0], (dW[0], dU[0], db[0]), (dW[1], dU[1], db[1])
