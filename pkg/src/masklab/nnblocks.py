"""Differentiable building blocks over ``diffcore`` tensors.

Parameters live in a flat ``name -> Tensor`` dict (usually the result of
``Graph.bind(store.entries)``); each block reads the entries under its own
prefix, e.g. ``enc.W_ih``. The ``init_*`` helpers add those entries to a
:class:`ParamStore`.

Sequence blocks accept either one sequence ``(T, d)`` or a padded batch
``(B, T, d)`` with an optional ``(B, T)`` 0/1 mask; padding sits at the end.
"""
import math

import numpy as np

from . import tokens
from .diffcore import tensor as T
from .diffcore.tensor import Tensor, as_tensor
from .errors import ContractViolation


def uniform_(stream, shape, bound):
    return (2.0 * stream.uniform(shape) - 1.0) * bound


# -- embeddings --------------------------------------------------------------

def init_embedding(store, name, vocab_size, dim, stream):
    store.add(name, stream.normal((vocab_size, dim)) * (1.0 / math.sqrt(dim)))


def _check_ids(E, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= E.shape[0]):
        raise ContractViolation(f"token id out of range for vocabulary of size {E.shape[0]}")
    return ids


def embed(E, ids):
    """Rows of the embedding matrix at ``ids`` (any integer array shape)."""
    ids = _check_ids(E, ids)
    if ids.size == 0:
        return Tensor(np.zeros(ids.shape + (E.shape[1],)))
    return T.getitem(E, ids)


def embed_mixture(E, ids, soft_d, mask_id=tokens.MASK):
    """``(1 - d) * E[id] + d * E[mask]`` per position; affine in ``d``."""
    ids = _check_ids(E, ids)
    soft_d = as_tensor(soft_d)
    if soft_d.shape != ids.shape:
        raise ContractViolation(f"soft decisions shape {soft_d.shape} != ids shape {ids.shape}")
    if soft_d.size and (soft_d.data.min() < 0.0 or soft_d.data.max() > 1.0):
        raise ContractViolation("soft decisions must lie in [0, 1]")
    e = embed(E, ids)
    m = T.getitem(E, mask_id)
    d = T.reshape(soft_d, ids.shape + (1,))
    return (1.0 - d) * e + d * m  # exact at d = 0 and d = 1


# -- affine / conv -----------------------------------------------------------

def init_linear(store, name, n_in, n_out, stream):
    bound = 1.0 / math.sqrt(n_in)
    store.add(f"{name}.W", uniform_(stream, (n_in, n_out), bound))
    store.add(f"{name}.b", uniform_(stream, (n_out,), bound))


def linear(p, name, x):
    W, b = p[f"{name}.W"], p[f"{name}.b"]
    if x.shape[-1] != W.shape[0]:
        raise ContractViolation(f"{name}: input width {x.shape[-1]} != {W.shape[0]}")
    return x @ W + b


def init_conv1d(store, name, c_in, c_out, stream, width=3):
    bound = 1.0 / math.sqrt(c_in * width)
    store.add(f"{name}.W", uniform_(stream, (width, c_in, c_out), bound))
    store.add(f"{name}.b", uniform_(stream, (c_out,), bound))


def conv1d(p, name, x):
    """Same-padded (zeros) 1-D convolution along the time axis."""
    W, b = p[f"{name}.W"], p[f"{name}.b"]
    k, c_in, _ = W.shape
    x = as_tensor(x)
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[-1] != c_in:
        raise ContractViolation(f"{name}: channels {x.shape[-1]} != {c_in}")
    B, n = x.shape[0], x.shape[1]
    half = k // 2
    pad_l = Tensor(np.zeros((B, half, c_in)))
    pad_r = Tensor(np.zeros((B, k - 1 - half, c_in)))
    xp = T.concat([pad_l, x, pad_r], axis=1)
    out = None
    for j in range(k):
        term = T.getitem(xp, (slice(None), slice(j, j + n))) @ T.getitem(W, j)
        out = term if out is None else out + term
    out = out + b
    return T.reshape(out, out.shape[1:]) if single else out


# -- recurrent ---------------------------------------------------------------

def init_lstm(store, name, n_in, hidden, stream):
    bound = 1.0 / math.sqrt(hidden)
    store.add(f"{name}.W_ih", uniform_(stream, (n_in, 4 * hidden), bound))
    store.add(f"{name}.W_hh", uniform_(stream, (hidden, 4 * hidden), bound))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate; gate order i, f, g, o
    store.add(f"{name}.b", b)


def lstm_layer(p, name, x, mask=None, reverse=False):
    """One LSTM direction over a batch ``(B, T, n_in)`` -> ``(B, T, h)``."""
    W_hh = p[f"{name}.W_hh"]
    h_dim = W_hh.shape[0]
    B, n = x.shape[0], x.shape[1]
    xw = x @ p[f"{name}.W_ih"] + p[f"{name}.b"]
    h = c = Tensor(np.zeros((B, h_dim)))
    outs = [None] * n
    order = range(n - 1, -1, -1) if reverse else range(n)
    for t in order:
        z = T.getitem(xw, (slice(None), t)) + h @ W_hh
        s = T.sigmoid(z)
        i = T.getitem(s, (slice(None), slice(0, h_dim)))
        f = T.getitem(s, (slice(None), slice(h_dim, 2 * h_dim)))
        o = T.getitem(s, (slice(None), slice(3 * h_dim, 4 * h_dim)))
        g = T.tanh(T.getitem(z, (slice(None), slice(2 * h_dim, 3 * h_dim))))
        c_new = f * c + i * g
        h_new = o * T.tanh(c_new)
        if mask is not None:
            m = Tensor(mask[:, t:t + 1])
            c = c + m * (c_new - c)
            h = h + m * (h_new - h)
        else:
            c, h = c_new, h_new
        outs[t] = h
    return T.stack(outs, axis=1)


def init_bilstm(store, name, n_in, hidden, stream, layers=2):
    for layer in range(layers):
        width = n_in if layer == 0 else 2 * hidden
        init_lstm(store, f"{name}.l{layer}.fwd", width, hidden, stream)
        init_lstm(store, f"{name}.l{layer}.bwd", width, hidden, stream)


def bilstm(p, name, emb, mask=None, layers=2):
    """Stacked bidirectional LSTM; position t = [forward_t ; backward_t]."""
    x = as_tensor(emb)
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    if x.shape[1] == 0:
        raise ContractViolation("bilstm needs a non-empty sequence")
    mask = None if mask is None else np.asarray(mask, dtype=np.float64)
    for layer in range(layers):
        fwd = lstm_layer(p, f"{name}.l{layer}.fwd", x, mask)
        bwd = lstm_layer(p, f"{name}.l{layer}.bwd", x, mask, reverse=True)
        x = T.concat([fwd, bwd], axis=-1)
    return T.reshape(x, x.shape[1:]) if single else x


def init_gru(store, name, n_in, hidden, stream):
    bound = 1.0 / math.sqrt(hidden)
    store.add(f"{name}.W_ih", uniform_(stream, (n_in, 3 * hidden), bound))
    store.add(f"{name}.W_hh", uniform_(stream, (hidden, 3 * hidden), bound))
    store.add(f"{name}.b_ih", uniform_(stream, (3 * hidden,), bound))
    store.add(f"{name}.b_hh", uniform_(stream, (3 * hidden,), bound))


def gru_cell(p, name, x_t, h, x_proj=None):
    """GRU step with gate order (r, z, n).

    ``x_proj`` may carry a precomputed ``x_t @ W_ih + b_ih``.
    """
    W_hh = p[f"{name}.W_hh"]
    hd = W_hh.shape[0]
    gi = x_proj if x_proj is not None else x_t @ p[f"{name}.W_ih"] + p[f"{name}.b_ih"]
    gh = h @ W_hh + p[f"{name}.b_hh"]
    lead = (slice(None),) * (gi.ndim - 1)
    rz = T.sigmoid(T.getitem(gi, lead + (slice(0, 2 * hd),)) + T.getitem(gh, lead + (slice(0, 2 * hd),)))
    r = T.getitem(rz, lead + (slice(0, hd),))
    z = T.getitem(rz, lead + (slice(hd, 2 * hd),))
    n = T.tanh(T.getitem(gi, lead + (slice(2 * hd, 3 * hd),)) + r * T.getitem(gh, lead + (slice(2 * hd, 3 * hd),)))
    return n + z * (h - n)


# -- discrete relaxation / losses -------------------------------------------

def gumbel_noise(stream, shape):
    return stream.gumbel(tuple(shape))


def gumbel_softmax(logits, tau, stream=None, noise=None):
    """Relaxed sample of the class-1 indicator from ``(..., 2)`` logits.

    Returns ``softmax((logits + g) / tau)[..., 1]`` with ``g`` i.i.d.
    Gumbel(0, 1); pass ``noise`` to freeze ``g``.
    """
    if not tau > 0:
        raise ContractViolation(f"temperature must be positive, got {tau}")
    logits = as_tensor(logits)
    if logits.shape[-1] != 2:
        raise ContractViolation("gumbel_softmax expects two logits per position")
    if noise is None:
        if stream is None:
            raise ContractViolation("gumbel_softmax needs a stream or frozen noise")
        noise = gumbel_noise(stream, logits.shape)
    y = T.softmax(T.scale(logits + Tensor(noise), 1.0 / tau))
    return T.getitem(y, (Ellipsis, 1))


def softmax_xent(logits, target):
    """``-log softmax(logits)[target]`` for a single logit vector."""
    logits = as_tensor(logits)
    if logits.ndim != 1 or not 0 <= int(target) < logits.shape[0]:
        raise ContractViolation("softmax_xent expects a 1-D logit vector and a valid target")
    return T.scale(T.getitem(T.log_softmax(logits), int(target)), -1.0)


def sequence_xent(logits, targets, mask):
    """Mean token cross-entropy per sequence, averaged over the batch.

    ``logits`` is ``(B, L, V)``; ``targets``/``mask`` are ``(B, L)``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    if logits.shape[:2] != targets.shape or targets.shape != mask.shape:
        raise ContractViolation("sequence_xent: logits/targets/mask shapes disagree")
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ContractViolation("sequence_xent: empty target sequence")
    B, L = targets.shape
    lp = T.log_softmax(logits)
    picked = T.getitem(lp, (np.arange(B)[:, None], np.arange(L)[None, :], targets))
    w = mask / (counts[:, None] * B)
    return T.scale(T.sum(picked * Tensor(w)), -1.0)


def weighted_sequence_xent(logits, targets, weights):
    """Per-sequence weighted mean token cross-entropy, averaged over the batch.

    ``weights`` is a ``(B, L)`` Tensor (differentiable); each row is
    normalized by its own sum.
    """
    targets = np.asarray(targets, dtype=np.int64)
    weights = as_tensor(weights)
    if logits.shape[:2] != targets.shape or targets.shape != weights.shape:
        raise ContractViolation("weighted_sequence_xent: logits/targets/weights shapes disagree")
    B, L = targets.shape
    lp = T.log_softmax(logits)
    picked = T.getitem(lp, (np.arange(B)[:, None], np.arange(L)[None, :], targets))
    per_seq = T.sum(picked * weights, axis=1) / (T.sum(weights, axis=1) + Tensor(np.full(B, 1e-8)))
    return T.scale(T.sum(per_seq), -1.0 / B)
