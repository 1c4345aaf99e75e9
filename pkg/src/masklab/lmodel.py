"""Tiny denoising seq2seq LM: GRU encoder, GRU decoder with dot attention.

The decoder input at step t is ``[embed(y_{t-1}) ; ctx_{t-1}]`` where
``ctx`` is the attention readout over encoder states. Output logits come
from ``[h_t ; ctx_t]``. Losses are teacher-forced mean token cross-entropy
on ``<s> t`` -> ``t </s>``.
"""
from dataclasses import dataclass

import numpy as np

from . import nnblocks as nb
from . import tokens
from .diffcore import ParamStore, RngStream
from .diffcore import tensor as T
from .diffcore.tensor import Tensor, as_tensor, no_record
from .errors import ContractViolation

_NEG = -1e9


def init_lm(vocab_size, d_emb=16, hidden=32, seed=0):
    stream = RngStream(seed, "lm-init")
    store = ParamStore("lm", seed)
    nb.init_embedding(store, "emb", vocab_size, d_emb, stream)
    nb.init_gru(store, "enc", d_emb, hidden, stream)
    nb.init_gru(store, "dec", d_emb + hidden, hidden, stream)
    nb.init_linear(store, "out", 2 * hidden, vocab_size, stream)
    return store


def lm_dims(p):
    V, d = p["emb"].shape
    return V, d, p["enc.W_hh"].shape[0]


def pad_batch(seqs, pad=tokens.PAD):
    """Right-pad integer sequences -> ``(ids (B, L), mask (B, L))``."""
    L = max((len(s) for s in seqs), default=0)
    ids = np.full((len(seqs), L), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), L))
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    return ids, mask


def encode(p, src_emb, src_mask):
    """Run the encoder; returns ``(states (B, S, h), final state (B, h))``."""
    W_ih = p["enc.W_ih"]
    hd = p["enc.W_hh"].shape[0]
    B, S = src_mask.shape
    if S == 0:
        raise ContractViolation("empty source sequence")
    xw = src_emb @ W_ih + p["enc.b_ih"]
    h = Tensor(np.zeros((B, hd)))
    states = []
    full = bool(np.all(src_mask))
    for t in range(S):
        h_new = nb.gru_cell(p, "enc", None, h, x_proj=T.getitem(xw, (slice(None), t)))
        if full:
            h = h_new
        else:
            h = h + Tensor(src_mask[:, t:t + 1]) * (h_new - h)
        states.append(h)
    return T.stack(states, axis=1), h


class _Decoder:
    """Holds the per-batch attention memory; ``step`` advances one token."""

    def __init__(self, p, states, src_mask):
        self.p = p
        self.states = states
        self.bias = Tensor((1.0 - src_mask) * _NEG)
        V, d, hd = lm_dims(p)
        self.d, self.hd = d, hd
        W = p["dec.W_ih"]
        self.W_emb = T.getitem(W, slice(0, d))
        self.W_ctx = T.getitem(W, slice(d, d + hd))

    def input_proj(self, ids):
        return nb.embed(self.p["emb"], ids) @ self.W_emb + self.p["dec.b_ih"]

    def step(self, gi_emb, h, ctx):
        B = h.shape[0]
        gi = gi_emb + ctx @ self.W_ctx
        h = nb.gru_cell(self.p, "dec", None, h, x_proj=gi)
        scores = T.reshape(self.states @ T.reshape(h, (B, self.hd, 1)), (B, -1)) + self.bias
        att = T.softmax(scores)
        ctx = T.reshape(T.reshape(att, (B, 1, -1)) @ self.states, (B, self.hd))
        return h, ctx

    def logits(self, h, ctx):
        return nb.linear(self.p, "out", T.concat([h, ctx], axis=-1))


def _source_embedding(p, src, src_mask=None):
    if isinstance(src, Tensor):
        emb = src
        if emb.ndim == 2:
            emb = T.reshape(emb, (1,) + emb.shape)
        if src_mask is None:
            src_mask = np.ones(emb.shape[:2])
        return emb, np.asarray(src_mask, dtype=np.float64)
    if src_mask is None:
        seqs = [list(src)] if np.ndim(src[0]) == 0 else [list(s) for s in src]
        ids, src_mask = pad_batch(seqs)
    else:
        ids = np.asarray(src, dtype=np.int64)
    return nb.embed(p["emb"], ids), np.asarray(src_mask, dtype=np.float64)


def batch_loss(p, src, targets, src_mask=None, weights=None):
    """Teacher-forced loss for a batch.

    ``src`` is a list of id sequences, a padded id array with ``src_mask``,
    or an embedding Tensor ``(B, S, d)`` (the soft-mask path).
    ``targets`` is a list of id sequences (without BOS/EOS). ``weights``
    (optional ``(B, max target len)`` Tensor) turns the loss into a weighted
    mean over target tokens; the EOS step then carries no weight.
    """
    if any(len(t) == 0 for t in targets):
        raise ContractViolation("empty target sequence")
    emb, src_mask = _source_embedding(p, src, src_mask)
    if emb.shape[0] != len(targets):
        raise ContractViolation("source and target batch sizes differ")
    states, h = encode(p, emb, src_mask)
    dec = _Decoder(p, states, src_mask)
    tin, tmask = pad_batch([[tokens.BOS] + list(t) for t in targets])
    tout, _ = pad_batch([list(t) + [tokens.EOS] for t in targets])
    gi_all = dec.input_proj(tin)
    B, L = tin.shape
    ctx = Tensor(np.zeros((B, dec.hd)))
    outs = []
    for t in range(L):
        h, ctx = dec.step(T.getitem(gi_all, (slice(None), t)), h, ctx)
        outs.append(T.concat([h, ctx], axis=-1))
    feats = T.stack(outs, axis=1)
    logits = nb.linear(p, "out", feats)
    if weights is not None:
        w = T.concat([as_tensor(weights), Tensor(np.zeros((B, L - weights.shape[1])))], axis=1)
        return nb.weighted_sequence_xent(logits, tout, w)
    return nb.sequence_xent(logits, tout, tmask)


def _single(seq):
    return isinstance(seq, Tensor) or np.ndim(seq[0] if len(seq) else 0) == 0


def denoise_loss(p, x_src, x_tar):
    """Loss of generating ``x_tar`` from ``x_src`` (ids or a T x d embedding)."""
    if isinstance(x_src, Tensor):
        return batch_loss(p, x_src, [x_tar])
    return batch_loss(p, [list(x_src)], [list(x_tar)])


def seq2seq_loss(p, s, t):
    return denoise_loss(p, s, t)


# -- decoding ----------------------------------------------------------------

@dataclass(frozen=True)
class Beam:
    width: int = 4


GREEDY = "greedy"


def _as_tensors(p):
    if isinstance(p, ParamStore):
        return {k: Tensor(v) for k, v in p.items()}
    return p


def greedy_decode(p, sources, max_len=20, min_len=1):
    """Batched greedy decoding; returns a list of id lists (EOS stripped)."""
    p = _as_tensors(p)
    if any(len(s) == 0 for s in sources):
        raise ContractViolation("empty source sequence")
    with no_record():
        ids, mask = pad_batch([list(s) for s in sources])
        states, h = encode(p, nb.embed(p["emb"], ids), mask)
        dec = _Decoder(p, states, mask)
        B = len(sources)
        ctx = Tensor(np.zeros((B, dec.hd)))
        prev = np.full(B, tokens.BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        out = [[] for _ in range(B)]
        for step in range(max_len):
            h, ctx = dec.step(dec.input_proj(prev), h, ctx)
            logits = dec.logits(h, ctx).data.copy()
            if step < min_len:
                logits[:, tokens.EOS] = -np.inf
            prev = logits.argmax(axis=-1)
            for i in range(B):
                if done[i]:
                    continue
                if prev[i] == tokens.EOS:
                    done[i] = True
                else:
                    out[i].append(int(prev[i]))
            if done.all():
                break
    return out


def beam_decode(p, source, width=4, max_len=20, min_len=1, len_penalty=1.0):
    """Beam search for one source; final pick by summed log-prob / len**penalty."""
    p = _as_tensors(p)
    if len(source) == 0:
        raise ContractViolation("empty source sequence")
    with no_record():
        ids, mask = pad_batch([list(source)])
        states, h = encode(p, nb.embed(p["emb"], ids), mask)
        hd = h.shape[1]
        hyps = [((), 0.0)]
        hs = h.data
        ctxs = np.zeros((1, hd))
        finished = []
        for step in range(max_len):
            n = len(hyps)
            dec = _Decoder(p, Tensor(np.repeat(states.data, n, axis=0)), np.repeat(mask, n, axis=0))
            prev = np.array([hy[0][-1] if hy[0] else tokens.BOS for hy in hyps])
            h_new, ctx_new = dec.step(dec.input_proj(prev), Tensor(hs), Tensor(ctxs))
            logp = T.log_softmax(dec.logits(h_new, ctx_new)).data.copy()
            if step < min_len:
                logp[:, tokens.EOS] = -np.inf
            total = np.array([hy[1] for hy in hyps])[:, None] + logp
            flat = total.ravel()
            order = np.argsort(-flat, kind="stable")[:width]
            alive, keep = [], []
            V = logp.shape[1]
            for k in order:
                if not np.isfinite(flat[k]):
                    continue
                src_i, tok = divmod(int(k), V)
                seq, score = hyps[src_i][0], float(flat[k])
                if tok == tokens.EOS:
                    finished.append((seq, score))
                else:
                    alive.append((seq + (tok,), score))
                    keep.append(src_i)
            if len(finished) >= width or not alive:
                break
            hyps = alive
            hs = h_new.data[keep]
            ctxs = ctx_new.data[keep]
        else:
            finished.extend(hyps)
        if not finished:
            finished.extend(hyps)

    def norm(item):
        seq, score = item
        return score / max(1, len(seq) + 1) ** len_penalty

    best = max(finished, key=norm)
    return list(best[0])


def decode(p, s, mode=GREEDY, max_len=20, min_len=1):
    if mode == GREEDY:
        return greedy_decode(p, [s], max_len=max_len, min_len=min_len)[0]
    if isinstance(mode, Beam):
        return beam_decode(p, s, width=mode.width, max_len=max_len, min_len=min_len)
    raise ContractViolation(f"unknown decode mode {mode!r}")
