"""Learned masking policies.

* supervised: embeddings -> 2-layer Bi-LSTM -> start/end logits; a span
  (i, j) scores ``y_st[i] + y_ed[j]``.
* meta: embeddings -> width-3 conv -> two linear layers -> two logits per
  token -> Gumbel-Softmax soft decision.
"""
from dataclasses import dataclass

import numpy as np

from . import nnblocks as nb
from .diffcore import ParamStore, RngStream
from .diffcore import tensor as T
from .diffcore.tensor import Tensor, no_record
from .errors import ContractViolation
from .lmodel import pad_batch
from .masking import Policy, TargetMode


@dataclass(frozen=True)
class SpanScore:
    i: int
    j: int
    score: float


def _consts(store):
    return {k: Tensor(v) for k, v in store.items()}


# -- supervised span extractor -----------------------------------------------

def init_supervised_policy(vocab_size, d_emb=16, hidden=32, seed=0):
    stream = RngStream(seed, "supervised-policy-init")
    store = ParamStore("supervised-policy", seed)
    nb.init_embedding(store, "emb", vocab_size, d_emb, stream)
    nb.init_bilstm(store, "lstm", d_emb, hidden, stream)
    nb.init_linear(store, "st", 2 * hidden, 1, stream)
    nb.init_linear(store, "ed", 2 * hidden, 1, stream)
    return store


def sup_logits(p, ids, mask=None):
    """Batched start/end logits, each ``(B, T)``."""
    ids = np.asarray(ids, dtype=np.int64)
    h = nb.bilstm(p, "lstm", nb.embed(p["emb"], ids), mask)
    B, n = ids.shape
    y_st = T.reshape(nb.linear(p, "st", h), (B, n))
    y_ed = T.reshape(nb.linear(p, "ed", h), (B, n))
    return y_st, y_ed


def sup_forward(p, x):
    if len(x) == 0:
        raise ContractViolation("sup_forward needs a non-empty sequence")
    if isinstance(p, ParamStore):
        p = _consts(p)
    y_st, y_ed = sup_logits(p, [list(x)])
    return T.getitem(y_st, 0), T.getitem(y_ed, 0)


def sup_rank_spans(y_st, y_ed, max_span_len=10):
    """Every valid span sorted by score desc, ties by (i asc, j asc)."""
    y_st = np.asarray(getattr(y_st, "data", y_st), dtype=np.float64)
    y_ed = np.asarray(getattr(y_ed, "data", y_ed), dtype=np.float64)
    if y_st.shape != y_ed.shape or y_st.ndim != 1:
        raise ContractViolation("start and end logits must be equal-length vectors")
    n = y_st.shape[0]
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    ok = (j >= i) & (j - i < max_span_len)
    i, j = i[ok], j[ok]
    score = y_st[i] + y_ed[j]
    order = np.lexsort((j, i, -score))
    return [SpanScore(int(i[k]), int(j[k]), float(score[k])) for k in order]


def _span_mask(n, span):
    d = np.zeros(n, dtype=np.int64)
    d[span.i:span.j + 1] = 1
    return d


def _pick_span(ranked, variant, stream):
    if variant == "Top1":
        return ranked[0]
    if variant == "Top5":
        return ranked[stream.integers(min(5, len(ranked)))]
    raise ContractViolation(f"unknown variant {variant!r}")


def sup_infer_mask(p, x, variant="Top1", stream=None, max_span_len=10):
    """Mask one span: the best (Top1) or a uniform pick among the best five."""
    y_st, y_ed = sup_forward(p, x)
    ranked = sup_rank_spans(y_st, y_ed, max_span_len)
    return _span_mask(len(x), _pick_span(ranked, variant, stream))


def supervised_policy(store, variant="Top1", max_span_len=10, batch_size=64):
    p = _consts(store)

    def decide_batch(docs, stream):
        out = []
        with no_record():
            for k in range(0, len(docs), batch_size):
                chunk = docs[k:k + batch_size]
                ids, mask = pad_batch([d.tokens for d in chunk])
                y_st, y_ed = sup_logits(p, ids, mask)
                for b, doc in enumerate(chunk):
                    n = len(doc.tokens)
                    ranked = sup_rank_spans(y_st.data[b, :n], y_ed.data[b, :n], max_span_len)
                    out.append(_span_mask(n, _pick_span(ranked, variant, stream)))
        return out

    name = "supervised-top1" if variant == "Top1" else "supervised-top5"
    return Policy(name, lambda doc, s: decide_batch([doc], s)[0], TargetMode.MASKED,
                  decide_batch=decide_batch)


# -- meta-learned policy ------------------------------------------------------

def init_meta_policy(vocab_size, d_emb=16, hidden=16, seed=0):
    stream = RngStream(seed, "meta-policy-init")
    store = ParamStore("meta-policy", seed)
    nb.init_embedding(store, "emb", vocab_size, d_emb, stream)
    nb.init_conv1d(store, "conv", d_emb, d_emb, stream)
    nb.init_linear(store, "l1", d_emb, hidden, stream)
    nb.init_linear(store, "l2", hidden, 2, stream)
    return store


def meta_logits(p, ids, mask=None):
    """Two logits per token, ``(B, T, 2)``. Padding acts as conv zero-padding."""
    ids = np.asarray(ids, dtype=np.int64)
    e = nb.embed(p["emb"], ids)
    if mask is not None and not np.all(mask):
        e = e * Tensor(np.asarray(mask, dtype=np.float64)[..., None])
    h = T.tanh(nb.conv1d(p, "conv", e))
    h = T.tanh(nb.linear(p, "l1", h))
    return nb.linear(p, "l2", h)


def meta_soft(p, ids, tau, mask=None, stream=None, noise=None):
    """Batched soft decisions ``(B, T)`` through Gumbel-Softmax."""
    return nb.gumbel_softmax(meta_logits(p, ids, mask), tau, stream, noise)


def meta_forward(p, x, tau, stream=None, noise=None):
    if len(x) == 0:
        raise ContractViolation("meta_forward needs a non-empty sequence")
    if not tau > 0:
        raise ContractViolation(f"temperature must be positive, got {tau}")
    if isinstance(p, ParamStore):
        p = _consts(p)
    if noise is not None:
        noise = np.asarray(noise).reshape((1, len(x), 2))
    d = meta_soft(p, [list(x)], tau, stream=stream, noise=noise)
    return T.getitem(d, 0)


def harden(soft_d):
    soft = np.asarray(getattr(soft_d, "data", soft_d), dtype=np.float64)
    if soft.size and (soft.min() < 0.0 or soft.max() > 1.0):
        raise ContractViolation("soft decisions must lie in [0, 1]")
    return (soft >= 0.5).astype(np.int64)


def meta_policy(store, tau=1.0, budget=0.30, batch_size=64, target_mode=TargetMode.FULL,
                infill=True, postprocess=True):
    """Deployable meta policy: sample with Gumbel noise, harden, post-process."""
    p = _consts(store)

    def decide_batch(docs, stream):
        out = []
        with no_record():
            for k in range(0, len(docs), batch_size):
                chunk = docs[k:k + batch_size]
                ids, mask = pad_batch([d.tokens for d in chunk])
                soft = meta_soft(p, ids, tau, mask, stream=stream).data
                out.extend(harden(soft[b, :len(doc.tokens)]) for b, doc in enumerate(chunk))
        return out

    return Policy("meta", lambda doc, s: decide_batch([doc], s)[0], TargetMode(target_mode),
                  infill=infill, postprocess=postprocess, budget=budget, decide_batch=decide_batch)
