"""Supervised span-extractor policy: labels from (c, t) and the training loop."""
from dataclasses import dataclass

import numpy as np

from ..corpus import find_span
from ..diffcore import RngStream, Tensor
from ..diffcore import tensor as T
from ..diffcore.tensor import no_record
from ..lmodel import pad_batch
from ..policynets import init_supervised_policy, sup_logits, sup_rank_spans
from .optim import clip_grads, loss_and_grads, make_optimizer

_NEG = -1e9


def make_label(c, t):
    """``(start, end)`` (inclusive) of the first occurrence of ``t`` in ``c``."""
    i = find_span(c, t)
    return i, i + len(t) - 1


@dataclass
class SupConfig:
    epochs: int = 30
    lr: float = 3e-3
    batch_size: int = 32
    d_emb: int = 16
    hidden: int = 32
    max_span_len: int = 10
    optimizer: str = "adam"
    clip: float = 5.0
    seed: int = 0


def _batch_arrays(triplets):
    ids, mask = pad_batch([t.context for t in triplets])
    labels = np.array([make_label(t.context, t.target) for t in triplets], dtype=np.int64)
    return ids, mask, labels


def span_loss(p, ids, mask, labels):
    """Mean over the batch of CE(start) + CE(end)."""
    B = ids.shape[0]
    y_st, y_ed = sup_logits(p, ids, mask)
    bias = Tensor((1.0 - mask) * _NEG)
    rows = np.arange(B)
    ce_st = T.getitem(T.log_softmax(y_st + bias), (rows, labels[:, 0]))
    ce_ed = T.getitem(T.log_softmax(y_ed + bias), (rows, labels[:, 1]))
    return T.scale(T.sum(ce_st + ce_ed), -1.0 / B)


def dataset_loss(store, triplets, batch_size=256):
    p = {k: Tensor(v) for k, v in store.items()}
    total = 0.0
    with no_record():
        for k in range(0, len(triplets), batch_size):
            chunk = triplets[k:k + batch_size]
            total += float(span_loss(p, *_batch_arrays(chunk)).data) * len(chunk)
    return total / len(triplets)


def span_accuracy(store, triplets, max_span_len=10, batch_size=256):
    """Fraction of triplets whose top-ranked span is exactly the labelled one."""
    p = {k: Tensor(v) for k, v in store.items()}
    hits = 0
    with no_record():
        for k in range(0, len(triplets), batch_size):
            chunk = triplets[k:k + batch_size]
            ids, mask, labels = _batch_arrays(chunk)
            y_st, y_ed = sup_logits(p, ids, mask)
            for b, t in enumerate(chunk):
                n = len(t.context)
                top = sup_rank_spans(y_st.data[b, :n], y_ed.data[b, :n], max_span_len)[0]
                hits += (top.i, top.j) == tuple(labels[b])
    return hits / len(triplets)


def train_supervised_policy(triplets, val_triplets, cfg=None, vocab_size=None, history=None):
    """Train for ``cfg.epochs`` epochs; return the epoch checkpoint with the lowest val loss.

    ``history`` (a list) receives one ``(epoch, train_loss, val_loss)`` per epoch.
    """
    cfg = cfg or SupConfig()
    if not triplets or not val_triplets:
        raise ValueError("supervised policy training needs non-empty train and val splits")
    for t in list(triplets) + list(val_triplets):
        make_label(t.context, t.target)  # surfaces TargetNotInContext early
    if vocab_size is None:
        vocab_size = 1 + max(max(t.context) for t in list(triplets) + list(val_triplets))
    store = init_supervised_policy(vocab_size, cfg.d_emb, cfg.hidden, cfg.seed)
    opt = make_optimizer(cfg.optimizer)
    stream = RngStream(cfg.seed, "policy")
    best, best_val = store.copy(), dataset_loss(store, val_triplets)
    n = len(triplets)
    for epoch in range(cfg.epochs):
        order = stream.permutation(n)
        losses = []
        for k in range(0, n, cfg.batch_size):
            chunk = [triplets[i] for i in order[k:k + cfg.batch_size]]
            arrays = _batch_arrays(chunk)
            loss, grads = loss_and_grads(store, lambda p: span_loss(p, *arrays))
            opt.step(store, clip_grads(grads, cfg.clip), cfg.lr)
            losses.append(loss)
        val = dataset_loss(store, val_triplets)
        if history is not None:
            history.append((epoch, float(np.mean(losses)), val))
        if val < best_val:
            best, best_val = store.copy(), val
    return best
