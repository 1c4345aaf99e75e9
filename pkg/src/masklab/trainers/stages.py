"""Stage 1 (intermediate pre-training), Stage 2 (fine-tuning), and evaluation."""
import json
import re
import string
from dataclasses import dataclass, field, fields
from typing import Dict, List

import numpy as np

from ..diffcore import RngStream
from ..errors import ContractViolation
from ..lmodel import GREEDY, Beam, batch_loss, beam_decode, greedy_decode
from ..masking import exact_product, round_half_up
from .optim import clip_grads, loss_and_grads, make_optimizer, triangular_lr


@dataclass
class StageConfig:
    lr: float = 3e-3
    batch_size: int = 32
    total_updates: int = 3000
    warmup: float = 0.06
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    max_epochs: int = 0  # 0: no epoch cap
    val_interval: int = 0
    train_fraction: float = 1.0
    optimizer: str = "adam"
    clip: float = 5.0

    def validate(self):
        if not 0.0 <= self.warmup < 1.0:
            raise ContractViolation("warmup fraction must lie in [0, 1)")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ContractViolation("train_fraction must lie in (0, 1]")
        if self.batch_size < 1 or self.total_updates < 0:
            raise ContractViolation("batch_size must be positive and total_updates non-negative")
        if not self.seeds:
            raise ContractViolation("seed list must be non-empty")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown stage config keys: {sorted(unknown)}")
        return cls(**d).validate()


def _epoch_batches(stream, n, batch_size, total, max_epochs=0):
    """Yield index batches from successive shuffles until ``total`` batches."""
    done = epoch = 0
    while done < total:
        if max_epochs and epoch >= max_epochs:
            return
        order = stream.permutation(n)
        for k in range(0, n, batch_size):
            if done >= total:
                return
            yield order[k:k + batch_size]
            done += 1
        epoch += 1


def _train(theta, items, make_loss, cfg, stream, history):
    cfg.validate()
    theta = theta.copy()
    opt = make_optimizer(cfg.optimizer)
    for step, idx in enumerate(_epoch_batches(stream, len(items), cfg.batch_size,
                                              cfg.total_updates, cfg.max_epochs)):
        batch = [items[i] for i in idx]
        fn = make_loss(batch)
        if fn is None:
            continue
        loss, grads = loss_and_grads(theta, fn)
        lr = triangular_lr(step, cfg.total_updates, cfg.lr, cfg.warmup)
        opt.step(theta, clip_grads(grads, cfg.clip), lr)
        if history is not None:
            history.append(loss)
    return theta


def intermediate_pretrain(theta_init, policy, documents, cfg, stream=None, history=None):
    """Denoising updates on ``documents`` masked by ``policy``; ``None`` policy skips."""
    if policy is None or cfg.total_updates == 0:
        return theta_init.copy()
    stream = stream or RngStream(0, "stage1")
    mask_stream = stream.child("masks")

    def make_loss(docs):
        pairs = policy.pairs(docs, mask_stream)
        if not pairs:
            return None
        src = [p.x_src for p in pairs]
        tar = [p.x_tar for p in pairs]
        return lambda p: batch_loss(p, src, tar)

    return _train(theta_init, documents, make_loss, cfg, stream, history)


def subsample(pairs, fraction, stream):
    if fraction >= 1.0:
        return list(pairs)
    k = max(1, round_half_up(exact_product(fraction, len(pairs))))
    return [pairs[i] for i in sorted(stream.choice(len(pairs), k))]


def finetune(theta, pairs, cfg, seed, history=None):
    """Fine-tune on ``(s, t)`` pairs; the stream is labelled ``stage2:{seed}``."""
    if not pairs:
        raise ContractViolation("fine-tuning needs at least one (s, t) pair")
    stream = RngStream(seed, f"stage2:{seed}")
    pairs = subsample(pairs, cfg.train_fraction, stream.child("subsample"))

    def make_loss(batch):
        src = [list(s) for s, _ in batch]
        tar = [list(t) for _, t in batch]
        return lambda p: batch_loss(p, src, tar)

    return _train(theta, pairs, make_loss, cfg, stream, history)


# -- exact match -------------------------------------------------------------

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(text):
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match(pred, gold):
    """1 if the normalized strings agree, else 0."""
    return int(normalize_answer(pred) == normalize_answer(gold))


@dataclass
class EvalReport:
    scores: Dict[int, float]
    split: str = "test"

    @property
    def mean(self):
        return float(np.mean(list(self.scores.values())))

    @property
    def std(self):
        return float(np.std(list(self.scores.values())))

    def to_dict(self):
        return {"split": self.split,
                "scores": {str(k): self.scores[k] for k in sorted(self.scores)},
                "mean": self.mean, "std": self.std}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls({int(k): float(v) for k, v in d["scores"].items()}, d.get("split", "test"))

    def csv_row(self, policy, updates, notes=""):
        seeds = ";".join(str(k) for k in sorted(self.scores))
        return f"{policy},{seeds},{self.split},{self.mean:.6f},{self.std:.6f},{updates},{notes}"


CSV_HEADER = "policy,seed,split,em_mean,em_std,updates,notes"


def predict(theta, sources, mode=GREEDY, max_len=20, batch_size=256):
    if mode == GREEDY:
        out = []
        for k in range(0, len(sources), batch_size):
            out.extend(greedy_decode(theta, sources[k:k + batch_size], max_len=max_len))
        return out
    if isinstance(mode, Beam):
        return [beam_decode(theta, s, mode.width, max_len) for s in sources]
    raise ContractViolation(f"unknown decode mode {mode!r}")


def em_score(theta, qa_set, vocab=None, mode=GREEDY):
    """Mean exact match of decoded answers over ``(s, t)`` pairs."""
    if not qa_set:
        raise ContractViolation("empty evaluation set")
    preds = predict(theta, [list(s) for s, _ in qa_set], mode)
    render = vocab.detokenize if vocab is not None else (lambda ids: " ".join(map(str, ids)))
    return float(np.mean([exact_match(render(p), render(t)) for p, (_, t) in zip(preds, qa_set)]))


def evaluate(thetas, qa_set, vocab=None, split="test", mode=GREEDY):
    """``thetas``: ``{seed: theta}``, one fine-tuned model per seed."""
    if isinstance(thetas, dict):
        return EvalReport({int(k): em_score(v, qa_set, vocab, mode) for k, v in thetas.items()}, split)
    return EvalReport({0: em_score(thetas, qa_set, vocab, mode)}, split)
