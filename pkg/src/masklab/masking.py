"""Mask decisions, the x (+) d operation, heuristic policies, post-processing."""
import enum
import json
import logging
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, List, Optional

import numpy as np

from . import tokens
from .errors import ContractViolation, NoSalientSpan

log = logging.getLogger(__name__)


class TargetMode(str, enum.Enum):
    FULL = "FullSequence"
    MASKED = "MaskedTokens"


@dataclass
class MaskedPair:
    x_src: List[int]
    x_tar: List[int]
    target_mode: TargetMode


def exact_product(rate, n):
    """``rate * n`` computed on the decimal value of ``rate`` (0.3 * 10 == 3)."""
    return Fraction(repr(float(rate))) * n


def round_half_up(q):
    return int(math.floor(q + Fraction(1, 2)))


def as_decisions(d, n=None):
    d = np.asarray(d, dtype=np.int64)
    if d.ndim != 1 or (d.size and not np.isin(d, (0, 1)).all()):
        raise ContractViolation("mask decisions must be a 0/1 vector")
    if n is not None and d.size != n:
        raise ContractViolation(f"decisions have length {d.size}, sequence has {n}")
    return d


def apply_mask(x, d, infill=False, mask_id=tokens.MASK):
    """Replace masked positions with ``mask_id``; ``infill`` collapses runs."""
    d = as_decisions(d, len(x))
    out = []
    prev_masked = False
    for tok, m in zip(x, d):
        if m:
            if not (infill and prev_masked):
                out.append(mask_id)
            prev_masked = True
        else:
            out.append(int(tok))
            prev_masked = False
    return out


def build_target(x, d, mode):
    d = as_decisions(d, len(x))
    if TargetMode(mode) is TargetMode.FULL:
        return [int(t) for t in x]
    return [int(t) for t, m in zip(x, d) if m]


def make_pair(x, d, mode, infill=False):
    """``MaskedPair`` for ``x``; ``None`` when the target would be empty."""
    tar = build_target(x, d, mode)
    if not tar:
        return None
    return MaskedPair(apply_mask(x, d, infill), tar, TargetMode(mode))


# -- heuristic policies ------------------------------------------------------

def policy_rand(x, stream, rate=0.15):
    n = len(x)
    if n < 1:
        raise ContractViolation("policy_rand needs a non-empty sequence")
    if not 0.0 < rate <= 1.0:
        raise ContractViolation(f"mask rate must lie in (0, 1], got {rate}")
    k = max(1, round_half_up(exact_product(rate, n)))
    d = np.zeros(n, dtype=np.int64)
    d[stream.choice(n, min(k, n))] = 1
    return d


def policy_orig(x, stream, lam=3.0, coverage=0.15, max_span=8):
    """Poisson-length spans at random starts until ``coverage`` is reached.

    Lengths outside ``[1, max_span]`` are redrawn, which bounds the overshoot
    past ``coverage`` by ``max_span`` tokens.
    """
    n = len(x)
    if n < 1:
        raise ContractViolation("policy_orig needs a non-empty sequence")
    need = exact_product(coverage, n)
    d = np.zeros(n, dtype=np.int64)
    while d.sum() < need:
        length = 0
        while not 1 <= length <= max_span:
            length = stream.poisson(lam)
        length = min(length, n)
        start = stream.integers(n - length + 1)
        d[start:start + length] = 1
    return d


def policy_ssm(doc, stream):
    """Mask exactly one uniformly chosen entity span."""
    if not doc.entities:
        raise NoSalientSpan(f"{doc.doc_id} has no entity spans")
    start, end, _ = doc.entities[stream.integers(len(doc.entities))]
    d = np.zeros(len(doc.tokens), dtype=np.int64)
    d[start:end] = 1
    return d


def policy_sentence(doc, stream, mode="Random", fraction=0.30):
    """Mask ``ceil(fraction * n_sent)`` whole sentences (leading or random)."""
    sents = doc.sentences()
    if not sents:
        raise ContractViolation("policy_sentence needs at least one sentence")
    k = min(len(sents), math.ceil(exact_product(fraction, len(sents))))
    if mode == "First":
        chosen = range(k)
    elif mode == "Random":
        chosen = stream.choice(len(sents), k)
    else:
        raise ContractViolation(f"unknown sentence mode {mode!r}")
    d = np.zeros(len(doc.tokens), dtype=np.int64)
    for i in chosen:
        a, b = sents[i]
        d[a:b] = 1
    return d


# -- post-processing ---------------------------------------------------------

def whole_word(d, word_ids):
    d = as_decisions(d, len(word_ids))
    wids = np.asarray(word_ids)
    hit = np.unique(wids[d == 1])
    return np.isin(wids, hit).astype(np.int64)


def postprocess(d, word_ids, stream, budget=0.30, trigger=0.5):
    """Whole-word expansion, then whole-word unmasking down to ``budget``.

    Unmasking kicks in when the masked fraction exceeds ``trigger`` or
    ``budget``; words are released in uniformly random order, but the last
    masked word is always kept, so the result never exceeds
    ``budget + longest word / n``.
    """
    d = whole_word(d, word_ids)
    n = len(d)
    if n == 0:
        return d
    frac = d.sum() / n
    if frac > trigger or frac > budget:
        wids = np.asarray(word_ids)
        masked_words = np.unique(wids[d == 1])
        limit = exact_product(budget, n)
        order = stream.permutation(len(masked_words))
        for k in order[:-1]:
            if d.sum() <= limit:
                break
            d[wids == masked_words[k]] = 0
    return d


# -- policy objects used by the pre-training stage ---------------------------

@dataclass
class Policy:
    """A named masking policy plus how its masks are consumed downstream."""

    name: str
    decide: Callable  # (Document, RngStream) -> decisions
    target_mode: TargetMode = TargetMode.MASKED
    infill: bool = False
    postprocess: bool = False
    budget: float = 0.30
    decide_batch: Optional[Callable] = None  # (docs, RngStream) -> list of decisions

    def decisions(self, docs, stream):
        if self.decide_batch is not None:
            ds = self.decide_batch(docs, stream)
        else:
            ds = [self.decide(doc, stream) for doc in docs]
        if self.postprocess:
            ds = [postprocess(d, doc.word_ids, stream, self.budget) for d, doc in zip(ds, docs)]
        return ds

    def pairs(self, docs, stream):
        """Masked pairs for a batch; degenerate (empty-target) docs are dropped."""
        out = []
        for doc, d in zip(docs, self.decisions(docs, stream)):
            pair = make_pair(doc.tokens, d, self.target_mode, self.infill)
            if pair is not None:
                out.append(pair)
        return out


def _ssm_with_fallback(doc, stream):
    try:
        return policy_ssm(doc, stream)
    except NoSalientSpan:
        log.info("no entity in %s; falling back to random masking", doc.doc_id)
        return policy_rand(doc.tokens, stream)


def heuristic_policy(name, **options):
    """Build one of: rand, orig, ssm, mask-first-sent, mask-random-sent."""
    rate = options.pop("rate", 0.15)
    fraction = options.pop("fraction", 0.30)
    if name == "rand":
        base = Policy(name, lambda doc, s: policy_rand(doc.tokens, s, rate), TargetMode.MASKED)
    elif name == "orig":
        lam = options.pop("lam", 3.0)
        max_span = options.pop("max_span", 8)
        base = Policy(name, lambda doc, s: policy_orig(doc.tokens, s, lam, rate, max_span), TargetMode.FULL,
                      infill=True)
    elif name == "ssm":
        base = Policy(name, _ssm_with_fallback, TargetMode.MASKED)
    elif name == "mask-first-sent":
        base = Policy(name, lambda doc, s: policy_sentence(doc, s, "First", fraction), TargetMode.MASKED)
    elif name == "mask-random-sent":
        base = Policy(name, lambda doc, s: policy_sentence(doc, s, "Random", fraction), TargetMode.MASKED)
    else:
        raise ContractViolation(f"unknown heuristic policy {name!r}")
    for key, value in options.items():
        if key == "target_mode":
            value = TargetMode(value)
        if not hasattr(base, key) or key in ("name", "decide", "decide_batch"):
            raise ContractViolation(f"unknown policy option {key!r}")
        setattr(base, key, value)
    return base


HEURISTICS = ("rand", "orig", "ssm", "mask-first-sent", "mask-random-sent")


# -- mask dumps --------------------------------------------------------------

def save_mask_dump(records, path):
    """``records``: iterable of ``(doc_id, policy_name, d)``."""
    with open(path, "w", encoding="utf-8") as f:
        for doc_id, policy_name, d in records:
            f.write(json.dumps({"doc_id": doc_id, "policy_name": policy_name,
                                "d": [int(v) for v in d]}))
            f.write("\n")


def load_mask_dump(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out.append((rec["doc_id"], rec["policy_name"], as_decisions(rec["d"])))
    return out
