"""What policies mask: POS-tag mix of masked tokens and mask frequency vs. corpus frequency."""
import csv
from collections import Counter
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np
from scipy import stats

from .corpus import freq_rank
from .errors import ContractViolation, EmptySample
from .masking import as_decisions, exact_product, round_half_up


@dataclass
class MaskSample:
    policy_name: str
    items: List[Tuple[str, np.ndarray]]  # (doc_id, decisions)

    def validate(self, documents):
        by_id = _index(documents)
        for doc_id, d in self.items:
            if doc_id not in by_id:
                raise ContractViolation(f"unknown document {doc_id!r}")
            as_decisions(d, len(by_id[doc_id].tokens))
        return self


def _index(documents):
    return {d.doc_id: d for d in documents}


def sample_corpus(documents, fraction=0.01, stream=None):
    """Uniform subset without replacement of ``round(fraction * N)`` docs (at least 1)."""
    if not 0.0 < fraction <= 1.0:
        raise ContractViolation(f"fraction must lie in (0, 1], got {fraction}")
    n = len(documents)
    if fraction == 1.0:
        return list(documents)
    k = max(1, round_half_up(exact_product(fraction, n)))
    return [documents[i] for i in sorted(stream.choice(n, k))]


def mask_sample(policy, documents, stream):
    ds = policy.decisions(documents, stream)
    return MaskSample(policy.name, [(doc.doc_id, d) for doc, d in zip(documents, ds)])


def _masked(sample, documents, attr):
    by_id = _index(documents)
    out = Counter()
    for doc_id, d in sample.items:
        values = getattr(by_id[doc_id], attr)
        d = as_decisions(d, len(values))
        out.update(values[i] for i in np.flatnonzero(d))
    if not out:
        raise EmptySample(f"{sample.policy_name}: no masked tokens in sample")
    return out


def _normalize(counts):
    total = sum(counts.values())
    return {k: counts[k] / total for k in sorted(counts)}


def pos_mask_distribution(sample, documents):
    """``{tag: fraction of masked tokens carrying tag}``."""
    return _normalize(_masked(sample, documents, "pos"))


def corpus_pos_distribution(documents):
    counts = Counter()
    for d in documents:
        counts.update(d.pos)
    return _normalize(counts)


def mask_frequency(sample, documents):
    """``{token: times masked / all masked}``."""
    return _normalize(_masked(sample, documents, "tokens"))


def tv_distance(p, q):
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def zipf_table(ranks, mask_freq, vocab=None):
    """Rows ``(rank, surface, corpus count, mask fraction)`` by rank; unmasked tokens get 0."""
    rows = []
    for tok, (count, rank) in sorted(ranks.items(), key=lambda kv: kv[1][1]):
        surface = vocab.surfaces[tok] if vocab is not None else str(tok)
        rows.append((rank, surface, count, mask_freq.get(tok, 0.0)))
    return rows


def zipf_spearman(rows):
    counts = [r[2] for r in rows]
    fracs = [r[3] for r in rows]
    return float(stats.spearmanr(counts, fracs)[0])


def zipf_for(sample, documents, vocab=None):
    return zipf_table(freq_rank(documents), mask_frequency(sample, documents), vocab)


def _fmt(x):
    return format(float(x), ".12g")


def write_pos_csv(dist, path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["tag", "fraction"])
        for tag in sorted(dist):
            w.writerow([tag, _fmt(dist[tag])])


def write_zipf_csv(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["rank", "token", "corpus_count", "mask_fraction"])
        for rank, surface, count, frac in rows:
            w.writerow([rank, surface, count, _fmt(frac)])
