"""A walk through the synthetic corpus and what each heuristic policy hides.

Run with ``python3 demos/01_corpus_and_masks.py``; takes a few seconds.
"""
import numpy as np

from masklab.corpus import CorpusConfig, generate_corpus
from masklab.diffcore import RngStream
from masklab.masking import apply_mask, heuristic_policy

c = generate_corpus(CorpusConfig(n_entities=20, n_documents=200, max_sentences=3, seed=0))
print(len(c.documents), "documents,", len(c.triplets), "triplets,", len(c.vocab), "vocabulary entries")

doc = c.documents[0]
print("\n", c.vocab.detokenize(doc.tokens))
print(" entity spans:", [(s, e, kind, c.vocab.detokenize(doc.tokens[s:e])) for s, e, kind in doc.entities])

# a triplet is (context, question, answer); the context is the source document
t = c.triplets[0]
print("\n Q:", c.vocab.detokenize(t.source), " A:", c.vocab.detokenize(t.target))

# same document under every heuristic, one shared stream per policy
for name in ("rand", "orig", "ssm", "mask-first-sent", "mask-random-sent"):
    pol = heuristic_policy(name)
    d = pol.decisions([doc], RngStream(0, name))[0]
    masked = apply_mask(doc.tokens, d, infill=pol.infill)
    print(f"\n{name:>17s} ({d.mean():.0%} masked):", c.vocab.detokenize(masked))

# rate check: random masking hides exactly round(0.15 * n) tokens per doc
pol = heuristic_policy("rand")
ds = pol.decisions(c.documents, RngStream(1, "rate"))
rates = np.array([d.mean() for d in ds])
print(f"\nrand mask rate over {len(ds)} docs: mean {rates.mean():.3f}, min {rates.min():.3f}, max {rates.max():.3f}")
