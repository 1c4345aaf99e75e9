"""Which tokens does each policy mask?  POS mix and a frequency-rank comparison.

Random masking should look like the corpus itself; salient-span masking
concentrates on the rare names and numbers that answer questions.
"""
from masklab.analysis import (corpus_pos_distribution, mask_sample, pos_mask_distribution,
                              tv_distance, zipf_for, zipf_spearman)
from masklab.corpus import CorpusConfig, generate_corpus
from masklab.diffcore import RngStream
from masklab.masking import heuristic_policy

c = generate_corpus(CorpusConfig(n_entities=60, n_documents=1500, max_sentences=3, seed=0))
corpus_pos = corpus_pos_distribution(c.documents)
print("corpus POS:", {k: round(v, 3) for k, v in sorted(corpus_pos.items())})

# every document is masked once; a single pass masks only a few thousand tokens,
# so the random-policy rank correlation here is noisier than with more passes
for name in ("rand", "orig", "ssm", "mask-random-sent"):
    sample = mask_sample(heuristic_policy(name), c.documents, RngStream(0, name))
    pos = pos_mask_distribution(sample, c.documents)
    rows = zipf_for(sample, c.documents, c.vocab)
    print(f"\n{name}")
    print("  masked POS:", {k: round(v, 3) for k, v in sorted(pos.items())})
    print(f"  TV to corpus {tv_distance(pos, corpus_pos):.3f}   Zipf Spearman {zipf_spearman(rows):.3f}")
    print("  most frequent masked tokens:",
          [r[1] for r in sorted(rows, key=lambda r: -r[3])[:8]])
