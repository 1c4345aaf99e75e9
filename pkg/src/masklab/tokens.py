"""Reserved token ids shared by the corpus, the LM and the policies."""
PAD = 0
BOS = 1
EOS = 2
MASK = 3

SPECIAL_SURFACES = ["<pad>", "<s>", "</s>", "<mask>"]
