"""Synthetic "micro-wiki": annotated documents plus closed-book QA triplets.

Each person entity has a birth fact (date + city) and optionally a creation
fact (work + date), rendered as template sentences mixed with Zipfian filler
sentences. Questions about a person are answerable only from the documents
that mention them, so splitting persons into fine-tune train/test sets gives
a closed-book evaluation whose test answers live in the pre-train corpus.
"""
import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from . import tokens
from .diffcore import RngStream
from .errors import ContractViolation, CorpusFormatError, GenerationError, TargetNotInContext

POS_TAGS = ("PROPN", "NOUN", "VERB", "NUM", "ADP", "DET", "ADJ", "PRON", "CCONJ", "PUNCT")
ENTITY_KINDS = ("PERSON", "CITY", "DATE", "WORK", "NUMBER")

_TEMPLATE_WORDS = {
    "was": "VERB", "born": "VERB", "on": "ADP", "in": "ADP", "created": "VERB",
    ".": "PUNCT", "?": "PUNCT", "when": "PRON", "where": "PRON", "what": "PRON",
    "did": "VERB", "create": "VERB",
}
# share of the filler vocabulary carrying each tag
_FILLER_TAGS = [("NOUN", 0.35), ("VERB", 0.2), ("ADJ", 0.15), ("ADP", 0.1),
                ("DET", 0.08), ("PRON", 0.07), ("CCONJ", 0.05)]
_ONSETS = "b c d f g h j k l m n p r s t v z br dr gr kl pl st tr sh ch".split()
_VOWELS = "a e i o u ai ea io ou".split()
_CODAS = ["", "", "n", "r", "l", "s", "th", "m", "x"]


@dataclass
class CorpusConfig:
    n_entities: int = 200
    n_documents: int = 5000
    min_sentences: int = 1
    max_sentences: int = 5
    zipf_exponent: float = 1.0
    subword_rate: float = 0.3
    finetune_entity_fraction: float = 0.5
    seed: int = 0
    n_filler: int = 150
    n_cities: int = 25
    n_years: int = 50
    n_numbers: int = 20
    work_rate: float = 1.0
    fact_rate: float = 0.5
    number_rate: float = 0.2
    filler_min_len: int = 4
    filler_max_len: int = 8

    def validate(self):
        for name in ("subword_rate", "finetune_entity_fraction", "work_rate", "fact_rate", "number_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ContractViolation(f"{name} must be in [0, 1], got {v}")
        for name in ("n_entities", "n_documents", "min_sentences", "max_sentences", "n_filler",
                     "n_cities", "n_years", "n_numbers", "filler_min_len"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        if self.max_sentences < self.min_sentences or self.filler_max_len < self.filler_min_len:
            raise ContractViolation("max bounds must not be below min bounds")
        if self.zipf_exponent <= 0:
            raise ContractViolation("zipf_exponent must be positive")

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractViolation(f"unknown corpus config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Document:
    doc_id: str
    tokens: List[int]
    word_ids: List[int]
    pos: List[str]
    entities: List[Tuple[int, int, str]]
    sent_bounds: List[int]

    def __len__(self):
        return len(self.tokens)

    def validate(self):
        n = len(self.tokens)
        if len(self.word_ids) != n or len(self.pos) != n:
            raise ContractViolation(f"{self.doc_id}: tokens/word_ids/pos lengths differ")
        if any(t < 0 for t in self.tokens):
            raise ContractViolation(f"{self.doc_id}: negative token id")
        if any(b < a for a, b in zip(self.word_ids, self.word_ids[1:])):
            raise ContractViolation(f"{self.doc_id}: word ids must be non-decreasing")
        bad = [p for p in self.pos if p not in POS_TAGS]
        if bad:
            raise ContractViolation(f"{self.doc_id}: unknown POS tag {bad[0]!r}")
        prev_end = 0
        for start, end, kind in sorted(self.entities):
            if kind not in ENTITY_KINDS:
                raise ContractViolation(f"{self.doc_id}: unknown entity kind {kind!r}")
            if not 0 <= start < end <= n:
                raise ContractViolation(f"{self.doc_id}: entity span ({start}, {end}) out of bounds")
            if start < prev_end:
                raise ContractViolation(f"{self.doc_id}: overlapping entity spans at {start}")
            if (start > 0 and self.word_ids[start - 1] == self.word_ids[start]) or \
                    (end < n and self.word_ids[end] == self.word_ids[end - 1]):
                raise ContractViolation(f"{self.doc_id}: entity ({start}, {end}) splits a word")
            if any(self.pos[i] not in ("PROPN", "NUM") for i in range(start, end)):
                raise ContractViolation(f"{self.doc_id}: entity token without PROPN/NUM tag")
            prev_end = end
        sb = self.sent_bounds
        if n and (not sb or sb[0] != 0):
            raise ContractViolation(f"{self.doc_id}: sent_bounds must start at 0")
        if any(b <= a for a, b in zip(sb, sb[1:])) or (sb and sb[-1] >= max(n, 1)):
            raise ContractViolation(f"{self.doc_id}: sent_bounds must increase strictly within the doc")
        return self

    def sentences(self):
        """``(start, end)`` pairs for every sentence."""
        ends = list(self.sent_bounds[1:]) + [len(self.tokens)]
        return list(zip(self.sent_bounds, ends))


@dataclass
class Triplet:
    context: List[int]
    source: List[int]
    target: List[int]
    entity_key: str
    doc_id: Optional[str] = None

    def validate(self):
        if not self.target:
            raise ContractViolation("empty target")
        find_span(self.context, self.target)
        return self


class EntitySplit(NamedTuple):
    train: List[str]
    test: List[str]


class Corpus(NamedTuple):
    documents: List[Document]
    triplets: List[Triplet]
    vocab: "Vocab"
    entity_split: EntitySplit


def find_span(context, target):
    """Start index of the first occurrence of ``target`` inside ``context``."""
    m, n = len(target), len(context)
    if m == 0:
        raise TargetNotInContext("empty target")
    first = target[0]
    for i in range(n - m + 1):
        if context[i] == first and list(context[i:i + m]) == list(target):
            return i
    raise TargetNotInContext("target does not occur in context")


class Vocab:
    """Token surfaces plus a coarse kind and POS tag per token type."""

    def __init__(self):
        self.surfaces, self.kinds, self.pos = [], [], []
        self.index = {}
        for s in tokens.SPECIAL_SURFACES:
            self.add(s, "special", "PUNCT")

    def add(self, surface, kind, pos):
        if surface in self.index:
            raise GenerationError(f"duplicate surface {surface!r}")
        self.index[surface] = len(self.surfaces)
        self.surfaces.append(surface)
        self.kinds.append(kind)
        self.pos.append(pos)
        return self.index[surface]

    def __len__(self):
        return len(self.surfaces)

    def __getitem__(self, surface):
        return self.index[surface]

    def ids_of_kind(self, kind):
        return [i for i, k in enumerate(self.kinds) if k == kind]

    def decode(self, ids):
        return [self.surfaces[i] for i in ids]

    def detokenize(self, ids):
        """Join surfaces with spaces, gluing ``##`` continuation pieces."""
        return " ".join(self.decode(ids)).replace(" ##", "")

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.surfaces, f, ensure_ascii=False)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            surfaces = json.load(f)
        v = cls.__new__(cls)
        v.surfaces = list(surfaces)
        v.index = {s: i for i, s in enumerate(v.surfaces)}
        v.kinds = ["special" if i < len(tokens.SPECIAL_SURFACES) else "unknown" for i in range(len(v.surfaces))]
        v.pos = [None] * len(v.surfaces)
        return v


# -- generation --------------------------------------------------------------

class _Words:
    """Unique pronounceable pseudo-words."""

    def __init__(self, stream):
        self.stream = stream
        self.used = set()

    def syllable(self):
        r = self.stream
        return _ONSETS[r.integers(len(_ONSETS))] + _VOWELS[r.integers(len(_VOWELS))] + \
            _CODAS[r.integers(len(_CODAS))]

    def new(self, n_syll=2):
        for _ in range(1000):
            w = "".join(self.syllable() for _ in range(n_syll))
            if w not in self.used:
                self.used.add(w)
                return w
        raise GenerationError("ran out of distinct pseudo-words")


def _name_pieces(words, stream, subword_rate, n_syll=2):
    """Surface pieces for one entity name: a single token or two subwords."""
    if stream.uniform() < subword_rate:
        a, b = words.new(n_syll), words.new(n_syll)
        return [a.capitalize(), "##" + b]
    return [words.new(n_syll).capitalize()]


class _Sentence:
    __slots__ = ("tokens", "word_lens", "entities")

    def __init__(self):
        self.tokens, self.word_lens, self.entities = [], [], []

    def word(self, ids):
        self.tokens.extend(ids)
        self.word_lens.append(len(ids))

    def entity(self, ids, kind):
        start = len(self.tokens)
        self.word(ids)
        self.entities.append((start, start + len(ids), kind))


def generate_corpus(config):
    """Generate ``(documents, triplets, vocab, entity_split)``; pure in ``config``."""
    cfg = config
    cfg.validate()
    if cfg.n_documents < cfg.n_entities:
        raise GenerationError(
            f"{cfg.n_documents} documents cannot state the facts of {cfg.n_entities} entities")
    root = RngStream(cfg.seed, "corpus")
    words = _Words(root.child("words"))
    vocab = Vocab()
    for w, tag in _TEMPLATE_WORDS.items():
        vocab.add(w, "template", tag)

    # filler vocabulary, ranked by Zipf weight; tags spread over ranks at random
    tag_pool = []
    for tag, share in _FILLER_TAGS:
        tag_pool += [tag] * int(round(share * cfg.n_filler))
    tag_pool = (tag_pool + ["NOUN"] * cfg.n_filler)[:cfg.n_filler]
    tag_order = root.child("filler-tags").permutation(cfg.n_filler)
    filler_ids = []
    for r in range(cfg.n_filler):
        filler_ids.append(vocab.add(words.new(2 if r < 40 else 3), "filler", tag_pool[tag_order[r]]))
    filler_ids = np.array(filler_ids)
    zipf_p = 1.0 / np.arange(1, cfg.n_filler + 1) ** cfg.zipf_exponent
    zipf_cdf = np.cumsum(zipf_p / zipf_p.sum())

    names = root.child("names")

    def add_name(kind, tag):
        pieces = _name_pieces(words, names, cfg.subword_rate)
        return [vocab.add(p, kind, tag) for p in pieces]

    cities = [add_name("city", "PROPN") for _ in range(cfg.n_cities)]
    years = [[vocab.add(str(1900 + i), "year", "NUM")] for i in range(cfg.n_years)]
    numbers = [[vocab.add(str(i + 2), "number", "NUM")] for i in range(cfg.n_numbers)]

    fact_rng = root.child("facts")
    persons = []
    for i in range(cfg.n_entities):
        person = {"key": f"person:{i}", "name": add_name("person", "PROPN"),
                  "birth_year": years[fact_rng.integers(cfg.n_years)],
                  "birth_city": cities[fact_rng.integers(cfg.n_cities)]}
        if fact_rng.uniform() < cfg.work_rate:
            person["work"] = add_name("work", "PROPN")
            person["work_year"] = years[fact_rng.integers(cfg.n_years)]
        persons.append(person)

    def w(s):
        return [vocab[s]]

    def birth_sentence(p):
        s = _Sentence()
        s.entity(p["name"], "PERSON")
        s.word(w("was")), s.word(w("born")), s.word(w("on"))
        s.entity(p["birth_year"], "DATE")
        s.word(w("in"))
        s.entity(p["birth_city"], "CITY")
        s.word(w("."))
        return s

    def work_sentence(p):
        s = _Sentence()
        s.entity(p["name"], "PERSON")
        s.word(w("created"))
        s.entity(p["work"], "WORK")
        s.word(w("in"))
        s.entity(p["work_year"], "DATE")
        s.word(w("."))
        return s

    filler_rng = root.child("filler")

    def filler_sentence():
        s = _Sentence()
        n = cfg.filler_min_len + filler_rng.integers(cfg.filler_max_len - cfg.filler_min_len + 1)
        draws = np.searchsorted(zipf_cdf, filler_rng.uniform(n), side="right")
        draws = np.minimum(draws, cfg.n_filler - 1)
        num_at = filler_rng.integers(n) if filler_rng.uniform() < cfg.number_rate else -1
        for k, r in enumerate(draws):
            if k == num_at:
                s.entity(numbers[filler_rng.integers(cfg.n_numbers)], "NUMBER")
            else:
                s.word([int(filler_ids[r])])
        s.word(w("."))
        return s

    doc_rng = root.child("documents")
    order = doc_rng.permutation(cfg.n_entities)
    documents = []
    first_doc = {}
    for k in range(cfg.n_documents):
        person = persons[order[k % cfg.n_entities]]
        facts = [birth_sentence] + ([work_sentence] if "work" in person else [])
        n_sent = cfg.min_sentences + doc_rng.integers(cfg.max_sentences - cfg.min_sentences + 1)
        if k < cfg.n_entities:
            chosen = facts  # first mention states every fact
        else:
            chosen = [f for f in facts if doc_rng.uniform() < cfg.fact_rate] or \
                [facts[doc_rng.integers(len(facts))]]
        n_sent = max(n_sent, len(chosen))
        sents = [f(person) for f in chosen] + [filler_sentence() for _ in range(n_sent - len(chosen))]
        sents = [sents[i] for i in doc_rng.permutation(len(sents))]
        documents.append(_assemble(f"doc{k:06d}", sents, vocab))
        first_doc.setdefault(person["key"], documents[-1])

    triplets = []
    for person in persons:
        doc = first_doc[person["key"]]
        name = person["name"]
        qa = [(w("when") + w("was") + name + w("born") + w("?"), person["birth_year"]),
              (w("where") + w("was") + name + w("born") + w("?"), person["birth_city"])]
        if "work" in person:
            qa.append((w("what") + w("did") + name + w("create") + w("?"), person["work"]))
            qa.append((w("when") + w("did") + name + w("create") + person["work"] + w("?"),
                       person["work_year"]))
        for s, t in qa:
            triplets.append(Triplet(list(doc.tokens), s, list(t), person["key"], doc.doc_id))

    split_order = root.child("split").permutation(cfg.n_entities)
    n_train = int(math.floor(cfg.finetune_entity_fraction * cfg.n_entities + 0.5))
    train = sorted((persons[i]["key"] for i in split_order[:n_train]), key=_key_order)
    test = sorted((persons[i]["key"] for i in split_order[n_train:]), key=_key_order)
    return Corpus(documents, triplets, vocab, EntitySplit(train, test))


def _key_order(key):
    kind, _, num = key.partition(":")
    return (kind, int(num) if num.isdigit() else num)


def _assemble(doc_id, sents, vocab):
    toks, wids, pos, ents, bounds = [], [], [], [], []
    next_word = 0
    for s in sents:
        bounds.append(len(toks))
        offset = len(toks)
        for n in s.word_lens:
            wids.extend([next_word] * n)
            next_word += 1
        toks.extend(s.tokens)
        ents.extend((a + offset, b + offset, kind) for a, b, kind in s.entities)
    pos = [vocab.pos[t] for t in toks]
    return Document(doc_id, toks, wids, pos, ents, bounds)


def split_triplets(triplets, entity_split):
    """``(train, test)`` triplets by the entity they are about."""
    train_keys, test_keys = set(entity_split.train), set(entity_split.test)
    train = [t for t in triplets if t.entity_key in train_keys]
    test = [t for t in triplets if t.entity_key in test_keys]
    return train, test


def planted_span_triplets(n, seed=0, n_background=100, n_answer=40, min_len=8, max_len=20,
                          max_span=3, label="planted"):
    """Triplets whose context holds exactly one run of "answer" tokens.

    Background ids are ``4 .. 4+n_background-1``; answer ids follow them. The
    target is the planted run, so span extraction is fully determined.
    """
    r = RngStream(seed, label)
    lo_ans = len(tokens.SPECIAL_SURFACES) + n_background
    out = []
    for _ in range(n):
        L = min_len + r.integers(max_len - min_len + 1)
        span = 1 + r.integers(max_span)
        start = r.integers(L - span + 1)
        ctx = list(len(tokens.SPECIAL_SURFACES) + r.integers(n_background, L))
        ans = list(lo_ans + r.integers(n_answer, span))
        ctx[start:start + span] = ans
        out.append(Triplet([int(c) for c in ctx], [int(ctx[0])], [int(a) for a in ans],
                           f"planted:{len(out)}"))
    return out


# -- statistics --------------------------------------------------------------

def freq_rank(documents):
    """``{token: (count, rank)}``; rank 1 is most frequent, ties by token id."""
    counts = Counter()
    for d in documents:
        counts.update(d.tokens)
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return {tok: (c, r) for r, (tok, c) in enumerate(ordered, start=1)}


# -- JSONL -------------------------------------------------------------------

def _doc_record(d, vocab):
    rec = {"doc_id": d.doc_id, "tokens": list(map(int, d.tokens)),
           "word_ids": list(map(int, d.word_ids)), "pos": list(d.pos),
           "entities": [[int(a), int(b), k] for a, b, k in d.entities],
           "sent_bounds": list(map(int, d.sent_bounds))}
    if vocab is not None:
        rec["surface"] = vocab.decode(d.tokens)
    return rec


def _triplet_record(t, vocab):
    rec = {"context": list(map(int, t.context)), "source": list(map(int, t.source)),
           "target": list(map(int, t.target)), "entity_key": t.entity_key}
    if t.doc_id is not None:
        rec["doc_id"] = t.doc_id
    if vocab is not None:
        rec["surface"] = vocab.decode(t.context)
        rec["source_surface"] = vocab.decode(t.source)
        rec["target_surface"] = vocab.decode(t.target)
    return rec


def save_jsonl(items, path, vocab=None):
    """One JSON object per line; ``surface`` arrays added when a vocab is given."""
    with open(path, "w", encoding="utf-8") as f:
        for it in items:
            rec = _doc_record(it, vocab) if isinstance(it, Document) else _triplet_record(it, vocab)
            f.write(json.dumps(rec, ensure_ascii=False))
            f.write("\n")


def _parse_record(rec):
    if "tokens" in rec:
        d = Document(rec["doc_id"], list(rec["tokens"]), list(rec["word_ids"]), list(rec["pos"]),
                     [(int(a), int(b), str(k)) for a, b, k in rec["entities"]],
                     list(rec["sent_bounds"]))
        return d.validate()
    if "context" in rec:
        t = Triplet(list(rec["context"]), list(rec["source"]), list(rec["target"]),
                    str(rec["entity_key"]), rec.get("doc_id"))
        return t.validate()
    raise ValueError("record is neither a document nor a triplet")


def load_jsonl(path):
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(_parse_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise CorpusFormatError(str(e), lineno) from None
    return out
