import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from masklab.corpus import (CorpusConfig, Document, Triplet, find_span, freq_rank,
                            generate_corpus, load_jsonl, planted_span_triplets, save_jsonl,
                            split_triplets)
from masklab.errors import ContractViolation, CorpusFormatError, GenerationError


SMALL = dict(n_entities=12, n_documents=60, max_sentences=3, seed=3)


@pytest.fixture(scope="module")
def small():
    return generate_corpus(CorpusConfig(**SMALL))


def test_full_train_fraction_leaves_no_test_entities():
    c = generate_corpus(CorpusConfig(**{**SMALL, "finetune_entity_fraction": 1.0}))
    assert c.entity_split.test == []
    assert len(c.entity_split.train) == SMALL["n_entities"]


def test_every_target_occurs_in_its_context(small):
    for t in small.triplets:
        i = find_span(t.context, t.target)
        assert t.context[i:i + len(t.target)] == t.target


def test_triplet_context_is_the_source_document(small):
    by_id = {d.doc_id: d for d in small.documents}
    for t in small.triplets:
        assert by_id[t.doc_id].tokens == t.context


@pytest.mark.parametrize("exponent", [0.8, 1.0, 1.2])
def test_filler_frequencies_follow_power_law(exponent):
    # enough documents for at least 1e5 filler tokens; regress on the first 1e5
    c = generate_corpus(CorpusConfig(n_entities=50, n_documents=5000, min_sentences=4,
                                     max_sentences=6, zipf_exponent=exponent, seed=1))
    filler = set(c.vocab.ids_of_kind("filler"))
    stream = [t for d in c.documents for t in d.tokens if t in filler]
    assert len(stream) >= 100_000
    counts = np.array(sorted(Counter(stream[:100_000]).values(), reverse=True), dtype=float)
    ranks = np.arange(1, counts.size + 1)
    slope = np.polyfit(np.log(ranks), np.log(counts), 1)[0]
    assert abs(slope + exponent) <= 0.15


def test_jsonl_round_trip_empty(tmp_path):
    p = tmp_path / "empty.jsonl"
    save_jsonl([], p)
    assert p.read_text() == ""
    assert load_jsonl(p) == []


def test_jsonl_round_trip_documents_and_triplets(tmp_path, small):
    p = tmp_path / "docs.jsonl"
    save_jsonl(small.documents[:5], p, small.vocab)
    assert load_jsonl(p) == small.documents[:5]
    rec = json.loads(p.read_text().splitlines()[0])
    assert rec["surface"] == small.vocab.decode(small.documents[0].tokens)
    q = tmp_path / "trip.jsonl"
    save_jsonl(small.triplets, q, small.vocab)
    assert load_jsonl(q) == small.triplets


def test_overlapping_entities_rejected_with_line_number(tmp_path, small):
    good = small.documents[0]
    bad = Document("bad", [10, 11, 12], [0, 1, 2], ["PROPN", "PROPN", "PROPN"],
                   [(0, 2, "PERSON"), (1, 3, "CITY")], [0])
    p = tmp_path / "bad.jsonl"
    save_jsonl([good, good, bad], p)
    with pytest.raises(CorpusFormatError) as e:
        load_jsonl(p)
    assert e.value.line == 3
    assert "line 3" in str(e.value)


def test_malformed_json_line(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text('{"context": [1], "source": [1], "target": [1], "entity_key": "k"}\n{oops\n')
    with pytest.raises(CorpusFormatError) as e:
        load_jsonl(p)
    assert e.value.line == 2


def test_triplet_target_must_be_in_context(tmp_path):
    p = tmp_path / "t.jsonl"
    save_jsonl([Triplet([1, 2, 3], [4], [3, 2], "k")], p)
    with pytest.raises(CorpusFormatError):
        load_jsonl(p)


def test_freq_rank_single_token():
    d = Document("a", [7, 7, 7], [0, 1, 2], ["NOUN"] * 3, [], [0])
    assert freq_rank([d]) == {7: (3, 1)}


def test_freq_rank_ties_by_token_id():
    d = Document("a", [9, 5, 9, 5, 4], [0, 1, 2, 3, 4], ["NOUN"] * 5, [], [0])
    fr = freq_rank([d])
    assert fr[5] == (2, 1) and fr[9] == (2, 2) and fr[4] == (1, 3)


def test_freq_rank_conserves_counts(small):
    fr = freq_rank(small.documents)
    assert sum(c for c, _ in fr.values()) == sum(len(d.tokens) for d in small.documents)
    assert sorted(r for _, r in fr.values()) == list(range(1, len(fr) + 1))


def test_generation_is_deterministic():
    a = generate_corpus(CorpusConfig(**SMALL))
    b = generate_corpus(CorpusConfig(**SMALL))
    assert a.documents == b.documents and a.triplets == b.triplets
    assert a.vocab.surfaces == b.vocab.surfaces and a.entity_split == b.entity_split
    c = generate_corpus(CorpusConfig(**{**SMALL, "seed": 4}))
    assert c.documents != a.documents


def test_entity_split_is_partition(small):
    train, test = set(small.entity_split.train), set(small.entity_split.test)
    keys = {t.entity_key for t in small.triplets}
    assert train | test == keys and not train & test
    tr, te = split_triplets(small.triplets, small.entity_split)
    assert len(tr) + len(te) == len(small.triplets)


def test_subword_entities_share_word_id(small):
    multi = [(d, a, b) for d in small.documents for a, b, _ in d.entities if b - a > 1]
    assert multi
    for d, a, b in multi:
        assert len(set(d.word_ids[a:b])) == 1


def test_too_few_documents_is_generation_error():
    with pytest.raises(GenerationError):
        generate_corpus(CorpusConfig(n_entities=50, n_documents=10))


def test_bad_config_rejected():
    with pytest.raises(ContractViolation):
        generate_corpus(CorpusConfig(subword_rate=1.5))
    with pytest.raises(ContractViolation):
        CorpusConfig.from_dict({"n_entitys": 3})


def test_planted_triplets_hold_their_span():
    for t in planted_span_triplets(200, seed=5):
        assert len(t.target) <= 3
        t.validate()


@settings(max_examples=1000, deadline=None)
@given(n_entities=st.integers(1, 6), extra_docs=st.integers(0, 10),
       lo=st.integers(1, 3), span=st.integers(0, 3),
       subword=st.floats(0, 1), frac=st.floats(0, 1), seed=st.integers(0, 2**32))
def test_generated_documents_satisfy_invariants(n_entities, extra_docs, lo, span, subword, frac, seed):
    cfg = CorpusConfig(n_entities=n_entities, n_documents=n_entities + extra_docs,
                       min_sentences=lo, max_sentences=lo + span, subword_rate=subword,
                       finetune_entity_fraction=frac, seed=seed, n_filler=30)
    c = generate_corpus(cfg)
    for d in c.documents:
        d.validate()
    for t in c.triplets:
        t.validate()
    assert len(c.entity_split.train) + len(c.entity_split.test) == n_entities
