from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from masklab import tokens
from masklab.corpus import CorpusConfig, Document, generate_corpus
from masklab.diffcore import RngStream
from masklab.errors import ContractViolation, NoSalientSpan
from masklab.masking import (TargetMode, apply_mask, build_target, heuristic_policy,
                             load_mask_dump, make_pair, policy_orig, policy_rand, policy_sentence,
                             policy_ssm, postprocess, save_mask_dump, whole_word)

M = tokens.MASK
A, B, C, D = 10, 11, 12, 13


def doc(n_tokens, entities=(), sent_bounds=(0,), word_ids=None):
    pos = ["NOUN"] * n_tokens
    for a, b, _ in entities:
        pos[a:b] = ["PROPN"] * (b - a)
    return Document("d", list(range(20, 20 + n_tokens)),
                    list(word_ids) if word_ids is not None else list(range(n_tokens)),
                    pos, list(entities), list(sent_bounds)).validate()


# -- apply_mask / build_target -----------------------------------------------

def test_apply_mask_identity():
    assert apply_mask([A, B, C, D], [0, 0, 0, 0]) == [A, B, C, D]
    assert apply_mask([A, B, C, D], [0, 0, 0, 0], infill=True) == [A, B, C, D]


def test_apply_mask_infill_collapses_run():
    assert apply_mask([A, B, C, D], [0, 1, 1, 0], infill=True) == [A, M, D]


def test_apply_mask_without_infill():
    assert apply_mask([A, B, C, D], [0, 1, 1, 0]) == [A, M, M, D]


def test_apply_mask_length_mismatch():
    with pytest.raises(ContractViolation):
        apply_mask([A, B], [1])


def test_build_target_modes():
    assert build_target([A, B, C], [0, 1, 0], TargetMode.FULL) == [A, B, C]
    assert build_target([A, B, C], [0, 1, 1], TargetMode.MASKED) == [B, C]
    assert build_target([A, B, C], [0, 0, 0], TargetMode.MASKED) == []


def test_degenerate_pair_is_skipped():
    assert make_pair([A, B, C], [0, 0, 0], TargetMode.MASKED) is None
    pair = make_pair([A, B, C], [0, 0, 0], TargetMode.FULL)
    assert pair.x_tar == [A, B, C]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(4, 50), st.integers(0, 1)), min_size=1, max_size=30))
def test_apply_mask_keeps_unmasked_tokens(pairs):
    x = [p[0] for p in pairs]
    d = [p[1] for p in pairs]
    out = apply_mask(x, d)
    assert len(out) == len(x)
    for tok, m, o in zip(x, d, out):
        assert o == (M if m else tok)
    filled = apply_mask(x, d, infill=True)
    assert [t for t in filled if t != M] == [t for t, m in zip(x, d) if not m]
    assert not any(a == b == M for a, b in zip(filled, filled[1:]))


# -- rand --------------------------------------------------------------------

def test_rand_exact_count():
    s = RngStream(0, "rand")
    assert policy_rand(list(range(100)), s).sum() == 15
    assert policy_rand(list(range(3)), s).sum() == 1


def test_rand_positions_uniform():
    s = RngStream(1, "rand")
    freq = np.zeros(20)
    n = 100_000
    for _ in range(n):
        freq += policy_rand(list(range(20)), s)
    assert np.all(np.abs(freq / n - 0.15) <= 0.01)


def test_rand_masked_types_match_unigram():
    c = generate_corpus(CorpusConfig(seed=2))
    unigram = Counter(t for d in c.documents for t in d.tokens)
    total = sum(unigram.values())
    s = RngStream(2, "rand-tv")
    masked = Counter()
    n_masked = 0
    while n_masked < 1_000_000:
        for d in c.documents:
            m = policy_rand(d.tokens, s)
            toks = np.asarray(d.tokens)[m == 1]
            masked.update(toks.tolist())
            n_masked += toks.size
    tv = 0.5 * sum(abs(masked[t] / n_masked - unigram[t] / total) for t in unigram)
    assert tv <= 0.02


# -- orig --------------------------------------------------------------------

def test_orig_coverage_bounds():
    s = RngStream(0, "orig")
    x = list(range(128))
    for _ in range(1000):
        frac = policy_orig(x, s).sum() / 128
        assert 0.15 <= frac <= 0.15 + 8 / 128


def test_orig_replays_per_stream():
    x = list(range(50))
    assert np.array_equal(policy_orig(x, RngStream(5, "o")), policy_orig(x, RngStream(5, "o")))


def test_orig_policy_uses_full_target_and_infill():
    p = heuristic_policy("orig")
    assert p.target_mode is TargetMode.FULL and p.infill


# -- ssm ---------------------------------------------------------------------

def test_ssm_single_entity_is_deterministic():
    dd = doc(6, [(2, 4, "CITY")])
    for seed in range(5):
        assert policy_ssm(dd, RngStream(seed, "ssm")).tolist() == [0, 0, 1, 1, 0, 0]


def test_ssm_picks_entities_uniformly():
    dd = doc(8, [(0, 1, "PERSON"), (4, 7, "DATE")])
    s = RngStream(0, "ssm")
    first = 0
    n = 10_000
    for _ in range(n):
        m = policy_ssm(dd, s)
        assert m.sum() in (1, 3)
        first += m[0]
    assert abs(first / n - 0.5) <= 0.02


def test_ssm_without_entities():
    with pytest.raises(NoSalientSpan):
        policy_ssm(doc(5), RngStream(0, "ssm"))
    p = heuristic_policy("ssm")
    d = p.decisions([doc(5)], RngStream(0, "ssm"))[0]
    assert d.sum() == 1  # random fallback, one token for a short doc


# -- sentences ---------------------------------------------------------------

def test_single_sentence_fully_masked():
    dd = doc(5)
    for mode in ("First", "Random"):
        assert policy_sentence(dd, RngStream(0, "s"), mode).tolist() == [1] * 5


def test_first_sentences():
    dd = doc(20, sent_bounds=range(0, 20, 2))
    d = policy_sentence(dd, RngStream(0, "s"), "First")
    assert d.tolist() == [1] * 6 + [0] * 14


def test_random_sentences_uniform():
    dd = doc(10, sent_bounds=range(10))
    s = RngStream(0, "s")
    freq = np.zeros(10)
    n = 10_000
    for _ in range(n):
        d = policy_sentence(dd, s, "Random")
        assert d.sum() == 3
        freq += d
    assert np.all(np.abs(freq / n - 0.30) <= 0.02)


# -- postprocess -------------------------------------------------------------

def test_whole_word_expansion():
    assert postprocess([1, 0, 0], [0, 0, 1], RngStream(0, "p")).tolist() == [1, 1, 0]
    assert whole_word([0, 1, 0, 0], [0, 0, 1, 1]).tolist() == [1, 1, 0, 0]


def test_postprocess_zero_unchanged():
    assert postprocess([0, 0, 0, 0], [0, 1, 1, 2], RngStream(0, "p")).tolist() == [0, 0, 0, 0]


def test_postprocess_trims_to_budget():
    wids = list(range(20))
    d = postprocess([1] * 12 + [0] * 8, wids, RngStream(0, "p"))
    assert d.sum() == 6  # 0.30 * 20


def _check_post(d_in, wids, out, budget):
    wids = np.asarray(wids)
    n = len(wids)
    for w in np.unique(wids):
        vals = out[wids == w]
        assert vals.min() == vals.max(), "partially masked word"
    longest = max(Counter(wids.tolist()).values())
    assert out.sum() / n <= budget + longest / n + 1e-12
    assert np.all(out <= whole_word(d_in, wids))  # never masks a fresh word


def _random_case(r):
    n = 1 + r.integers(40)
    sizes = []
    while sum(sizes) < n:
        sizes.append(1 + r.integers(3))
    wids = np.repeat(np.arange(len(sizes)), sizes)[:n]
    d = (r.uniform(n) < r.uniform()).astype(int)
    return d, wids


def test_postprocess_fuzz():
    r = RngStream(0, "fuzz")
    for _ in range(10_000):
        d, wids = _random_case(r)
        out = postprocess(d, wids, r)
        _check_post(d, wids, out, 0.30)
        filled = apply_mask(list(range(4, 4 + len(d))), out, infill=True)
        assert not any(a == b == M for a, b in zip(filled, filled[1:]))


def test_postprocess_idempotent():
    r = RngStream(1, "idem")
    for k in range(2000):
        d, wids = _random_case(r)
        once = postprocess(d, wids, r)
        twice = postprocess(once, wids, RngStream(k, "fresh"))
        assert np.array_equal(once, twice)


# -- policy objects and dumps ------------------------------------------------

@pytest.mark.parametrize("name", ["rand", "orig", "ssm", "mask-first-sent", "mask-random-sent"])
def test_policies_emit_valid_decisions(name):
    c = generate_corpus(CorpusConfig(n_entities=5, n_documents=30, seed=1))
    p = heuristic_policy(name)
    ds = p.decisions(c.documents, RngStream(0, name))
    for d, dd in zip(ds, c.documents):
        assert d.shape == (len(dd.tokens),) and set(np.unique(d)) <= {0, 1}
        assert d.sum() >= 1
    for pair in p.pairs(c.documents, RngStream(0, name)):
        assert pair.x_tar


def test_unknown_policy_and_option():
    with pytest.raises(ContractViolation):
        heuristic_policy("nope")
    with pytest.raises(ContractViolation):
        heuristic_policy("rand", colour="red")


def test_mask_dump_round_trip(tmp_path):
    recs = [("doc1", "rand", np.array([0, 1, 0])), ("doc2", "ssm", np.array([1]))]
    p = tmp_path / "masks.jsonl"
    save_mask_dump(recs, p)
    back = load_mask_dump(p)
    assert [(a, b, c.tolist()) for a, b, c in back] == [(a, b, c.tolist()) for a, b, c in recs]
