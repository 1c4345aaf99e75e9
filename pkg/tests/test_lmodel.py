import numpy as np
import pytest

from masklab import tokens
from masklab.diffcore import RngStream, Tensor
from masklab.errors import ContractViolation
from masklab.lmodel import (GREEDY, Beam, batch_loss, beam_decode, decode, denoise_loss,
                            greedy_decode, init_lm, seq2seq_loss)
from masklab.nnblocks import embed_mixture
from masklab.trainers.optim import Adam, loss_and_grads
from oracles import grad_check

V = 12


def small_lm(seed=0, hidden=4):
    return init_lm(V, d_emb=4, hidden=hidden, seed=seed)


def test_denoise_loss_gradient():
    lm = small_lm()
    src, tar = [4, 5, 3, 7, 8, 9], [5, 6, 7]
    assert grad_check(lambda p: denoise_loss(p, src, tar), dict(lm.items())) <= 1e-4


def test_batched_loss_gradient_with_padding():
    lm = small_lm(1)
    src = [[4, 5, 6, 7, 8, 9, 10, 11], [6, 3, 7]]
    tar = [[5], [6, 7, 8]]
    assert grad_check(lambda p: batch_loss(p, src, tar), dict(lm.items())) <= 1e-4


def test_seq2seq_loss_gradient():
    lm = small_lm(2)
    assert grad_check(lambda p: seq2seq_loss(p, [4, 9, 10, 2], [11]), dict(lm.items())) <= 1e-4


def test_uniform_logits_give_log_v():
    lm = small_lm()
    lm["out.W"] = np.zeros_like(lm["out.W"])
    lm["out.b"] = np.zeros_like(lm["out.b"])
    p = {k: Tensor(v) for k, v in lm.items()}
    assert abs(float(denoise_loss(p, [4, 5, 6], [4, 5, 6]).data) - np.log(V)) < 0.05


def test_id_path_equals_hard_mixture_path():
    lm = small_lm(3)
    p = {k: Tensor(v) for k, v in lm.items()}
    x = [4, 5, 6, 7, 8]
    d = np.array([0.0, 1.0, 0.0, 1.0, 0.0])
    ids = [t if m == 0 else tokens.MASK for t, m in zip(x, d)]
    a = float(denoise_loss(p, ids, x).data)
    b = float(denoise_loss(p, embed_mixture(p["emb"], np.array(x), d), x).data)
    assert abs(a - b) / abs(a) <= 1e-12


def test_empty_target_rejected():
    p = {k: Tensor(v) for k, v in small_lm().items()}
    with pytest.raises(ContractViolation):
        denoise_loss(p, [4, 5], [])


def fit(pairs, steps, hidden=16, lr=0.02, seed=0):
    lm = init_lm(V, d_emb=8, hidden=hidden, seed=seed)
    opt = Adam()
    src = [s for s, _ in pairs]
    tar = [t for _, t in pairs]
    loss = None
    for _ in range(steps):
        loss, grads = loss_and_grads(lm, lambda p: batch_loss(p, src, tar))
        opt.step(lm, grads, lr)
    return lm, loss


def test_overfit_single_example_and_decode_it():
    lm, loss = fit([([4, 5, 6, 7], [8, 9, 10])], 300)
    assert loss < 0.01
    assert decode(lm, [4, 5, 6, 7]) == [8, 9, 10]
    assert decode(lm, [4, 5, 6, 7], Beam(4)) == [8, 9, 10]


def test_overfit_eight_examples():
    r = RngStream(5, "overfit")
    pairs = [(list(4 + r.integers(8, 5)), list(4 + r.integers(8, 3))) for _ in range(8)]
    _, loss = fit([(s, s) for s, _ in pairs], 1000, hidden=32)
    assert loss < 0.1


def test_beam_width_one_matches_greedy():
    r = RngStream(9, "beam")
    for k in range(100):
        lm = init_lm(V, d_emb=4, hidden=4, seed=k)
        src = list(4 + r.integers(8, 1 + r.integers(6)))
        assert beam_decode(lm, src, width=1, max_len=6) == greedy_decode(lm, [src], max_len=6)[0]


def test_decode_length_bound_and_batching():
    lm = small_lm(4)
    srcs = [[4, 5], [6, 7, 8, 9], [10]]
    out = greedy_decode(lm, srcs, max_len=5)
    assert all(len(o) <= 5 for o in out)
    assert out == [decode(lm, s, GREEDY, max_len=5) for s in srcs]
    assert len(decode(lm, [4, 5], Beam(3), max_len=4)) <= 4
