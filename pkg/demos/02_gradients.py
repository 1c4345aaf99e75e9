"""Checking the autodiff engine and the meta-gradient against finite differences.

The meta-gradient flows through one pre-training step and one fine-tuning
step of a tiny model, so it needs second-order terms; central differences on
the whole objective are the independent check.
"""
import time

import numpy as np

from masklab import nnblocks as nb
from masklab.diffcore import Graph, RngStream, Tensor, backward, rel_err
from masklab.diffcore import tensor as T
from masklab.lmodel import init_lm
from masklab.policynets import init_meta_policy
from masklab.trainers import MetaConfig, meta_objective
from masklab.trainers.meta import make_batch
from masklab.corpus import Triplet

r = RngStream(0, "demo")

# first-order: a Gumbel-softmax over random logits, weighted sum as the loss
logits = r.normal((3, 5, 2))  # two logits per position: keep, mask
noise = r.gumbel((3, 5, 2))
w = r.normal((3, 5))


def loss(z):
    return float((nb.gumbel_softmax(Tensor(z), 0.7, noise=noise).data * w).sum())


g = Graph()
with g:
    z = g.bind({"z": logits}, "")["z"]
    out = T.sum(nb.gumbel_softmax(z, 0.7, noise=noise) * Tensor(w))
engine = backward(g, out, ["z"])["z"].data

fd = np.zeros_like(logits)
h = 1e-6
for idx in np.ndindex(*logits.shape):
    up, dn = logits.copy(), logits.copy()
    up[idx] += h
    dn[idx] -= h
    fd[idx] = (loss(up) - loss(dn)) / (2 * h)
print("gumbel-softmax gradient, max rel err:", rel_err(engine, fd).max())

# second-order: the meta-gradient on a vocabulary of 20 with width 4
V = 20


def triplet(k):
    # context, question, answer copied out of the context; ids 0..3 are reserved
    ctx = [int(v) for v in 4 + r.integers(V - 4, 6 + k)]
    return Triplet(ctx, [int(v) for v in 4 + r.integers(V - 4, 3)], ctx[2:4], f"e{k}")


trips = [triplet(0), triplet(1)]
theta = init_lm(V, d_emb=4, hidden=4, seed=1)
phi = init_meta_policy(V, d_emb=4, hidden=4, seed=2)
batch = make_batch(trips, [0, 1])
gnoise = RngStream(3, "noise").gumbel(batch[0].shape + (2,))
cfg = MetaConfig(alpha0=0.5, alpha1=0.5, beta=0.1)

t0 = time.time()
out = meta_objective(theta, phi, batch, cfg, gnoise)
print(f"\nmeta loss {out['meta_loss']:.6f}  reg loss {out['reg_loss']:.4f}  ({time.time() - t0:.2f}s)")


def total(store):
    o = meta_objective(theta, store, batch, cfg, gnoise)
    return o["meta_loss"] + cfg.beta * o["reg_loss"]


worst = 0.0
t0 = time.time()
for name, arr in phi.items():
    for idx in np.ndindex(*arr.shape):
        base = arr[idx]
        arr[idx] = base + 1e-3
        up = total(phi)
        arr[idx] = base - 1e-3
        dn = total(phi)
        arr[idx] = base
        worst = max(worst, float(rel_err(out["grads"][name][idx], (up - dn) / 2e-3)))
print(f"meta-gradient vs central differences, max rel err {worst:.2e} ({time.time() - t0:.0f}s)")
