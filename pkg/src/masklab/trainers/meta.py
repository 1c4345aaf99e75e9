"""Bilevel meta-learning of the masking policy.

One outer step on a batch of triplets ``(c, s, t)``:

    d~      = gumbel_softmax(g(c; phi))
    theta'  = theta  - a0 * grad L_denoise(theta; mix(c, d~), c)
    theta'' = theta' - a1 * grad L(theta'; s, t)
    L'      = L(theta''; s, t) - L(theta'; s, t)
    phi    <- phi - a2 * grad_phi (L' + beta * L_reg(d~))

and the persistent LM keeps ``theta'`` (the fine-tune step is discarded).
"""
import logging
from dataclasses import dataclass, fields
from fractions import Fraction

import numpy as np

from .. import nnblocks as nb
from ..diffcore import Graph, RngStream, Tensor, backward
from ..diffcore import tensor as T
from ..errors import ContractViolation
from ..lmodel import batch_loss, pad_batch
from ..policynets import meta_soft
from .optim import all_finite, clip_grads, make_optimizer

log = logging.getLogger(__name__)


@dataclass
class MetaConfig:
    alpha0: float = 1e-2
    alpha1: float = 1e-2
    alpha2: float = 1e-3
    beta: float = 0.1
    gamma: float = 0.15
    eps: float = 0.05
    tau: float = 1.0
    steps: int = 2000
    batch_size: int = 8
    stop_grad_base: bool = False  # treat L(theta'; s, t) as a constant in L'
    inner_target: str = "full"  # "masked": weight the denoising loss by the soft decisions
    outer_optimizer: str = "sgd"
    clip: float = 0.0
    seed: int = 0

    def validate(self):
        for name in ("alpha0", "alpha1", "alpha2", "tau"):
            if not getattr(self, name) >= 0:
                raise ContractViolation(f"{name} must be non-negative")
        if not (0 < self.gamma < 1 and 0 < self.eps < 1):
            raise ContractViolation("gamma and eps must lie in (0, 1)")
        if self.inner_target not in ("full", "masked"):
            raise ContractViolation(f"inner_target must be 'full' or 'masked', got {self.inner_target!r}")
        if self.batch_size < 1:
            raise ContractViolation("batch_size must be positive")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown meta config keys: {sorted(unknown)}")
        return cls(**d).validate()


# -- pieces of one outer step -------------------------------------------------

def _sgd(params, grads, lr):
    if lr == 0:
        return dict(params)
    return {k: params[k] - T.scale(grads[k], lr) for k in params}


def inner_pretrain_step(graph, theta, phi, c_ids, c_mask, cfg, noise):
    """``theta'`` and the soft decisions; everything stays on ``graph``."""
    soft = meta_soft(phi, c_ids, cfg.tau, c_mask, noise=noise)
    src = nb.embed_mixture(theta["emb"], c_ids, soft)
    targets = [list(row[:int(m.sum())]) for row, m in zip(c_ids, c_mask)]
    weights = soft * Tensor(c_mask) if cfg.inner_target == "masked" else None
    loss = batch_loss(theta, src, targets, c_mask, weights)
    grads = backward(graph, loss, theta, create_graph=True)
    return _sgd(theta, grads, cfg.alpha0), soft, loss


def inner_finetune_step(graph, theta1, s, t, cfg):
    loss = batch_loss(theta1, s, t)
    grads = backward(graph, loss, theta1, create_graph=True)
    return _sgd(theta1, grads, cfg.alpha1), loss


def meta_loss(theta2, theta1, s, t, base=None, stop_grad_base=False):
    """``L(theta''; s, t) - L(theta'; s, t)``."""
    if base is None:
        base = batch_loss(theta1, s, t)
    if stop_grad_base:
        base = Tensor(base.data)
    return batch_loss(theta2, s, t) - base


def _dead_zone(x_len, l_d, gamma, eps):
    centre = Fraction(repr(float(gamma))) * int(x_len)
    half = Fraction(repr(float(eps))) * int(x_len)
    return abs(centre - Fraction(float(l_d))) <= half, float(centre)


def budget_loss(x_len, soft_d, gamma=0.15, eps=0.05):
    """Zero when ``|gamma*l(x) - l(d)| <= eps*l(x)``, else ``(gamma*l(x) - l(d))**2``.

    The dead-zone test is done in exact rational arithmetic on the decimal
    values of ``gamma``/``eps``, so ``l(x)=100, l(d)=20`` is inside the zone.
    """
    soft_d = T.as_tensor(soft_d)
    l_d = T.sum(soft_d)
    inside, centre = _dead_zone(x_len, l_d.data, gamma, eps)
    if inside:
        return T.scale(l_d, 0.0)
    diff = Tensor(np.array(centre)) - l_d
    return diff * diff


def batch_budget_loss(soft, mask, gamma, eps):
    """Mean of ``budget_loss`` over the rows of a padded ``(B, T)`` batch."""
    B = soft.shape[0]
    lens = mask.sum(axis=1).astype(int)
    l_d = T.sum(soft * Tensor(mask), axis=1)
    active, centres = np.zeros(B), np.zeros(B)
    for b in range(B):
        inside, centres[b] = _dead_zone(lens[b], l_d.data[b], gamma, eps)
        active[b] = 0.0 if inside else 1.0
    diff = Tensor(centres) - l_d
    return T.scale(T.sum(diff * diff * Tensor(active)), 1.0 / B)


def meta_objective(theta_store, phi_store, batch, cfg, noise):
    """Build one outer-step graph; returns a dict with losses, grads, and theta'."""
    c_ids, c_mask, s, t = batch
    g = Graph()
    with g:
        phi = g.bind(phi_store.entries, "phi.")
        theta = g.bind(theta_store.entries, "theta.")
        theta1, soft, pre_loss = inner_pretrain_step(g, theta, phi, c_ids, c_mask, cfg, noise)
        theta2, ft_loss = inner_finetune_step(g, theta1, s, t, cfg)
        l_meta = meta_loss(theta2, theta1, s, t, base=ft_loss, stop_grad_base=cfg.stop_grad_base)
        l_reg = batch_budget_loss(soft, c_mask, cfg.gamma, cfg.eps)
        total = l_meta + T.scale(l_reg, cfg.beta)
    grads = backward(g, total, ["phi." + k for k in phi_store.entries])
    return {
        "grads": {k[4:]: v.data for k, v in grads.items()},
        "theta1": {k: v.data for k, v in theta1.items()},
        "meta_loss": float(l_meta.data), "reg_loss": float(l_reg.data),
        "pretrain_loss": float(pre_loss.data), "finetune_loss": float(ft_loss.data),
        "mask_rate": float((soft.data * c_mask).sum() / c_mask.sum()),
    }


def meta_outer_step(phi_store, grads, cfg, optimizer=None, lr=None):
    """``phi - a2 * grad``; a non-finite gradient leaves ``phi`` untouched.

    Returns ``(phi, ok)``.
    """
    if not all_finite(grads):
        log.warning("non-finite hypergradient; outer step skipped")
        return phi_store, False
    lr = cfg.alpha2 if lr is None else lr
    if lr == 0:
        return phi_store, True
    optimizer = optimizer or make_optimizer("sgd")
    optimizer.step(phi_store, clip_grads(grads, cfg.clip), lr)
    return phi_store, True


# -- the outer loop -----------------------------------------------------------

def make_batch(triplets, idx):
    chosen = [triplets[i] for i in idx]
    c_ids, c_mask = pad_batch([tr.context for tr in chosen])
    return c_ids, c_mask, [list(tr.source) for tr in chosen], [list(tr.target) for tr in chosen]


def step_draws(stream, p, n_triplets, batch_size):
    """Batch indices for outer step ``p`` plus the child stream its noise comes from."""
    r = stream.child(f"step:{p}")
    return r.integers(n_triplets, batch_size), r


def run_meta_training(triplets, theta_init, phi_init, cfg=None, stream=None, history=None):
    """Run ``cfg.steps`` outer steps; returns ``(phi, theta, n_aborted)``.

    ``history`` (a list) receives one dict of step statistics per step.
    """
    cfg = (cfg or MetaConfig()).validate()
    if not triplets:
        raise ContractViolation("meta training needs at least one triplet")
    stream = stream or RngStream(cfg.seed, "policy")
    phi, theta = phi_init.copy(), theta_init.copy()
    opt = make_optimizer(cfg.outer_optimizer)
    aborted = 0
    for p in range(cfg.steps):
        idx, r = step_draws(stream, p, len(triplets), cfg.batch_size)
        batch = make_batch(triplets, idx)
        noise = r.gumbel(batch[0].shape + (2,))
        out = meta_objective(theta, phi, batch, cfg, noise)
        phi, ok = meta_outer_step(phi, out["grads"], cfg, opt)
        aborted += not ok
        for k, v in out["theta1"].items():  # keep pre-train progress, drop the fine-tune step
            theta[k] = v
        if history is not None:
            history.append({k: out[k] for k in ("meta_loss", "reg_loss", "pretrain_loss",
                                                 "finetune_loss", "mask_rate")})
    return phi, theta, aborted


def replay_pretrain(triplets, theta_init, phi_history, cfg, stream=None):
    """Recompute theta from the inner pre-train steps alone (no fine-tune step)."""
    stream = stream or RngStream(cfg.seed, "policy")
    theta = theta_init.copy()
    for p, phi_store in enumerate(phi_history):
        idx, r = step_draws(stream, p, len(triplets), cfg.batch_size)
        c_ids, c_mask, _, _ = make_batch(triplets, idx)
        noise = r.gumbel(c_ids.shape + (2,))
        g = Graph()
        with g:
            phi = g.bind(phi_store.entries, "phi.")
            th = g.bind(theta.entries, "theta.")
            theta1, _, _ = inner_pretrain_step(g, th, phi, c_ids, c_mask, cfg, noise)
        for k, v in theta1.items():
            theta[k] = v.data
    return theta
