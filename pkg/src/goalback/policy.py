"""Policy over latent codes distilled from the SPE-filtered dataset."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, TrainingError
from .maze import NUM_ACTIONS
from .repr_model import code_onehot

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-8


@dataclass
class PolicyTrainConfig:
    c1: float = 0.01
    avoid_weight: float = 1.0
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.c1 < 0:
            raise ConfigError("entropy weight c1 must be >= 0")


class PolicyNet:
    def __init__(self, shape, rng, n_actions=NUM_ACTIONS, hidden=128, layers=2):
        self.shape = shape
        self.n_actions = n_actions
        self.net = nn.MLP(nn.mlp_sizes(shape.flat, hidden, layers, n_actions), rng, "pi.")

    @property
    def params(self):
        return self.net.params

    def logits(self, codes):
        return self.net(T.Tensor(code_onehot(list(codes), self.shape)))

    def probs(self, codes):
        return T.softmax_np(self.net.forward_np(code_onehot(list(codes), self.shape)))


def policy_loss(net, codes, actions, cfg, weights=None, avoid_codes=(), avoid_actions=()):
    """Weighted mean NLL minus c1 * mean entropy, plus the avoid term.

    The avoid term adds ``avoid_weight * mean(max(log pi(a|z), -ln(10 * A)))``,
    so repulsion stops once an avoided action is ten times below uniform.
    """
    if not len(codes) and not len(avoid_codes):
        raise ConfigError("policy_loss needs a nonempty batch")
    total = T.Tensor(0.0)
    if len(codes):
        w = np.ones(len(codes)) if weights is None else np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
        probs = T.softmax_rows(net.logits(codes))
        logp = T.log(T.clamp_min(probs, PROB_CLAMP))
        nll = T.neg(T.pick(logp, actions))
        ent = T.neg(T.sum(T.mul(probs, logp), axis=1))
        total = T.sum(T.mul(T.sub(nll, T.mul(ent, cfg.c1)), w))
    if len(avoid_codes):
        probs = T.softmax_rows(net.logits(avoid_codes))
        logp = T.log(T.clamp_min(probs, PROB_CLAMP))
        floor = -math.log(10 * net.n_actions)
        total = total + T.mul(T.mean(T.clamp_min(T.pick(logp, avoid_actions), floor)), cfg.avoid_weight)
    return total


def train_policy(net, dataset, cfg, rng):
    """Adam over shuffled pairs, each weighted by its provenance count."""
    if not len(dataset.pairs):
        raise ConfigError("no transitions passed the SPE filter")
    keys = list(dataset.pairs)
    codes = [k[0] for k in keys]
    actions = np.array([k[1] for k in keys])
    counts = np.array([dataset.pairs[k] for k in keys], dtype=np.float64)
    avoid_keys = list(dataset.avoid)
    state = T.AdamState(lr=cfg.lr)
    params = net.params
    curve = []
    n = len(keys)
    n_batches = max(1, math.ceil(n / cfg.batch_size))
    avoid_chunks = np.array_split(np.arange(len(avoid_keys)), n_batches) if avoid_keys else None
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for b in range(n_batches):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            av = [] if avoid_chunks is None else avoid_chunks[b]
            nn.zero_grads(params)
            loss = policy_loss(net, [codes[i] for i in idx], actions[idx], cfg, counts[idx],
                               [avoid_keys[i][0] for i in av], [avoid_keys[i][1] for i in av])
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite policy loss at epoch {epoch}")
            loss.backward()
            T.adam_step(params, nn.collect_grads(params), state)
            total += float(loss.data)
        curve.append(total / n_batches)
    log.info("policy loss %.4f -> %.4f", curve[0], curve[-1])
    return curve


def act(net, code, mode="greedy", rng=None):
    probs = net.probs([code])[0]
    if mode == "greedy":
        return int(np.argmax(probs))
    if mode == "sample":
        return int(T.sample_indices(probs, rng))
    raise ValueError(f"unknown action mode {mode!r}")
