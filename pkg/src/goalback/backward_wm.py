"""Backward latent dynamics, joint training with the representation, and backward rollouts."""
from __future__ import annotations

import logging
import struct
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ModelError, TrainingError
from .maze import NUM_ACTIONS, pooled_gray, render
from .repr_model import OBS_DIM, LatentShape, code_onehot, prepare_obs, repr_terms, st_sampler

log = logging.getLogger(__name__)

KL_CLAMP = 1e-8


class BackwardModel:
    """MLP over (one-hot code, one-hot action) producing g rows of predecessor logits."""

    def __init__(self, shape, rng, n_actions=NUM_ACTIONS, hidden=256, layers=2):
        self.shape = shape
        self.n_actions = n_actions
        self.net = nn.MLP(nn.mlp_sizes(shape.flat + n_actions, hidden, layers, shape.flat), rng, "wm.")

    @property
    def params(self):
        return self.net.params

    def logits(self, z_flat, actions):
        a = T.Tensor(T.one_hot(np.asarray(actions), self.n_actions))
        out = self.net(T.concat([z_flat, a], axis=-1))
        return T.reshape(out, (-1, self.shape.g, self.shape.c))

    def predict_prev(self, code, action):
        """(g, c) distribution over the predecessor code."""
        x = np.concatenate([code_onehot([code], self.shape)[0], T.one_hot(action, self.n_actions)])
        logits = self.net.forward_np(x[None])[0].reshape(self.shape.g, self.shape.c)
        if not np.all(np.isfinite(logits)):
            raise ModelError("backward model produced non-finite logits")
        return T.softmax_np(logits)

    def sampler(self, project=None):
        """Per-categorical predecessor sampling with a per-(code, action) cache.

        ``project`` optionally maps each raw sample to a canonical code, or to
        None to end the rollout (see ``reencode_projection``); its results are
        cached per sampled code.
        """
        cache = {}
        projected = {}

        def sample(code, action, rng):
            key = (code, action)
            cdf = cache.get(key)
            if cdf is None:
                cdf = cache[key] = np.cumsum(self.predict_prev(code, action), axis=-1)
            u = rng.random((self.shape.g, 1))
            idx = np.minimum((u >= cdf).sum(axis=-1), self.shape.c - 1)
            raw = bytes(idx.astype(np.uint8).tolist())
            if project is None:
                return raw
            if raw not in projected:
                projected[raw] = project(raw)
            return projected[raw]

        return sample


def reencode_projection(repr_model, max_steps=8):
    """code -> fixed point of decode-then-encode, or None if none is reached.

    Independent per-categorical sampling mixes categoricals of different
    predecessors into codes no observation maps to. Decoding and re-encoding
    moves such a mixture toward a code the encoder actually produces; a code
    that still moves after ``max_steps`` rounds ends the rollout.
    """
    def project(code):
        for _ in range(max_steps):
            nxt = repr_model.code_of_obs(repr_model.decode(code))
            if nxt == code:
                return code
            code = nxt
        return None

    return project


def data_support(logs, code_of_cell, moves_only=False):
    """(code, action) pairs that ended a logged transition, and every logged code.

    With ``moves_only`` a pair counts only if some transition into it moved
    the agent; blocked moves leave the observation unchanged.
    """
    pairs = {(code_of_cell(n), a) for log_ in logs for p, a, n in log_.positions
             if not moves_only or p != n}
    codes = {z for z, _ in pairs} | {code_of_cell(p) for log_ in logs for p, _, _ in log_.positions}
    return pairs, codes


def support_gate(sampler, pairs, codes):
    """Restrict ``sampler`` to the logged data: queries outside ``pairs`` and
    predecessors outside ``codes`` end the rollout.

    A random action at a cell can have no predecessor at all (the opposite
    neighbour is a wall and the move itself is open); the learned model still
    answers such queries, and its answers become shortcut edges.
    """
    def sample(code, action, rng):
        if (code, action) not in pairs:
            return None
        prev = sampler(code, action, rng)
        return prev if prev in codes else None

    return sample


class TabularBackwardModel:
    """Count-based inverse of logged forward transitions; the exact-dynamics oracle.

    P(z_prev | z, a) is the empirical frequency of ``z_prev`` among logged
    transitions ``z_prev --a--> z``. Sampling draws whole codes, so no
    hybrid codes can appear.
    """

    def __init__(self, shape, n_actions=NUM_ACTIONS):
        self.shape = shape
        self.n_actions = n_actions
        self.counts = defaultdict(lambda: defaultdict(int))

    @classmethod
    def from_episodes(cls, logs, code_of_cell, shape, n_actions=NUM_ACTIONS):
        model = cls(shape, n_actions)
        for log_ in logs:
            for pos, a, nxt in log_.positions:
                model.counts[(code_of_cell(nxt), a)][code_of_cell(pos)] += 1
        return model

    def predecessors(self, code, action):
        return dict(self.counts.get((code, action), {}))

    def predict_prev(self, code, action):
        """Per-categorical marginals of the empirical predecessor distribution."""
        out = np.zeros((self.shape.g, self.shape.c))
        preds = self.counts.get((code, action))
        if not preds:
            out[:, 0] = 1.0
            return out
        total = float(sum(preds.values()))
        for prev, n in preds.items():
            out[np.arange(self.shape.g), np.frombuffer(prev, dtype=np.uint8)] += n / total
        return out

    def sampler(self):
        table = {}

        def sample(code, action, rng):
            key = (code, action)
            if key not in table:
                preds = self.counts.get(key)
                if not preds:
                    table[key] = None
                else:
                    codes = sorted(preds)
                    w = np.array([preds[c] for c in codes], dtype=np.float64)
                    table[key] = (codes, np.cumsum(w / w.sum()))
            entry = table[key]
            if entry is None:
                return None
            codes, cdf = entry
            return codes[min(int(np.searchsorted(cdf, rng.random(), side="right")), len(codes) - 1)]

        return sample


# losses

def kl_terms(pred_probs, pred_logp, target_probs):
    """Per-sample sum over categoricals of D_KL(pred || target), shape (N,)."""
    n, g, c = pred_probs.shape
    log_target = T.log(T.clamp_min(target_probs, KL_CLAMP))
    kl = T.mul(pred_probs, T.sub(pred_logp, log_target))
    return T.sum(T.reshape(kl, (n, g * c)), axis=1)


def wm_loss(backward, repr_model, obs_prev, actions, obs_next, rng, sampler=None):
    """Mean KL between the predicted predecessor distribution and the encoder's."""
    prev = prepare_obs(obs_prev)
    nxt = prepare_obs(obs_next)
    z_next = (sampler or st_sampler(rng))(repr_model.dist_tensor(nxt)[0])
    target, _ = repr_model.dist_tensor(prev)
    logits = backward.logits(T.reshape(z_next, (nxt.shape[0], -1)), actions)
    loss = T.mean(kl_terms(T.softmax_rows(logits), T.log_softmax_rows(logits), target))
    if not np.isfinite(loss.data):
        raise TrainingError("non-finite world-model loss")
    return loss


def joint_loss(repr_model, backward, obs_prev, actions, obs_next, alpha, floor, w_wm, rng,
               sampler=None, wm_rows=None):
    """L_repr over both frames of each transition + w_wm * L_wm.

    ``wm_rows`` optionally restricts L_wm to a subset of the transitions.
    Returns ``(total, repr_part, wm_part)``; ``wm_part`` is None when the
    world model is skipped.
    """
    prev, nxt = prepare_obs(obs_prev), prepare_obs(obs_next)
    n = prev.shape[0]
    both = np.concatenate([prev, nxt])
    probs, logp = repr_model.dist_tensor(both)
    z = (sampler or st_sampler(rng))(probs)
    repr_part = T.mean(repr_terms(repr_model, both, probs, logp, z, alpha, floor))
    rows = np.arange(n) if wm_rows is None else np.asarray(wm_rows, dtype=np.int64)
    if backward is None or w_wm == 0.0 or rows.size == 0:
        return repr_part, repr_part, None
    target = T.rows(probs, rows)
    z_next = T.reshape(T.rows(z, rows + n), (rows.size, -1))
    logits = backward.logits(z_next, np.asarray(actions)[rows])
    wm_part = T.mean(kl_terms(T.softmax_rows(logits), T.log_softmax_rows(logits), target))
    return repr_part + T.mul(wm_part, w_wm), repr_part, wm_part


@dataclass
class TrainConfig:
    w_wm: float = 0.0025
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    wm_lr: float | None = None
    # "cosine" anneals both learning rates to zero over the run; "none" keeps them fixed
    lr_decay: str = "none"
    # train the backward model only on transitions whose observation changed
    moves_only: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.w_wm < 0:
            raise ConfigError("w_wm must be >= 0")
        if self.lr_decay not in ("none", "cosine"):
            raise ConfigError(f"unknown lr_decay {self.lr_decay!r}")

    def lr_factor(self, epoch):
        if self.lr_decay == "none":
            return 1.0
        return 0.5 * (1.0 + np.cos(np.pi * epoch / self.epochs))


def transitions_array(logs, maze):
    """Flatten episode logs into (prev_cell_idx, action, next_cell_idx) integer arrays."""
    prev, acts, nxt = [], [], []
    for log_ in logs:
        for pos, a, n in log_.positions:
            prev.append(maze.index(pos))
            acts.append(a)
            nxt.append(maze.index(n))
    return np.array(prev), np.array(acts), np.array(nxt)


def joint_train(repr_model, backward, maze, logs, cfg, schedule, rng, pooled_table=None):
    """Minimise L_repr + w_wm * L_wm over shuffled minibatches; returns per-epoch curves.

    ``pooled_table`` maps cell index -> pooled observation; rendering is
    deterministic per cell, so each free cell is rendered once.
    """
    if not logs:
        raise ConfigError("joint_train needs at least one episode")
    if pooled_table is None:
        pooled_table = {maze.index(c): pooled_gray(render(maze, c)) for c in maze.free_cells}
    prev, acts, nxt = transitions_array(logs, maze)
    table = np.zeros((maze.width * maze.height, OBS_DIM))
    for k, v in pooled_table.items():
        table[k] = v
    repr_model.fit_input_stats(table[np.concatenate([prev, nxt])])
    groups = [(dict(repr_model.params), T.AdamState(lr=cfg.lr), cfg.lr)]
    if backward is not None:
        groups.append((dict(backward.params), T.AdamState(lr=cfg.wm_lr or cfg.lr), cfg.wm_lr or cfg.lr))
    curves = {"total": [], "repr": [], "wm": []}
    n = prev.size
    moved = np.any(table[prev] != table[nxt], axis=1) if cfg.moves_only else np.ones(n, dtype=bool)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        alpha = schedule.alpha(epoch)
        for _, state, base_lr in groups:
            state.lr = base_lr * cfg.lr_factor(epoch)
        sums = np.zeros(3)
        batches = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            for params, _, _ in groups:
                nn.zero_grads(params)
            total, rp, wp = joint_loss(repr_model, backward, table[prev[idx]], acts[idx], table[nxt[idx]],
                                       alpha, schedule.floor, cfg.w_wm, rng, wm_rows=np.flatnonzero(moved[idx]))
            if not np.isfinite(total.data):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            total.backward()
            for params, state, _ in groups:
                T.adam_step(params, nn.collect_grads(params), state)
            sums += [float(total.data), float(rp.data), 0.0 if wp is None else float(wp.data)]
            batches += 1
        for key, val in zip(("total", "repr", "wm"), sums / batches):
            curves[key].append(float(val))
        log.info("epoch %d total %.4f repr %.4f wm %.4f", epoch, *(sums / batches))
    return curves


# rollouts

@dataclass
class RolloutArchive:
    """Visit counts per code plus every backward step as a forward triple.

    ``transitions`` holds ``(z_prev, action, z)``: taking ``action`` at
    ``z_prev`` leads to ``z``. Goals are seeded with visit count 0; every
    rollout step adds one visit to the predecessor it produced.
    """

    shape: LatentShape
    goals: list
    visits: dict = field(default_factory=dict)
    transitions: list = field(default_factory=list)
    lengths: list = field(default_factory=list)

    def codes(self):
        return list(self.visits)


def backward_rollouts(sampler, goals, count, horizon, rng, shape, n_actions=NUM_ACTIONS):
    """Goal-rooted backward simulations with inverse-visit-frequency restarts.

    ``sampler(code, action, rng)`` returns a predecessor code, or None when the
    model knows no predecessor (the rollout then ends early).
    """
    if count < 1 or horizon < 1:
        raise ConfigError("rollout count and horizon must be >= 1")
    if not goals:
        raise ConfigError("backward rollouts need at least one goal")
    archive = RolloutArchive(shape, list(goals))
    codes = []
    visits = np.zeros(1024)
    index = {}

    def touch(code, inc):
        nonlocal visits
        i = index.get(code)
        if i is None:
            i = index[code] = len(codes)
            codes.append(code)
            if i >= visits.size:
                visits = np.concatenate([visits, np.zeros(visits.size)])
        visits[i] += inc

    for g in goals:
        touch(g, 0)
    for _ in range(count):
        w = 1.0 / (visits[:len(codes)] + 1.0)
        cdf = np.cumsum(w)
        root = codes[min(int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right")), len(codes) - 1)]
        z, length = root, 0
        for a in rng.integers(n_actions, size=horizon).tolist():
            z_prev = sampler(z, a, rng)
            if z_prev is None:
                break
            archive.transitions.append((z_prev, a, z))
            touch(z_prev, 1)
            z = z_prev
            length += 1
        archive.lengths.append(length)
    archive.visits = {c: int(visits[i]) for i, c in enumerate(codes)}
    return archive


_ARCHIVE_MAGIC = b"BTA1"


def save_archive(path, archive):
    """BTA1: header (g, c, goal count), codes (goals first), forward transitions by index."""
    codes = list(archive.goals) + [c for c in archive.visits if c not in set(archive.goals)]
    index = {c: i for i, c in enumerate(codes)}
    with open(path, "wb") as fh:
        fh.write(_ARCHIVE_MAGIC)
        fh.write(struct.pack("<III", archive.shape.g, archive.shape.c, len(archive.goals)))
        fh.write(struct.pack("<I", len(codes)))
        for c in codes:
            fh.write(c)
        fh.write(struct.pack("<I", len(archive.transitions)))
        for prev, a, z in archive.transitions:
            fh.write(struct.pack("<IBI", index[prev], a, index[z]))


def load_archive(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _ARCHIVE_MAGIC:
        raise ValueError(f"{path}: not a BTA1 archive file")
    g, c, n_goals = struct.unpack_from("<III", buf, 4)
    (n_codes,) = struct.unpack_from("<I", buf, 16)
    off = 20
    codes = [buf[off + i * g: off + (i + 1) * g] for i in range(n_codes)]
    off += n_codes * g
    (n_tr,) = struct.unpack_from("<I", buf, off)
    off += 4
    transitions = []
    visits = {code: 0 for code in codes}
    for prev, a, z in struct.iter_unpack("<IBI", buf[off:off + 9 * n_tr]):
        transitions.append((codes[prev], a, codes[z]))
        visits[codes[prev]] += 1
    return RolloutArchive(LatentShape(g, c), codes[:n_goals], visits, transitions)
