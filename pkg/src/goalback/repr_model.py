"""Categorical latent encoder/decoder and the representation loss.

A latent code is stored as ``bytes`` of length ``g``: one class index per
categorical. That makes codes hashable graph node ids and lets them be written
to disk as-is (hence ``c <= 256``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import maze as M
from . import nn
from . import tensor as T
from .errors import ConfigError, ModelError, TrainingError

POOLED_SIDE = 16
OBS_DIM = POOLED_SIDE * POOLED_SIDE


@dataclass(frozen=True)
class LatentShape:
    g: int = 16
    c: int = 16

    def __post_init__(self):
        if self.g < 1 or self.c < 2:
            raise ConfigError(f"latent shape needs g >= 1 and c >= 2, got g={self.g} c={self.c}")
        if self.c > 256:
            raise ConfigError("codes are stored as bytes, so c must be <= 256")

    @property
    def flat(self):
        return self.g * self.c


@dataclass
class EntropySchedule:
    """Entropy weight that switches on for the last part of training."""

    epochs: int
    weight: float = 5e-6
    phase_fraction: float = 0.9
    floor: float = 0.05

    def __post_init__(self):
        if not 0.0 < self.phase_fraction < 1.0:
            raise ConfigError("entropy phase fraction must lie in (0, 1)")
        if self.weight < 0:
            raise ConfigError("entropy weight must be >= 0")

    def alpha(self, epoch):
        return 0.0 if epoch < self.phase_fraction * self.epochs else self.weight


# codes

def argmax_code(dist):
    """Row-wise argmax (ties go to the lowest index)."""
    return bytes(np.argmax(np.asarray(dist), axis=-1).astype(np.uint8).tolist())


def sample_code(dist, rng):
    return bytes(T.sample_indices(np.asarray(dist), rng).astype(np.uint8).tolist())


def code_onehot(codes, shape):
    """(N,) codes -> (N, g*c) flattened one-hot matrix."""
    idx = np.frombuffer(b"".join(codes), dtype=np.uint8).reshape(len(codes), shape.g)
    return T.one_hot(idx, shape.c).reshape(len(codes), shape.flat)


def code_hex(code):
    return code.hex()


def prepare_obs(obs):
    """Accept a 64x64x3 image, a batch of them, or pooled vectors; return (N, 256)."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape[-3:] == (M.OBS_SIZE, M.OBS_SIZE, 3):
        batch = obs.reshape(-1, M.OBS_SIZE, M.OBS_SIZE, 3)
        return np.stack([M.pooled_gray(o, POOLED_SIDE) for o in batch])
    return obs.reshape(-1, OBS_DIM)


class ReprModel:
    """MLP encoder (pooled obs -> g*c logits) and decoder (one-hot code -> pixel logits)."""

    def __init__(self, shape, rng, hidden=256, layers=2, zero_head=False):
        self.shape = shape
        self.hidden = hidden
        self.layers = layers
        self.encoder = nn.MLP(nn.mlp_sizes(OBS_DIM, hidden, layers, shape.flat), rng, "enc.", zero_head)
        self.decoder = nn.MLP(nn.mlp_sizes(shape.flat, hidden, layers, OBS_DIM), rng, "dec.")
        # fixed per-pixel input standardisation, set from training data
        self.in_mean = np.zeros(OBS_DIM)
        self.in_scale = np.ones(OBS_DIM)

    def fit_input_stats(self, pooled):
        pooled = np.asarray(pooled)
        self.in_mean = pooled.mean(axis=0)
        self.in_scale = 1.0 / (pooled.std(axis=0) + 1e-2)

    def _standardise(self, pooled):
        return (pooled - self.in_mean) * self.in_scale

    @property
    def params(self):
        return {**self.encoder.params, **self.decoder.params}

    def dist_tensor(self, pooled):
        """Tracked (N, g, c) softmax probabilities and log-probabilities."""
        logits = T.reshape(self.encoder(self._standardise(pooled)), (-1, self.shape.g, self.shape.c))
        return T.softmax_rows(logits), T.log_softmax_rows(logits)

    def decode_logits(self, z_flat):
        return self.decoder(z_flat)

    # untracked inference

    def encode(self, obs):
        """LatentDistribution(s): (g, c) for one observation, (N, g, c) for a batch."""
        pooled = prepare_obs(obs)
        logits = self.encoder.forward_np(self._standardise(pooled)).reshape(-1, self.shape.g, self.shape.c)
        if not np.all(np.isfinite(logits)):
            raise ModelError("encoder produced non-finite logits")
        probs = T.softmax_np(logits)
        single = np.asarray(obs).ndim in (1, 3)
        return probs[0] if single else probs

    def decode(self, code):
        """Pooled grayscale reconstruction (256,) with values in (0, 1)."""
        logits = self.decoder.forward_np(code_onehot([code], self.shape))[0]
        return T.sigmoid_np(logits)

    def code_of_obs(self, obs):
        return argmax_code(self.encode(obs))


class OracleEncoder:
    """Bypass encoder: each free cell gets a fixed, distinct code.

    The code of a cell is the base-``c`` expansion of its free-cell ordinal, so
    codes are distinct whenever ``c ** g`` covers the free cells.
    """

    def __init__(self, maze, shape):
        if shape.c ** shape.g < len(maze.free_cells):
            raise ConfigError("latent shape too small to give every free cell its own code")
        self.maze = maze
        self.shape = shape
        self._code = {}
        self._cell = {}
        for ordinal, cell in enumerate(maze.free_cells):
            digits, n = [], ordinal
            for _ in range(shape.g):
                n, d = divmod(n, shape.c)
                digits.append(d)
            code = bytes(digits)
            self._code[cell] = code
            self._cell[code] = cell

    def code_of_cell(self, cell):
        return self._code[tuple(cell)]

    def cell_of_code(self, code):
        return self._cell.get(code)

    def code_of_obs(self, obs):
        green = np.all(np.asarray(obs) == M.AGENT_RGB, axis=-1)
        rows, cols = np.nonzero(green)
        px = M.cell_pixels(self.maze)
        return self.code_of_cell((int(rows[0]) // px, int(cols[0]) // px))

    def encode(self, obs):
        code = self.code_of_obs(obs)
        return T.one_hot(np.frombuffer(code, dtype=np.uint8), self.shape.c)


# loss

def mean_entropy(probs, logp):
    """Per-observation mean Shannon entropy -(1/gc) sum Z log Z, shape (N,)."""
    n, g, c = probs.shape
    return T.mul(T.sum(T.reshape(T.mul(probs, logp), (n, g * c)), axis=1), -1.0 / (g * c))


def st_sampler(rng):
    return lambda probs: T.straight_through_sample(probs, rng)


def repr_terms(model, pooled, probs, logp, z, alpha, floor):
    """Per-observation reconstruction BCE (summed over pooled pixels) plus weighted entropy term."""
    n = pooled.shape[0]
    recon = T.sum(T.bce_with_logits(model.decode_logits(T.reshape(z, (n, -1))), pooled), axis=1)
    if alpha == 0.0:
        return recon
    ent = T.clamp_min(mean_entropy(probs, logp), floor)
    return recon + T.mul(ent, alpha)


def repr_loss(model, obs, schedule, epoch, rng, sampler=None):
    """Mean over the batch of BCE(decode(z), obs) + alpha(epoch) * max(mean entropy, floor).

    ``sampler`` maps the (N, g, c) probability tensor to the decoder input;
    the default draws a straight-through one-hot sample.
    """
    if epoch > schedule.epochs:
        raise ConfigError(f"epoch {epoch} is past the terminal epoch {schedule.epochs}")
    pooled = prepare_obs(obs)
    probs, logp = model.dist_tensor(pooled)
    z = (sampler or st_sampler(rng))(probs)
    loss = T.mean(repr_terms(model, pooled, probs, logp, z, schedule.alpha(epoch), schedule.floor))
    if not np.isfinite(loss.data):
        raise TrainingError(f"non-finite representation loss at epoch {epoch}")
    return loss
