"""Pipeline configuration: dataclasses plus a flat ``section.key = value`` file format."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class MazeConfig:
    size: int = 11
    seed: int = 0


@dataclass
class DataConfig:
    episodes: int = 500


@dataclass
class LatentConfig:
    g: int = 16
    c: int = 16


@dataclass
class ReprConfig:
    entropy_weight: float = 5e-6
    entropy_floor: float = 0.05
    phase_fraction: float = 0.9
    epochs: int = 60
    lr: float = 3e-3
    hidden: int = 128
    batch: int = 64
    # learning-rate schedule over the joint training run: "cosine" or "none"
    lr_decay: str = "cosine"


@dataclass
class WorldModelConfig:
    w_wm: float = 0.0025
    rollouts: int = 2000
    horizon: int = 50
    hidden: int = 128
    lr: float = 3e-3
    # how raw predecessor samples become graph nodes: "reencode" or "none"
    project: str = "reencode"
    # "data" ends rollouts at (code, action) queries or predecessor codes absent from the logged data
    gate: str = "data"
    # train on transitions that moved the agent only; a blocked move gives a second, uninformative predecessor
    moves_only: bool = True


@dataclass
class GraphConfig:
    # forward triples seen fewer times than this are left out of the graph
    min_count: int = 2


@dataclass
class PolicyConfig:
    c1: float = 0.01
    avoid_weight: float = 1.0
    epochs: int = 200
    lr: float = 1e-3
    hidden: int = 128
    batch: int = 64


@dataclass
class EvalConfig:
    trials: int = 5
    slack: float = 1.5


SECTIONS = {
    "maze": MazeConfig,
    "data": DataConfig,
    "latent": LatentConfig,
    "repr": ReprConfig,
    "wm": WorldModelConfig,
    "graph": GraphConfig,
    "policy": PolicyConfig,
    "eval": EvalConfig,
}


@dataclass
class PipelineConfig:
    seed: int = 0
    # seed for data collection and world-model training; -1 means "use seed"
    model_seed: int = -1
    mode: str = "learned"
    out: str = "runs/default"
    goals: str = "bottom-left"
    negative_goals: str = ""
    maze: MazeConfig = field(default_factory=MazeConfig)
    data: DataConfig = field(default_factory=DataConfig)
    latent: LatentConfig = field(default_factory=LatentConfig)
    repr: ReprConfig = field(default_factory=ReprConfig)
    wm: WorldModelConfig = field(default_factory=WorldModelConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def effective_model_seed(self):
        return self.seed if self.model_seed < 0 else self.model_seed

    def validate(self):
        if self.mode not in ("learned", "oracle"):
            raise ConfigError(f"mode must be 'learned' or 'oracle', got {self.mode!r}")
        if self.eval.slack < 1:
            raise ConfigError("eval.slack must be >= 1")
        if self.eval.trials < 1:
            raise ConfigError("eval.trials must be >= 1")
        if self.data.episodes < 1:
            raise ConfigError("data.episodes must be >= 1")
        if self.wm.rollouts < 1 or self.wm.horizon < 1:
            raise ConfigError("wm.rollouts and wm.horizon must be >= 1")
        if self.wm.project not in ("reencode", "none"):
            raise ConfigError(f"wm.project must be 'reencode' or 'none', got {self.wm.project!r}")
        if self.repr.lr_decay not in ("cosine", "none"):
            raise ConfigError(f"repr.lr_decay must be 'cosine' or 'none', got {self.repr.lr_decay!r}")
        if self.wm.gate not in ("data", "none"):
            raise ConfigError(f"wm.gate must be 'data' or 'none', got {self.wm.gate!r}")
        if self.graph.min_count < 1:
            raise ConfigError("graph.min_count must be >= 1")
        if self.wm.w_wm < 0:
            raise ConfigError("wm.w_wm must be >= 0")
        if self.policy.c1 < 0:
            raise ConfigError("policy.c1 must be >= 0")
        return self

    def items(self):
        """Flat (key, value) pairs in a stable order."""
        out = []
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if f.name in SECTIONS:
                out += [(f"{f.name}.{g.name}", getattr(val, g.name)) for g in dataclasses.fields(val)]
            else:
                out.append((f.name, val))
        return out

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def digest(self, keys):
        """Short hash over the named keys (prefix match on section names).

        ``model_seed`` is hashed by its effective value, so a run that inherits
        the master seed shares artifacts with one that names it explicitly.
        """
        items = [(k, self.effective_model_seed if k == "model_seed" else v) for k, v in self.items()]
        chosen = [f"{k}={v}" for k, v in items if any(k == p or k.startswith(p + ".") for p in keys)]
        return hashlib.sha256("\n".join(chosen).encode()).hexdigest()[:12]


def _coerce(raw, current, key):
    try:
        if isinstance(current, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def set_key(cfg, key, raw):
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        target = getattr(cfg, section)
    else:
        target, name = cfg, key
    if name not in {f.name for f in dataclasses.fields(target)} or name in SECTIONS:
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, _coerce(raw.strip(), getattr(target, name), key))


def parse_config(text, cfg=None):
    cfg = cfg or PipelineConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        set_key(cfg, key.strip(), raw)
    return cfg.validate()


def load_config(path, cfg=None):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_config(fh.read(), cfg)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


NAMED_GOALS = {"top-left": 0, "top-right": 1, "bottom-left": 2, "bottom-right": 3}


def resolve_cells(text, maze):
    """'corners', named corners, or 'r,c; r,c' coordinates -> list of free cells."""
    cells = []
    for part in filter(None, (p.strip() for p in text.replace(";", " ; ").split(";"))):
        if part == "corners":
            cells += maze.corners()
        elif part in NAMED_GOALS:
            cells.append(maze.corners()[NAMED_GOALS[part]])
        else:
            try:
                r, c = (int(v) for v in part.split(","))
            except ValueError as exc:
                raise ConfigError(f"cannot parse cell {part!r}") from exc
            cells.append((r, c))
    for cell in cells:
        if not maze.is_free(cell):
            raise ConfigError(f"goal cell {cell} is not a free cell")
    return list(dict.fromkeys(cells))
