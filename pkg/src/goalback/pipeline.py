"""End-to-end orchestration: collect -> train -> rollout -> graph -> distill -> eval."""
from __future__ import annotations

import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backward_wm as B
from . import goal_graph as G
from . import maze as M
from . import nn
from . import policy as P
from . import repr_model as R
from . import tensor as T
from .config import resolve_cells
from .errors import ConfigError, StageError

log = logging.getLogger(__name__)

STAGES = ("collect", "train", "rollout", "graph", "distill", "eval")
# config keys each stage's output depends on (upstream keys included)
STAGE_KEYS = {
    "collect": ["maze", "data", "model_seed"],
    "train": ["maze", "data", "model_seed", "mode", "latent", "repr", "wm.w_wm", "wm.hidden", "wm.lr",
              "wm.moves_only"],
}
STAGE_KEYS["rollout"] = STAGE_KEYS["train"] + ["seed", "goals", "negative_goals", "wm.rollouts",
                                               "wm.horizon", "wm.project", "wm.gate"]
STAGE_KEYS["graph"] = STAGE_KEYS["rollout"] + ["graph"]
STAGE_KEYS["distill"] = STAGE_KEYS["graph"] + ["policy"]
STAGE_KEYS["eval"] = STAGE_KEYS["distill"] + ["eval"]

STAGE_SEEDS = {name: i for i, name in enumerate(STAGES)}


def stage_rng(cfg, stage):
    seed = cfg.effective_model_seed if stage in ("collect", "train") else cfg.seed
    return np.random.default_rng([seed, STAGE_SEEDS[stage]])


# evaluation

@dataclass
class EvalReport:
    maze_size: tuple
    goals: list
    trials: int
    slack: float
    successes: dict = field(default_factory=dict)  # cell -> successful trials
    reached: dict = field(default_factory=dict)  # cell -> Counter(goal -> count)
    closest: dict = field(default_factory=dict)  # cell -> successes that ended at a closest goal
    lengths: list = field(default_factory=list)

    @property
    def free_cells(self):
        return len(self.successes)

    @property
    def return_positions(self):
        return sum(self.successes.values()) / self.trials

    @property
    def return_pct(self):
        return 100.0 * self.return_positions / self.free_cells

    @property
    def closest_positions(self):
        return sum(self.closest.values()) / self.trials

    @property
    def closest_pct(self):
        rp = self.return_positions
        return 100.0 * self.closest_positions / rp if rp else 0.0

    @property
    def mean_length(self):
        return float(np.mean(self.lengths)) if self.lengths else 0.0

    def per_goal(self):
        out = Counter()
        for cnt in self.reached.values():
            out.update(cnt)
        return {g: out.get(g, 0) for g in self.goals}

    def stats(self):
        rows = [
            ("maze_size", f"{self.maze_size[0]}x{self.maze_size[1]}"),
            ("goals", ";".join(f"{r},{c}" for r, c in self.goals)),
            ("trials", self.trials),
            ("slack", self.slack),
            ("free_cells", self.free_cells),
            ("return_positions", f"{self.return_positions:.4f}"),
            ("return_pct", f"{self.return_pct:.4f}"),
            ("closest_positions", f"{self.closest_positions:.4f}"),
            ("closest_pct", f"{self.closest_pct:.4f}"),
            ("mean_episode_length", f"{self.mean_length:.4f}"),
        ]
        rows += [(f"goal_{r}_{c}_successes", n) for (r, c), n in self.per_goal().items()]
        return rows


def evaluate_policy(maze, encoder, net, goals, trials=5, slack=1.5, mode="greedy", rng=None):
    """Start ``trials`` greedy episodes from every free cell; success = a goal within the budget.

    The budget is ceil(slack * true shortest distance to the goal set).
    """
    goals = [tuple(g) for g in goals]
    goal_set = set(goals)
    to_any = M.bfs_distances(maze, goals)
    to_each = {g: M.bfs_distances(maze, [g]) for g in goals}
    code_cache = {}

    def code_at(cell):
        code = code_cache.get(cell)
        if code is None:
            code = code_cache[cell] = encoder.code_of_obs(M.render(maze, cell))
        return code

    report = EvalReport((maze.height, maze.width), goals, trials, slack)
    for start in maze.free_cells:
        best = min(to_each[g][start] for g in goals)
        budget = math.ceil(slack * to_any[start])
        succ, close, reached = 0, 0, Counter()
        for _ in range(trials):
            pos, steps = start, 0
            while pos not in goal_set and steps < budget:
                pos = M.step(maze, pos, P.act(net, code_at(pos), mode, rng))
                steps += 1
            report.lengths.append(steps)
            if pos in goal_set:
                succ += 1
                reached[pos] += 1
                close += to_each[pos][start] == best
        report.successes[start] = succ
        report.closest[start] = close
        report.reached[start] = reached
    return report


# heatmap

GOAL_COLORS = [(0, 0, 255), (204, 85, 0), (0, 139, 139), (204, 170, 0), (110, 0, 170)]
FIELD_COLORS = [(0, 255, 0), (255, 150, 50), (0, 230, 230), (255, 230, 0), (190, 110, 255)]
WHITE = np.array([255, 255, 255])


def emit_heatmap(maze, report, goals, path, block=8):
    """Binary PPM: white walls, coloured goals, cells tinted by success rate.

    Single goal: white -> green with the success fraction. Several goals:
    the tint uses the colour of the goal that cell reached most often.
    """
    goals = [tuple(g) for g in goals]
    img = np.zeros((maze.height, maze.width, 3), dtype=np.uint8)
    img[maze.walls] = WHITE
    multi = len(goals) > 1
    for cell in maze.free_cells:
        frac = report.successes.get(cell, 0) / report.trials
        tint = FIELD_COLORS[0]
        reached = report.reached.get(cell)
        if multi and reached:
            top = max(reached.items(), key=lambda kv: (kv[1], -goals.index(kv[0])))[0]
            tint = FIELD_COLORS[1 + goals.index(top) % 4]
        img[cell] = np.round(WHITE * (1 - frac) + np.array(tint) * frac).astype(np.uint8)
    for i, g in enumerate(goals):
        img[g] = GOAL_COLORS[0] if not multi else GOAL_COLORS[1 + i % 4]
    big = np.kron(img, np.ones((block, block, 1), dtype=np.uint8))
    with open(path, "wb") as fh:
        fh.write(f"P6\n{big.shape[1]} {big.shape[0]}\n255\n".encode("ascii"))
        fh.write(big.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    magic, w, h, maxval, rest = data.split(maxsplit=4)
    if magic != b"P6":
        raise ValueError("not a binary PPM")
    return np.frombuffer(rest, dtype=np.uint8).reshape(int(h), int(w), 3)


# report tables

def fmt_ratio(mean, total):
    pct = 100.0 * mean / total if total else 0.0
    return f"{mean:.1f} / {total:g} ({pct:.0f}%)"


def read_stats(path):
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if "\t" in line:
                k, v = line.rstrip("\n").split("\t", 1)
                out[k] = v
    return out


def report_table(reports):
    """Group runs by (maze, goal set); one row per group with mean and std columns.

    Accepts EvalReport objects or stats dicts as written by ``write_stats``.
    """
    if not reports:
        raise ValueError("report_table needs at least one report")
    groups = {}
    for rep in reports:
        s = dict(rep.stats()) if isinstance(rep, EvalReport) else rep
        key = (str(s["maze_size"]), str(s["goals"]))
        groups.setdefault(key, []).append(s)
    header = ["Maze size", "Goals", "Runs", "Return positions", "std", "Went to closest goal", "std"]
    rows = []
    for (size, goals), runs in groups.items():
        free = float(runs[0]["free_cells"])
        rp = np.array([float(r["return_positions"]) for r in runs])
        cp = np.array([float(r["closest_positions"]) for r in runs])
        multi = ";" in goals
        rows.append([size, goals, str(len(runs)), fmt_ratio(rp.mean(), free), f"{rp.std():.2f}",
                     f"{cp.mean():.1f} / {rp.mean():.1f} ({100 * cp.mean() / max(rp.mean(), 1e-12):.0f}%)"
                     if multi else "-", f"{cp.std():.2f}" if multi else "-"])
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    line = lambda r: "| " + " | ".join(str(v).ljust(w) for v, w in zip(r, widths)) + " |"
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    return "\n".join([line(header), sep] + [line(r) for r in rows]) + "\n"


def write_stats(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{k}\t{v}\n" for k, v in rows)


# pipeline

class Workspace:
    """Content-addressed stage artifacts inside the output directory."""

    SUFFIX = {"collect": "episodes.bte", "train": "models.btw", "rollout": "archive.bta",
              "graph": "graph.txt", "dataset": "dataset.btd", "distill": "policy.btw"}

    def __init__(self, cfg):
        self.cfg = cfg
        self.root = Path(cfg.out)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, stage, kind=None):
        h = self.cfg.digest(STAGE_KEYS[stage])
        return self.root / f"{h}-{self.SUFFIX[kind or stage]}"


def _atomic(path, writer):
    tmp = Path(str(path) + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


class Pipeline:
    def __init__(self, cfg):
        self.cfg = cfg.validate()
        self.ws = Workspace(cfg)
        self.shape = R.LatentShape(cfg.latent.g, cfg.latent.c)
        self.maze = M.generate_maze(cfg.maze.size, cfg.maze.size, cfg.maze.seed)
        self.goals = resolve_cells(cfg.goals, self.maze)
        self.negative_goals = resolve_cells(cfg.negative_goals, self.maze)
        if not self.goals:
            raise ConfigError("at least one goal cell is required")
        if set(self.goals) & set(self.negative_goals):
            raise ConfigError("a cell cannot be both a goal and a negative goal")
        self._cache = {}

    def _run(self, stage, fn):
        if stage not in self._cache:
            try:
                self._cache[stage] = fn()
            except (ConfigError, StageError):
                raise
            except Exception as exc:  # noqa: BLE001 - reported with the stage name
                raise StageError(stage, exc) from exc
        return self._cache[stage]

    # stages

    def collect(self):
        def go():
            path = self.ws.path("collect")
            if path.exists():
                return M.load_episodes(path)[1]
            logs = M.collect_random_data(self.maze, self.cfg.data.episodes, stage_rng(self.cfg, "collect"))
            _atomic(path, lambda p: M.save_episodes(p, self.maze, logs))
            return logs
        return self._run("collect", go)

    def _new_models(self, rng):
        c = self.cfg
        rm = R.ReprModel(self.shape, rng, hidden=c.repr.hidden)
        bm = B.BackwardModel(self.shape, rng, hidden=c.wm.hidden)
        return rm, bm

    def train(self):
        """Learned mode: jointly trained encoder/decoder/backward model. Oracle mode: tabular."""
        def go():
            logs = self.collect()
            c = self.cfg
            if c.mode == "oracle":
                enc = R.OracleEncoder(self.maze, self.shape)
                return enc, B.TabularBackwardModel.from_episodes(logs, enc.code_of_cell, self.shape)
            path = self.ws.path("train")
            rng = stage_rng(c, "train")
            rm, bm = self._new_models(rng)
            if path.exists():
                arrays = T.load_tensors(path)
                nn.load_into(rm.params, arrays)
                nn.load_into(bm.params, arrays)
                rm.in_mean, rm.in_scale = arrays["enc.in_mean"], arrays["enc.in_scale"]
                return rm, bm
            schedule = R.EntropySchedule(c.repr.epochs, c.repr.entropy_weight, c.repr.phase_fraction,
                                         c.repr.entropy_floor)
            tcfg = B.TrainConfig(w_wm=c.wm.w_wm, epochs=c.repr.epochs, batch_size=c.repr.batch,
                                 lr=c.repr.lr, wm_lr=c.wm.lr, lr_decay=c.repr.lr_decay,
                                 moves_only=c.wm.moves_only)
            B.joint_train(rm, bm, self.maze, logs, tcfg, schedule, rng)
            arrays = {k: v.data for k, v in {**rm.params, **bm.params}.items()}
            arrays["enc.in_mean"], arrays["enc.in_scale"] = rm.in_mean, rm.in_scale
            _atomic(path, lambda p: T.save_tensors(p, arrays))
            return rm, bm
        return self._run("train", go)

    def goal_codes(self):
        enc, _ = self.train()
        codes = [enc.code_of_obs(M.render(self.maze, g)) for g in self.goals]
        negs = [enc.code_of_obs(M.render(self.maze, g)) for g in self.negative_goals]
        return list(dict.fromkeys(codes)), [n for n in dict.fromkeys(negs) if n not in codes]

    def rollout(self):
        def go():
            path = self.ws.path("rollout")
            if path.exists():
                return B.load_archive(path)
            enc, model = self.train()
            goals, negs = self.goal_codes()
            if self.cfg.mode == "oracle" or self.cfg.wm.project == "none":
                sampler = model.sampler()
            else:
                sampler = model.sampler(B.reencode_projection(enc))
            if self.cfg.mode == "learned" and self.cfg.wm.gate == "data":
                cells = {}

                def code_of_cell(cell):
                    if cell not in cells:
                        cells[cell] = enc.code_of_obs(M.render(self.maze, cell))
                    return cells[cell]

                sampler = B.support_gate(sampler, *B.data_support(self.collect(), code_of_cell,
                                                                           self.cfg.wm.moves_only))
            archive = B.backward_rollouts(sampler, goals + negs, self.cfg.wm.rollouts,
                                          self.cfg.wm.horizon, stage_rng(self.cfg, "rollout"), self.shape)
            _atomic(path, lambda p: B.save_archive(p, archive))
            return archive
        return self._run("rollout", go)

    def graph(self):
        def go():
            archive = self.rollout()
            goals, negs = self.goal_codes()
            graph = G.build_graph(archive, goals, negs, self.cfg.graph.min_count)
            spe = G.compute_spe(graph, blocked=graph.negative_goals)
            dataset = G.filter_dataset(graph, spe, archive)
            if negs:
                labels = G.negative_goal_labels(graph, spe, negs, archive)
                G.apply_negative_labels(dataset, labels, archive)
            _atomic(self.ws.path("graph"), lambda p: G.dump_graph(p, graph, spe))
            _atomic(self.ws.path("graph", "dataset"), lambda p: G.save_dataset(p, dataset))
            return graph, spe, dataset
        return self._run("graph", go)

    def distill(self):
        def go():
            c = self.cfg
            rng = stage_rng(c, "distill")
            net = P.PolicyNet(self.shape, rng, hidden=c.policy.hidden)
            path = self.ws.path("distill")
            if path.exists():
                nn.load_into(net.params, T.load_tensors(path))
                return net
            dpath = self.ws.path("graph", "dataset")
            dataset = G.load_dataset(dpath, self.shape.g) if dpath.exists() else self.graph()[2]
            pcfg = P.PolicyTrainConfig(c1=c.policy.c1, avoid_weight=c.policy.avoid_weight,
                                       epochs=c.policy.epochs, batch_size=c.policy.batch, lr=c.policy.lr)
            P.train_policy(net, dataset, pcfg, rng)
            _atomic(path, lambda p: T.save_tensors(p, {k: v.data for k, v in net.params.items()}))
            return net
        return self._run("distill", go)

    def evaluate(self):
        def go():
            enc, _ = self.train()
            net = self.distill()
            report = evaluate_policy(self.maze, enc, net, self.goals, self.cfg.eval.trials, self.cfg.eval.slack)
            root = self.ws.root
            _atomic(root / "report.txt", lambda p: p.write_text(self.report_text(report), encoding="utf-8"))
            _atomic(root / "stats.tsv", lambda p: write_stats(p, self.stats_rows(report)))
            _atomic(root / "heatmap.ppm", lambda p: emit_heatmap(self.maze, report, self.goals, p))
            return report
        return self._run("eval", go)

    def stats_rows(self, report):
        rows = [("mode", self.cfg.mode), ("seed", self.cfg.seed), ("model_seed", self.cfg.effective_model_seed),
                ("config_hash", self.cfg.digest(STAGE_KEYS["eval"]))]
        if "graph" in self._cache:
            graph, spe, dataset = self._cache["graph"]
            st = G.graph_stats(graph, spe)
            rows += [("graph_nodes", st["nodes"]), ("graph_edges", st["edges"]),
                     ("graph_reachable_fraction", f"{st['reachable_fraction']:.4f}"),
                     ("graph_max_spe", st["max_spe"]), ("dataset_pairs", len(dataset.pairs)),
                     ("dataset_avoid", len(dataset.avoid)), ("dataset_conflicts", dataset.conflicts)]
        return rows + report.stats()

    def report_text(self, report):
        c = self.cfg
        lines = [
            f"# mode={c.mode} seed={c.seed} model_seed={c.effective_model_seed} "
            f"config={c.digest(STAGE_KEYS['eval'])}",
            "# runs vary the master seed (rollouts + distillation); "
            "data and world model follow model_seed",
            f"# success = goal reached within ceil({c.eval.slack:g} x shortest distance), "
            f"{c.eval.trials} trials per free cell",
            "",
            report_table([report]),
            f"mean episode length: {report.mean_length:.2f}",
            "per-goal successes: " + ", ".join(f"{g}: {n / report.trials:.1f}" for g, n in report.per_goal().items()),
        ]
        return "\n".join(lines) + "\n"

    def run(self):
        for stage in ("collect", "train", "rollout", "graph", "distill"):
            getattr(self, stage)()
        return self.evaluate()


def run_pipeline(cfg):
    """Run every stage (resuming from stored artifacts) under a per-directory lock."""
    from filelock import FileLock, Timeout

    Path(cfg.out).mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(Path(cfg.out) / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout as exc:
        raise ConfigError(f"output directory {cfg.out} is in use by another process") from exc
    try:
        return Pipeline(cfg).run()
    finally:
        lock.release()
