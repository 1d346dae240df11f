import math

import numpy as np
import pytest

from goalback import cli
from goalback import maze as M
from goalback import pipeline as PL
from goalback import policy as P
from goalback.config import PipelineConfig, load_config, parse_config, resolve_cells
from goalback.errors import ConfigError
from goalback.repr_model import LatentShape, OracleEncoder


def small_oracle_cfg(out, **over):
    cfg = PipelineConfig(mode="oracle", out=str(out))
    cfg.maze.size = 7
    cfg.data.episodes = 150
    cfg.wm.rollouts = 300
    cfg.wm.horizon = 20
    cfg.policy.epochs = 60
    for k, v in over.items():
        setattr(cfg, k, v)
    return cfg.validate()


# config

def test_parse_config_sections_and_comments():
    cfg = parse_config("seed = 4  # master\nwm.w_wm = 0.01\n\nmaze.size=9\ngoals = 1,1; 7,7\n")
    assert cfg.seed == 4 and cfg.wm.w_wm == 0.01 and cfg.maze.size == 9
    assert cfg.goals == "1,1; 7,7"
    again = parse_config(cfg.to_text())
    assert again.items() == cfg.items()


@pytest.mark.parametrize("text", [
    "nonsense", "bogus = 1", "maze.bogus = 1", "zzz.size = 1", "seed = abc",
    "eval.slack = 0.5", "eval.trials = 0", "mode = other", "policy.c1 = -1", "wm.project = maybe",
    "wm.gate = maybe", "graph.min_count = 0", "repr.lr_decay = step",
])
def test_bad_config_rejected(text):
    with pytest.raises(ConfigError):
        parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.cfg")


def test_resolve_cells():
    maze = M.generate_maze(11, 11, 0)
    assert resolve_cells("corners", maze) == maze.corners()
    assert resolve_cells("bottom-left", maze) == [maze.corners()[2]]
    assert resolve_cells("1,1; 1,1", maze) == [(1, 1)]
    assert resolve_cells("", maze) == []
    with pytest.raises(ConfigError):
        resolve_cells("0,0", maze)
    with pytest.raises(ConfigError):
        resolve_cells("1;1", maze)


def test_digest_tracks_effective_model_seed():
    a = PipelineConfig(seed=3)
    b = PipelineConfig(seed=3, model_seed=3)
    c = PipelineConfig(seed=4, model_seed=3)
    keys = PL.STAGE_KEYS["train"]
    assert a.digest(keys) == b.digest(keys) == c.digest(keys)
    assert a.digest(PL.STAGE_KEYS["rollout"]) != c.digest(PL.STAGE_KEYS["rollout"])


# evaluation

class FixedPolicy:
    """Stand-in policy net that always returns the same action."""

    n_actions = 4

    def __init__(self, action):
        self.action = action

    def probs(self, codes):
        p = np.zeros((len(codes), 4))
        p[:, self.action] = 1.0
        return p


class OptimalPolicy(FixedPolicy):
    def __init__(self, maze, enc, goals):
        self.maze, self.enc = maze, enc
        self.dist = M.bfs_distances(maze, goals)

    def probs(self, codes):
        out = np.zeros((len(codes), 4))
        for i, code in enumerate(codes):
            cell = self.enc.cell_of_code(code)
            nxt = [self.dist[M.step(self.maze, cell, a)] for a in range(4)]
            out[i, int(np.argmin(nxt))] = 1.0
        return out


def test_optimal_policy_scores_everything():
    maze = M.generate_maze(9, 9, 2)
    enc = OracleEncoder(maze, LatentShape())
    goals = maze.corners()
    rep = PL.evaluate_policy(maze, enc, OptimalPolicy(maze, enc, goals), goals, trials=2)
    assert rep.return_positions == len(maze.free_cells)
    assert rep.return_pct == 100.0
    assert rep.closest_pct == 100.0
    assert sum(rep.per_goal().values()) == 2 * len(maze.free_cells)


def test_budget_is_respected_and_goal_start_is_free_success():
    maze = M.generate_maze(9, 9, 2)
    enc = OracleEncoder(maze, LatentShape())
    goal = maze.corners()[0]
    rep = PL.evaluate_policy(maze, enc, FixedPolicy(M.UP), [goal], trials=1, slack=1.5)
    dist = M.bfs_distances(maze, [goal])
    budgets = [math.ceil(1.5 * dist[c]) for c in maze.free_cells]
    assert all(n <= b for n, b in zip(rep.lengths, budgets))
    assert rep.successes[goal] == 1
    assert rep.lengths[maze.free_cells.index(goal)] == 0
    assert all(0 <= s <= rep.trials for s in rep.successes.values())
    assert 0 <= rep.return_pct <= 100


def test_sample_mode_is_seeded():
    maze = M.generate_maze(7, 7, 1)
    enc = OracleEncoder(maze, LatentShape())
    net = P.PolicyNet(LatentShape(), np.random.default_rng(0), hidden=8)
    goals = [maze.corners()[0]]
    r1 = PL.evaluate_policy(maze, enc, net, goals, 2, mode="sample", rng=np.random.default_rng(5))
    r2 = PL.evaluate_policy(maze, enc, net, goals, 2, mode="sample", rng=np.random.default_rng(5))
    assert r1.successes == r2.successes and r1.lengths == r2.lengths


# heatmap and tables

def test_heatmap_format_and_colours(tmp_path):
    maze = M.generate_maze(7, 7, 0)
    goal = maze.corners()[0]
    report = PL.EvalReport((7, 7), [goal], 5, 1.5)
    full, empty = maze.free_cells[1], maze.free_cells[2]
    for c in maze.free_cells:
        report.successes[c] = 0
    report.successes[full] = 5
    path = tmp_path / "h.ppm"
    PL.emit_heatmap(maze, report, [goal], path, block=4)
    assert path.read_bytes().startswith(b"P6\n28 28\n255\n")
    img = PL.read_ppm(path)
    assert img.shape == (28, 28, 3)
    px = lambda cell: tuple(img[cell[0] * 4 + 1, cell[1] * 4 + 2])
    assert px((0, 0)) == (255, 255, 255)
    assert px(full) == (0, 255, 0)
    assert px(empty) == (255, 255, 255)
    assert px(goal) == PL.GOAL_COLORS[0]


def test_multi_goal_heatmap_uses_goal_hues(tmp_path):
    maze = M.generate_maze(7, 7, 0)
    goals = maze.corners()
    enc = OracleEncoder(maze, LatentShape())
    rep = PL.evaluate_policy(maze, enc, OptimalPolicy(maze, enc, goals), goals, trials=1)
    PL.emit_heatmap(maze, rep, goals, tmp_path / "h.ppm", block=1)
    img = PL.read_ppm(tmp_path / "h.ppm")
    goal_hues = {tuple(img[g]) for g in goals}
    assert len(goal_hues) == 4
    field_hues = {tuple(img[c]) for c in maze.free_cells if c not in goals}
    assert field_hues <= {PL.FIELD_COLORS[i] for i in range(1, 5)}


def test_fmt_ratio_matches_table_style():
    assert PL.fmt_ratio(207.1, 234) == "207.1 / 234 (89%)"
    assert PL.fmt_ratio(218.5, 234) == "218.5 / 234 (93%)"


def stats(rp, cp=0.0, goals="1,1", free=49):
    return {"maze_size": "11x11", "goals": goals, "free_cells": str(free),
            "return_positions": str(rp), "closest_positions": str(cp)}


def test_report_table_single_and_grouped():
    one = PL.report_table([stats(40.0)])
    lines = one.strip().splitlines()
    assert len(lines) == 3
    assert "40.0 / 49 (82%)" in lines[2]
    many = PL.report_table([stats(40.0), stats(42.0), stats(45.0, 44.0, "1,1;9,9"), stats(47.0, 47.0, "1,1;9,9")])
    rows = many.strip().splitlines()[2:]
    assert len(rows) == 2
    assert "41.0 / 49 (84%)" in rows[0] and "1.00" in rows[0]
    assert "45.5 / 46.0 (99%)" in rows[1]
    with pytest.raises(ValueError):
        PL.report_table([])


# end to end (oracle mode, small maze)

def test_oracle_run_and_resume(tmp_path):
    cfg = small_oracle_cfg(tmp_path / "run")
    rep = PL.run_pipeline(cfg)
    assert rep.return_pct >= 95.0
    out = tmp_path / "run"
    names = sorted(p.name.split("-", 1)[1] for p in out.iterdir() if "-" in p.name)
    assert names == ["archive.bta", "dataset.btd", "episodes.bte", "graph.txt", "policy.btw"]
    assert (out / "heatmap.ppm").read_bytes()[:2] == b"P6"
    first = (out / "report.txt").read_bytes()
    # a second run resumes from the stored artifacts and reproduces the report
    assert PL.run_pipeline(cfg).return_positions == rep.return_positions
    assert (out / "report.txt").read_bytes() == first
    st = PL.read_stats(out / "stats.tsv")
    assert st["mode"] == "oracle" and float(st["return_pct"]) == rep.return_pct


def test_determinism_across_directories(tmp_path):
    files = []
    for name in ("a", "b"):
        PL.run_pipeline(small_oracle_cfg(tmp_path / name, goals="corners", seed=2))
        d = tmp_path / name
        files.append({p.name: p.read_bytes() for p in d.iterdir() if p.is_file() and p.name != ".lock"})
    assert files[0] == files[1]


def test_stage_failure_names_stage(tmp_path):
    cfg = small_oracle_cfg(tmp_path / "r")
    pipe = PL.Pipeline(cfg)
    pipe.ws.path("collect").write_bytes(b"garbage")
    with pytest.raises(PL.StageError, match="collect"):
        pipe.run()


# CLI

def test_cli_exit_codes(tmp_path, capsys):
    out = tmp_path / "cli"
    base = ["--mode", "oracle", "--out", str(out), "--set", "maze.size=7", "--set", "data.episodes=100",
            "--set", "wm.rollouts=200", "--set", "wm.horizon=15", "--set", "policy.epochs=30"]
    assert cli.main(["run"] + base) == 0
    assert "Return positions" in capsys.readouterr().out
    assert cli.main(["report", str(out)]) == 0
    assert "7x7" in capsys.readouterr().out
    assert cli.main(["run", "--set", "maze.bogus=1", "--out", str(out)]) == 2
    assert cli.main(["run", "--set", "goals=0,0", "--out", str(out)]) == 2
    assert cli.main(["report", str(tmp_path / "missing")]) == 2
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("eval.slack = 0.2\n")
    assert cli.main(["eval", "--config", str(cfg)]) == 2
    broken = tmp_path / "broken"
    assert cli.main(["collect"] + base[:2] + ["--out", str(broken), "--set", "maze.size=7"]) == 0
    for p in broken.iterdir():
        if p.name.endswith("episodes.bte"):
            p.write_bytes(b"junk")
    assert cli.main(["train"] + base[:2] + ["--out", str(broken), "--set", "maze.size=7"]) == 3
    assert "stage 'collect' failed" in capsys.readouterr().err


def test_cli_stage_verbs(tmp_path, capsys):
    out = tmp_path / "stages"
    base = ["--mode", "oracle", "--out", str(out), "--set", "maze.size=7", "--set", "data.episodes=100",
            "--set", "wm.rollouts=100", "--set", "policy.epochs=20"]
    for verb in ("collect", "train", "rollout", "graph", "distill"):
        assert cli.main([verb] + base) == 0
    assert cli.main(["eval"] + base) == 0
    assert (out / "report.txt").exists()
