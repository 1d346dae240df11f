"""Grid maze: generation, dynamics, rendering, random data collection, BFS distances."""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

UP, RIGHT, DOWN, LEFT = range(4)
NUM_ACTIONS = 4
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))
OBS_SIZE = 64
EPISODE_LEN = 20

WALL_RGB = (1.0, 1.0, 1.0)
FLOOR_RGB = (0.0, 0.0, 0.0)
AGENT_RGB = (0.0, 1.0, 0.0)


@dataclass(frozen=True)
class Maze:
    width: int
    height: int
    walls: np.ndarray  # (height, width) bool, True = wall
    seed: int
    free_cells: tuple = field(init=False)

    def __post_init__(self):
        rows, cols = np.nonzero(~self.walls)
        object.__setattr__(self, "free_cells", tuple(zip(rows.tolist(), cols.tolist())))

    def is_free(self, pos):
        r, c = pos
        return 0 <= r < self.height and 0 <= c < self.width and not self.walls[r, c]

    def index(self, pos):
        return pos[0] * self.width + pos[1]

    def cell(self, index):
        return divmod(int(index), self.width)

    def corners(self):
        """Free cells in the four corners: top-left, top-right, bottom-left, bottom-right."""
        h, w = self.height, self.width
        return [(1, 1), (1, w - 2), (h - 2, 1), (h - 2, w - 2)]


def generate_maze(width, height, seed):
    """Perfect maze by randomized depth-first search (recursive backtracker).

    Cells sit on odd coordinates; even rows/columns are wall lattice lines that
    get carved where the spanning tree connects two cells.
    """
    if width < 5 or height < 5:
        raise ConfigError(f"maze must be at least 5x5, got {width}x{height}")
    if width % 2 == 0 or height % 2 == 0:
        raise ConfigError(f"maze sizes must be odd, got {width}x{height}")
    rng = np.random.default_rng(seed)
    walls = np.ones((height, width), dtype=bool)
    start = (1, 1)
    walls[start] = False
    stack = [start]
    while stack:
        r, c = stack[-1]
        options = []
        for dr, dc in MOVES:
            nr, nc = r + 2 * dr, c + 2 * dc
            if 0 < nr < height - 1 and 0 < nc < width - 1 and walls[nr, nc]:
                options.append((nr, nc, dr, dc))
        if not options:
            stack.pop()
            continue
        nr, nc, dr, dc = options[rng.integers(len(options))]
        walls[r + dr, c + dc] = False
        walls[nr, nc] = False
        stack.append((nr, nc))
    walls.setflags(write=False)
    return Maze(width, height, walls, seed)


def step(maze, pos, action):
    if not maze.is_free(pos):
        raise ContractError(f"position {pos} is not a free cell")
    dr, dc = MOVES[action]
    nxt = (pos[0] + dr, pos[1] + dc)
    return nxt if maze.is_free(nxt) else pos


def cell_pixels(maze):
    return OBS_SIZE // max(maze.width, maze.height)


def render(maze, pos):
    """64x64x3 bird's-eye image in [0, 1]: white walls, black floor, green agent."""
    px = cell_pixels(maze)
    img = np.zeros((OBS_SIZE, OBS_SIZE, 3))
    block = np.kron(maze.walls, np.ones((px, px), dtype=bool))
    img[: block.shape[0], : block.shape[1]][block] = WALL_RGB
    r, c = pos
    img[r * px:(r + 1) * px, c * px:(c + 1) * px] = AGENT_RGB
    return img


def pooled_gray(obs, size=16):
    """Channel-mean grayscale, mean-pooled to ``size`` x ``size``; flattened."""
    gray = obs.mean(axis=-1)
    k = gray.shape[0] // size
    return gray.reshape(size, k, size, k).mean(axis=(1, 3)).ravel()


@dataclass
class EpisodeLog:
    positions: list  # (pos, action, next_pos) triples

    def __len__(self):
        return len(self.positions)

    def observations(self, maze):
        return [render(maze, p) for p, _, _ in self.positions] + [render(maze, self.positions[-1][2])]


def collect_random_data(maze, episodes, rng, length=EPISODE_LEN):
    """Uniform random start cell, then ``length`` uniform random actions per episode."""
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    free = maze.free_cells
    logs = []
    for _ in range(episodes):
        pos = free[rng.integers(len(free))]
        steps = []
        for a in rng.integers(NUM_ACTIONS, size=length).tolist():
            nxt = step(maze, pos, a)
            steps.append((pos, a, nxt))
            pos = nxt
        logs.append(EpisodeLog(steps))
    return logs


def bfs_distances(maze, sources):
    """Steps from every cell to the nearest source (-1 for walls/unreachable)."""
    dist = np.full((maze.height, maze.width), -1, dtype=np.int64)
    queue = deque()
    for s in sources:
        if dist[s] != 0:
            dist[s] = 0
            queue.append(s)
    while queue:
        r, c = queue.popleft()
        for dr, dc in MOVES:
            n = (r + dr, c + dc)
            if maze.is_free(n) and dist[n] < 0:
                dist[n] = dist[r, c] + 1
                queue.append(n)
    return dist


def true_shortest_distance(maze, start, targets):
    """BFS steps from ``start`` to the nearest target; ``inf`` if none reachable."""
    targets = list(targets)
    if not targets:
        raise ContractError("target set is empty")
    d = bfs_distances(maze, targets)[start]
    return float("inf") if d < 0 else int(d)


_EPISODE_MAGIC = b"BTE1"


def save_episodes(path, maze, logs):
    with open(path, "wb") as fh:
        fh.write(_EPISODE_MAGIC)
        fh.write(struct.pack("<qHHI", maze.seed, maze.width, maze.height, len(logs)))
        for log in logs:
            fh.write(struct.pack("<H", len(log)))
            for pos, a, nxt in log.positions:
                fh.write(struct.pack("<HBH", maze.index(pos), a, maze.index(nxt)))


def load_episodes(path):
    """Returns ``(maze, logs)``; the maze is regenerated from the stored seed."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _EPISODE_MAGIC:
        raise ValueError(f"{path}: not a BTE1 episode file")
    seed, width, height, count = struct.unpack_from("<qHHI", buf, 4)
    off = 4 + struct.calcsize("<qHHI")
    maze = generate_maze(width, height, seed)
    logs = []
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        steps = []
        for _ in range(n):
            i, a, j = struct.unpack_from("<HBH", buf, off)
            off += 5
            steps.append((maze.cell(i), a, maze.cell(j)))
        logs.append(EpisodeLog(steps))
    return maze, logs
