"""Directed graph over latent codes, Dijkstra shortest-path estimates, and dataset filtering."""
from __future__ import annotations

import heapq
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

UNREACHABLE = -1
POSITIVE, AVOID = "positive", "avoid"


@dataclass
class GoalGraph:
    """Forward-oriented edges ``u --a--> v`` with provenance counts."""

    codes: list = field(default_factory=list)
    node_id: dict = field(default_factory=dict)
    edges: dict = field(default_factory=dict)  # (u, a, v) -> count
    goals: list = field(default_factory=list)
    negative_goals: list = field(default_factory=list)

    def add_node(self, code):
        i = self.node_id.get(code)
        if i is None:
            i = self.node_id[code] = len(self.codes)
            self.codes.append(code)
        return i

    def __len__(self):
        return len(self.codes)

    def reverse_adjacency(self):
        radj = [[] for _ in self.codes]
        for u, _, v in self.edges:
            radj[v].append(u)
        return radj


def build_graph(archive, goals, negative_goals=(), min_count=1):
    """Nodes are all archived codes; edges are forward triples seen at least ``min_count`` times.

    A triple sampled only once is the typical signature of a wrong predecessor
    from a learned model, and a single wrong shortcut corrupts every SPE behind it.
    """
    if min_count < 1:
        raise ConfigError("min_count must be >= 1")
    if not goals:
        raise ConfigError("at least one goal is required")
    overlap = set(goals) & set(negative_goals)
    if overlap:
        raise ConfigError(f"codes are both goal and negative goal: {[c.hex() for c in overlap]}")
    known = set(archive.visits)
    for label, group in (("goal", goals), ("negative goal", negative_goals)):
        for code in group:
            if code not in known:
                raise ConfigError(f"{label} {code.hex()} does not appear in the rollout archive")
    graph = GoalGraph()
    for code in archive.visits:
        graph.add_node(code)
    for prev, a, z in archive.transitions:
        key = (graph.add_node(prev), a, graph.add_node(z))
        graph.edges[key] = graph.edges.get(key, 0) + 1
    if min_count > 1:
        graph.edges = {k: n for k, n in graph.edges.items() if n >= min_count}
    graph.goals = [graph.node_id[c] for c in dict.fromkeys(goals)]
    graph.negative_goals = [graph.node_id[c] for c in dict.fromkeys(negative_goals)]
    return graph


def compute_spe(graph, sources=None, blocked=()):
    """Unit-weight multi-source Dijkstra toward ``sources`` (default: the goals).

    Distances follow forward edges, so the search runs over reversed edges.
    ``blocked`` nodes are never entered; they stay UNREACHABLE.
    """
    sources = graph.goals if sources is None else sources
    radj = graph.reverse_adjacency()
    blocked = set(blocked)
    n = len(graph)
    done = [False] * n
    best = [None] * n
    for b in blocked:
        done[b] = True
    heap = []
    for s in sources:
        if not done[s] and best[s] is None:
            best[s] = 0
            heap.append((0, s))
    heapq.heapify(heap)
    while heap:
        d, v = heapq.heappop(heap)
        if done[v]:
            continue
        done[v] = True
        for u in radj[v]:
            if not done[u] and (best[u] is None or d + 1 < best[u]):
                best[u] = d + 1
                heapq.heappush(heap, (d + 1, u))
    dist = np.full(n, UNREACHABLE, dtype=np.int64)
    for v in range(n):
        if best[v] is not None and v not in blocked:
            dist[v] = best[v]
    return dist


def closer(spe, u, v):
    return spe[u] != UNREACHABLE and spe[v] != UNREACHABLE and spe[u] > spe[v]


@dataclass
class ImitationDataset:
    """Deduplicated (code, action) pairs with provenance counts, in first-seen order."""

    pairs: dict = field(default_factory=dict)  # (code, action) -> count
    avoid: dict = field(default_factory=dict)  # (code, action) -> count
    conflicts: int = 0

    def __len__(self):
        return len(self.pairs)


def filter_dataset(graph, spe, archive):
    """Keep (z, a) from every archived triple (z, a, z') that is a graph edge and lowers the SPE."""
    data = ImitationDataset()
    nid = graph.node_id
    for prev, a, z in archive.transitions:
        u, v = nid[prev], nid[z]
        if (u, a, v) in graph.edges and closer(spe, u, v):
            key = (prev, a)
            data.pairs[key] = data.pairs.get(key, 0) + 1
    return data


def negative_goal_labels(graph, spe_pos, negative_goals, archive):
    """Positive/avoid labels once negative goals are in play.

    Nodes that reach both a goal and a negative goal keep the ordinary SPE
    rule (``spe_pos`` should come from a search that never enters negative
    goals). Nodes that cannot reach any goal get avoid labels for actions that
    move them closer to a negative goal. Returns ``(code, action, label)``.
    """
    if not negative_goals:
        return []
    nid = graph.node_id
    neg_ids = [nid[c] for c in negative_goals]
    spe_neg = compute_spe(graph, sources=neg_ids)
    labels = {}
    for prev, a, z in archive.transitions:
        u, v = nid[prev], nid[z]
        key = (prev, a)
        if (u, a, v) not in graph.edges:
            continue
        if spe_pos[u] != UNREACHABLE and spe_neg[u] != UNREACHABLE:
            if closer(spe_pos, u, v) and labels.get(key) != AVOID:
                labels[key] = POSITIVE
        elif spe_pos[u] == UNREACHABLE and closer(spe_neg, u, v):
            labels[key] = AVOID
    return [(code, a, lab) for (code, a), lab in labels.items()]


def apply_negative_labels(dataset, labels, archive):
    """Fold avoid labels into ``dataset``; a pair that is both included and avoided is dropped."""
    counts = Counter((p, a) for p, a, _ in archive.transitions)
    for code, a, lab in labels:
        if lab != AVOID:
            continue
        key = (code, a)
        if key in dataset.pairs:
            del dataset.pairs[key]
            dataset.conflicts += 1
        dataset.avoid[key] = counts[key]
    return dataset


def graph_stats(graph, spe):
    reach = spe != UNREACHABLE
    hist = Counter(int(d) for d in spe[reach])
    return {
        "nodes": len(graph),
        "edges": len(graph.edges),
        "goals": len(graph.goals),
        "negative_goals": len(graph.negative_goals),
        "reachable_fraction": float(reach.mean()) if len(graph) else 0.0,
        "max_spe": int(spe[reach].max()) if reach.any() else UNREACHABLE,
        "spe_histogram": dict(sorted(hist.items())),
    }


# files

def dump_graph(path, graph, spe):
    """Text edge list: ``from_hex to_hex action spe_from spe_to`` after goal header lines."""
    lines = [f"#goal {graph.codes[g].hex()}" for g in graph.goals]
    lines += [f"#neg {graph.codes[g].hex()}" for g in graph.negative_goals]
    for (u, a, v) in graph.edges:
        lines.append(f"{graph.codes[u].hex()} {graph.codes[v].hex()} {a} {spe[u]} {spe[v]}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_graph_dump(path):
    graph, goals, negs, spe = GoalGraph(), [], [], {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "#goal":
                goals.append(graph.add_node(bytes.fromhex(parts[1])))
            elif parts[0] == "#neg":
                negs.append(graph.add_node(bytes.fromhex(parts[1])))
            else:
                u = graph.add_node(bytes.fromhex(parts[0]))
                v = graph.add_node(bytes.fromhex(parts[1]))
                graph.edges[(u, int(parts[2]), v)] = 1
                spe[u], spe[v] = int(parts[3]), int(parts[4])
    graph.goals, graph.negative_goals = goals, negs
    arr = np.array([spe.get(i, 0 if i in goals else UNREACHABLE) for i in range(len(graph))], dtype=np.int64)
    return graph, arr


_DATASET_MAGIC = b"BTD1"


def save_dataset(path, dataset):
    """BTD1: u32 pair count, then per pair (g code bytes, u8 action, u32 count).

    Avoid-labelled pairs follow in a second block of the same layout.
    """
    with open(path, "wb") as fh:
        fh.write(_DATASET_MAGIC)
        for block in (dataset.pairs, dataset.avoid):
            fh.write(struct.pack("<I", len(block)))
            for (code, a), n in block.items():
                fh.write(code)
                fh.write(struct.pack("<BI", a, n))


def load_dataset(path, g):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _DATASET_MAGIC:
        raise ValueError(f"{path}: not a BTD1 dataset file")
    off = 4
    blocks = []
    for _ in range(2):
        if off >= len(buf):
            blocks.append({})
            continue
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        block = {}
        for _ in range(n):
            code = buf[off:off + g]
            a, cnt = struct.unpack_from("<BI", buf, off + g)
            off += g + 5
            block[(code, a)] = cnt
        blocks.append(block)
    return ImitationDataset(blocks[0], blocks[1])
