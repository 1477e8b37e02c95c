"""Graph data model, batching, JSONL storage, the motif OOD generator and
structural-cluster splitting."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, ParseError, SplitError, ValidationError

MAX_DEGREE_BIN = 5
NOISE_CHANNELS = 2
FEATURE_WIDTH = MAX_DEGREE_BIN + 1 + NOISE_CHANNELS


@dataclass(eq=False)
class Graph:
    num_nodes: int
    features: np.ndarray  # [num_nodes, F]
    edges: np.ndarray  # [E, 2] undirected, each pair once
    labels: np.ndarray  # [T], nan marks a missing label
    structure_key: int = 0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            self.features = self.features.reshape(self.num_nodes, -1)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.float64).reshape(-1)
        self.structure_key = int(self.structure_key)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_width(self) -> int:
        return self.features.shape[1]

    @property
    def task_count(self) -> int:
        return len(self.labels)

    def validate(self) -> None:
        if self.num_nodes < 1:
            raise ValidationError("graph needs at least one node")
        if len(self.edges):
            if self.edges.min() < 0 or self.edges.max() >= self.num_nodes:
                raise ValidationError(f"edge endpoint out of range for {self.num_nodes} nodes")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ValidationError("self-loop")
            canon = np.sort(self.edges, axis=1)
            if len(np.unique(canon, axis=0)) != len(canon):
                raise ValidationError("duplicate undirected edge")
        bad = ~np.isnan(self.labels) & (self.labels != 0) & (self.labels != 1)
        if bad.any():
            raise ValidationError(f"labels must be 0, 1 or missing, got {self.labels[bad][0]}")

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.reshape(-1), minlength=self.num_nodes)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and self.structure_key == other.structure_key
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.labels, other.labels, equal_nan=True)
        )


@dataclass(frozen=True)
class DatasetSplit:
    train: list
    validation: list
    test: list

    def check(self, graphs: Sequence[Graph] | None = None, n: int | None = None) -> None:
        parts = [set(self.train), set(self.validation), set(self.test)]
        if sum(map(len, parts)) != len(set().union(*parts)):
            raise SplitError("splits overlap")
        total = len(graphs) if graphs is not None else n
        if total is not None and set().union(*parts) != set(range(total)):
            raise SplitError("splits do not cover the dataset")
        if graphs is not None:
            keys = [{graphs[i].structure_key for i in p} for p in parts]
            if keys[0] & keys[1] or keys[0] & keys[2] or keys[1] & keys[2]:
                raise SplitError("a structure key crosses split boundaries")


# ---------------------------------------------------------------- batching


class GraphBatch:
    """Disjoint union of graphs.

    Undirected pairs are canonicalised to ``(min, max)`` global node ids and
    expanded into two directed edges that share one pair id, so one edge
    weight governs both message directions.
    """

    def __init__(self, graphs: Sequence[Graph]):
        if not graphs:
            raise ContractError("cannot batch an empty list of graphs")
        widths = {g.feature_width for g in graphs}
        if len(widths) != 1:
            raise ValidationError(f"feature widths differ across graphs: {sorted(widths)}")
        tasks = {g.task_count for g in graphs}
        if len(tasks) != 1:
            raise ValidationError(f"task counts differ across graphs: {sorted(tasks)}")
        sizes = np.array([g.num_nodes for g in graphs])
        self.num_graphs = len(graphs)
        self.node_offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.num_nodes = int(self.node_offsets[-1])
        self.x = np.concatenate([g.features for g in graphs], axis=0)
        self.node_to_graph = np.repeat(np.arange(self.num_graphs), sizes)
        pairs = [np.sort(g.edges, axis=1) + off for g, off in zip(graphs, self.node_offsets[:-1])]
        self.pair_offsets = np.concatenate([[0], np.cumsum([len(p) for p in pairs])])
        self.pairs = np.concatenate(pairs, axis=0).astype(np.int64) if pairs else np.zeros((0, 2), np.int64)
        self.pair_to_graph = np.repeat(np.arange(self.num_graphs), np.diff(self.pair_offsets))
        p = len(self.pairs)
        self.src = np.concatenate([self.pairs[:, 0], self.pairs[:, 1]])
        self.dst = np.concatenate([self.pairs[:, 1], self.pairs[:, 0]])
        self.edge_pair = np.concatenate([np.arange(p), np.arange(p)])
        self.labels = np.stack([g.labels for g in graphs])
        self.label_mask = ~np.isnan(self.labels)
        self.graph_sizes = sizes

    @property
    def num_pairs(self) -> int:
        return len(self.pairs)

    @property
    def num_directed_edges(self) -> int:
        return len(self.src)

    def graph_slice(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Features and local-id edges of graph ``i``."""
        lo, hi = self.node_offsets[i], self.node_offsets[i + 1]
        plo, phi = self.pair_offsets[i], self.pair_offsets[i + 1]
        return self.x[lo:hi], self.pairs[plo:phi] - lo


def batch_graphs(graphs: Sequence[Graph]) -> GraphBatch:
    return GraphBatch(graphs)


# ---------------------------------------------------------------- JSONL format


def graph_to_json(g: Graph) -> dict:
    return {
        "num_nodes": int(g.num_nodes),
        "features": g.features.tolist(),
        "edges": g.edges.tolist(),
        "labels": [None if math.isnan(v) else int(v) for v in g.labels],
        "structure_key": int(g.structure_key),
    }


def graph_from_json(obj: dict) -> Graph:
    for key in ("num_nodes", "features", "edges", "labels"):
        if key not in obj:
            raise ValueError(f"missing key {key!r}")
    n = int(obj["num_nodes"])
    feats = np.asarray(obj["features"], dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != n:
        raise ValidationError(f"features must have {n} rows, got shape {feats.shape}")
    labels = [np.nan if v is None else float(v) for v in obj["labels"]]
    return Graph(n, feats, np.asarray(obj["edges"], dtype=np.int64).reshape(-1, 2), labels, obj.get("structure_key", 0))


def load_jsonl(path) -> list[Graph]:
    graphs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(str(exc), line=lineno) from None
            if not isinstance(obj, dict):
                raise ParseError("expected a JSON object", line=lineno)
            try:
                g = graph_from_json(obj)
            except ValidationError as exc:
                raise ValidationError(f"graph {len(graphs)} (line {lineno}): {exc}") from None
            except (ValueError, TypeError) as exc:
                raise ParseError(str(exc), line=lineno) from None
            try:
                g.validate()
            except ValidationError as exc:
                raise ValidationError(f"graph {len(graphs)} (line {lineno}): {exc}") from None
            graphs.append(g)
    return graphs


def write_jsonl(path, graphs: Sequence[Graph]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(json.dumps(graph_to_json(g)) + "\n")


def metadata_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def write_dataset(path, graphs: Sequence[Graph], generator_seed=None, shift_profile=None) -> Path:
    """Write graphs as JSONL plus the ``<stem>.meta.json`` sidecar."""
    write_jsonl(path, graphs)
    meta = {
        "task_count": graphs[0].task_count if graphs else 0,
        "feature_width": graphs[0].feature_width if graphs else 0,
        "generator_seed": generator_seed,
        "shift_profile": asdict(shift_profile) if isinstance(shift_profile, ShiftProfile) else shift_profile,
    }
    side = metadata_path(path)
    side.write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return side


# ---------------------------------------------------------------- synthetic motif benchmark


@dataclass(frozen=True)
class ShiftProfile:
    """Train/test populations of the motif benchmark.

    Sizes are backbone node counts (inclusive).  Attach styles: ``edge`` hangs
    a motif off the backbone by one bridging edge, ``fuse`` makes a backbone
    leaf part of the motif.
    """

    size_range_train: tuple = (6, 14)
    size_range_test: tuple = (16, 30)
    attach_style_train: str = "edge"
    attach_style_test: str = "fuse"
    cycle_len_range: tuple = (4, 10)
    cycle_len_range_test: tuple | None = None
    task_count: int = 2
    max_components: int = 3
    chain_prob: float = 0.5
    shifted_fraction: float = 0.2

    @property
    def test_cycle_range(self) -> tuple:
        return tuple(self.cycle_len_range_test or self.cycle_len_range)

    def validate(self) -> None:
        for name in ("size_range_train", "size_range_test"):
            lo, hi = getattr(self, name)
            if lo < 4 or hi < lo:
                raise ConfigError(f"{name}={getattr(self, name)}: need 4 <= low <= high")
            if self.cycle_len_range[0] > hi:
                raise ConfigError(f"cycle length {self.cycle_len_range[0]} exceeds max size {hi} of {name}")
        for lo, hi in (self.cycle_len_range, self.test_cycle_range):
            if lo < 4 or hi < lo:
                raise ConfigError(f"cycle length range {(lo, hi)}: chordless cycles need length >= 4")
        if self.test_cycle_range[0] > self.size_range_test[1]:
            raise ConfigError("shifted cycle length exceeds max size of size_range_test")
        for style in (self.attach_style_train, self.attach_style_test):
            if style not in ("edge", "fuse"):
                raise ConfigError(f"unknown attach style {style!r}")
        if self.task_count < 1:
            raise ConfigError("task_count must be >= 1")
        if self.max_components < 1:
            raise ConfigError("max_components must be >= 1")
        if not 0 <= self.chain_prob <= 1:
            raise ConfigError("chain_prob must be in [0, 1]")
        if not 0 < self.shifted_fraction < 1:
            raise ConfigError("shifted_fraction must be in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "ShiftProfile":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown shift profile keys: {sorted(unknown)}")
        for k in ("size_range_train", "size_range_test", "cycle_len_range", "cycle_len_range_test"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)


def degree_sequence_key(edges: np.ndarray, num_nodes: int) -> int:
    degs = np.sort(np.bincount(np.asarray(edges).reshape(-1), minlength=num_nodes))
    digest = hashlib.sha1(",".join(map(str, degs)).encode()).digest()
    return int.from_bytes(digest[:7], "big")


def _random_forest(rng, n: int, components: int = 1, max_degree: int = 3) -> list[tuple[int, int]]:
    """Random forest on ``n`` nodes: ``components`` trees of at least two
    nodes each, node degrees capped at ``max_degree``."""
    sizes = 2 + rng.multinomial(n - 2 * components, np.full(components, 1.0 / components))
    starts = [0, *np.cumsum(sizes).tolist()]
    deg = np.zeros(n, dtype=np.int64)
    edges = []
    for lo, hi in zip(starts, starts[1:]):
        for k in range(lo + 1, hi):
            open_ = lo + np.flatnonzero(deg[lo:k] < max_degree)
            u = int(rng.choice(open_))
            edges.append((u, k))
            deg[u] += 1
            deg[k] += 1
    return edges


def _pick(rng, deg, limit):
    cand = np.flatnonzero(np.asarray(deg) <= limit)
    return int(rng.choice(cand))


def degree_features(num_nodes: int, edges, rng) -> np.ndarray:
    deg = np.bincount(np.asarray(edges, dtype=np.int64).reshape(-1), minlength=num_nodes)
    onehot = np.eye(MAX_DEGREE_BIN + 1)[np.minimum(deg, MAX_DEGREE_BIN)]
    noise = rng.random((num_nodes, NOISE_CHANNELS))
    return np.concatenate([onehot, noise], axis=1)


def make_motif_graph(rng, size_range, attach_style, profile: ShiftProfile, cycle_range=None) -> Graph:
    cycle_range = cycle_range or profile.cycle_len_range
    n = int(rng.integers(size_range[0], size_range[1] + 1))
    components = int(rng.integers(1, min(profile.max_components, n // 2) + 1))
    edges = _random_forest(rng, n, components)
    deg = list(np.bincount(np.array(edges).reshape(-1), minlength=n))
    num = n

    def new_node():
        nonlocal num
        deg.append(0)
        num += 1
        return num - 1

    def link(u, v):
        edges.append((u, v))
        deg[u] += 1
        deg[v] += 1

    # pendant chain as long as a cycle: degree-2 runs alone must not reveal the label
    if rng.random() < profile.chain_prob:
        prev = _pick(rng, deg[:n], 2)
        for _ in range(int(rng.integers(cycle_range[0], cycle_range[1] + 1))):
            nxt = new_node()
            link(prev, nxt)
            prev = nxt
    n = num
    key = degree_sequence_key(np.array(edges), n)

    has_cycle = rng.random() < 0.5
    if has_cycle:
        length = int(rng.integers(cycle_range[0], cycle_range[1] + 1))
        if attach_style == "edge":
            anchor = _pick(rng, deg[:n], 2)
            ring = [new_node() for _ in range(length)]
            link(anchor, ring[0])
        else:
            anchor = _pick(rng, deg[:n], 1)
            ring = [anchor] + [new_node() for _ in range(length - 1)]
        for a, b in zip(ring, ring[1:] + ring[:1]):
            link(a, b)

    for t in range(1, profile.task_count):
        if rng.random() < 0.5:
            star_degree = t + 3
            if attach_style == "edge":
                anchor = _pick(rng, deg[:n], 2)
                center = new_node()
                link(anchor, center)
            else:
                center = _pick(rng, deg[:n], 2)
            while deg[center] < star_degree:
                link(center, new_node())

    perm = rng.permutation(num)
    e = perm[np.array(edges, dtype=np.int64)]
    final_deg = np.bincount(e.reshape(-1), minlength=num)
    labels = [1.0 if has_cycle else 0.0]
    labels += [1.0 if final_deg.max() >= t + 3 else 0.0 for t in range(1, profile.task_count)]
    feats = degree_features(num, e, rng)
    return Graph(num, feats, e, labels, key)


def generate_motif_ood_dataset(seed: int, n_graphs: int, shift_profile: ShiftProfile | None = None):
    """Random tree backbones (a forest of up to ``max_components`` trees, so
    the edge count alone does not reveal a cycle) with planted motifs.  The
    last ``shifted_fraction`` of graphs come from the shifted population and
    land mostly in validation/test.

    Task 0 marks a planted chordless cycle, task ``t > 0`` a node of degree
    at least ``t + 3``.  Returns ``(graphs, split)``.
    """
    profile = shift_profile or ShiftProfile()
    profile.validate()
    if n_graphs < 50:
        raise ConfigError(f"n_graphs={n_graphs}: need at least 50")
    rng = np.random.default_rng(seed)
    n_shift = int(round(profile.shifted_fraction * n_graphs))
    graphs = [make_motif_graph(rng, profile.size_range_train, profile.attach_style_train, profile)
              for _ in range(n_graphs - n_shift)]
    graphs += [make_motif_graph(rng, profile.size_range_test, profile.attach_style_test, profile,
                                profile.test_cycle_range)
               for _ in range(n_shift)]
    return graphs, structural_cluster_split(graphs)


# ---------------------------------------------------------------- splitting


def structural_cluster_split(graphs: Sequence[Graph], ratio=(0.8, 0.1, 0.1)) -> DatasetSplit:
    """Whole clusters of equal ``structure_key`` go to one split.

    Clusters are visited largest first (ties by first appearance) and placed
    in train while the train cutoff is not exceeded, otherwise in validation
    while the train+validation cutoff is not exceeded, otherwise in test.
    """
    if abs(sum(ratio) - 1.0) > 1e-9 or min(ratio) < 0:
        raise ConfigError(f"split ratio {ratio} must be non-negative and sum to 1")
    clusters: dict[int, list[int]] = {}
    for i, g in enumerate(graphs):
        clusters.setdefault(g.structure_key, []).append(i)
    if len(clusters) < 3:
        raise SplitError(f"only {len(clusters)} structural clusters; need at least 3")
    n = len(graphs)
    train_cut = ratio[0] * n
    valid_cut = (ratio[0] + ratio[1]) * n
    ordered = sorted(clusters.values(), key=len, reverse=True)
    if len(ordered[0]) > train_cut:
        raise SplitError(f"largest cluster holds {len(ordered[0])} of {n} graphs, above the train quota")
    train, valid, test = [], [], []
    for members in ordered:
        if len(train) + len(members) <= train_cut:
            train.extend(members)
        elif len(train) + len(valid) + len(members) <= valid_cut:
            valid.extend(members)
        else:
            test.extend(members)
    if not valid or not test:
        raise SplitError(f"split left an empty part: {len(train)}/{len(valid)}/{len(test)}")
    return DatasetSplit(sorted(train), sorted(valid), sorted(test))


def has_cycle_dfs(num_nodes: int, edges) -> bool:
    """Iterative DFS cycle test for an undirected simple graph."""
    adj = [[] for _ in range(num_nodes)]
    for u, v in np.asarray(edges, dtype=np.int64).reshape(-1, 2):
        adj[u].append(v)
        adj[v].append(u)
    seen = [False] * num_nodes
    for root in range(num_nodes):
        if seen[root]:
            continue
        seen[root] = True
        stack = [(root, -1)]
        while stack:
            node, parent = stack.pop()
            for nb in adj[node]:
                if nb == parent:
                    continue
                if seen[nb]:
                    return True
                seen[nb] = True
                stack.append((nb, node))
    return False
