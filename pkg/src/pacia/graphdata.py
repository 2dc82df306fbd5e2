"""Graph and episode data model, JSON-lines ingestion, synthetic tasks."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

MAX_REJECTIONS = 1000


class TaskFileError(ValueError):
    """Malformed task file; message carries the 1-based line number."""


class InsufficientPoolError(ValueError):
    """A task pool is too small for the requested episode sizes."""


class InfeasibleSpecError(ValueError):
    """Synthetic generation could not satisfy its constraints."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MolecularGraph:
    """Undirected attributed graph; each edge is stored once as ``(u, v)``."""

    node_features: np.ndarray
    edges: np.ndarray
    edge_features: np.ndarray = ()

    def __post_init__(self):
        x = np.asarray(self.node_features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"node_features must be (n_nodes >= 1, d), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("node features contain NaN/Inf")
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        n = x.shape[0]
        for u, v in e:
            if not (0 <= u < n and 0 <= v < n):
                raise ValueError(f"edge ({u}, {v}) out of range for {n} nodes")
            if u == v:
                raise ValueError(f"self-loop on node {u}")
        ef = np.asarray(self.edge_features, dtype=np.float64)
        ef = ef.reshape(len(e), -1) if ef.size else np.zeros((len(e), 0))
        object.__setattr__(self, "node_features", _frozen(x))
        object.__setattr__(self, "edges", _frozen(e))
        object.__setattr__(self, "edge_features", _frozen(ef))

    @property
    def node_count(self) -> int:
        return self.node_features.shape[0]

    @property
    def edge_count(self) -> int:
        return self.edges.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.node_features.shape[1]

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.node_count, self.node_count))
        if self.edge_count:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def neighbors(self) -> List[set]:
        nbrs: List[set] = [set() for _ in range(self.node_count)]
        for u, v in self.edges:
            nbrs[u].add(int(v))
            nbrs[v].add(int(u))
        return nbrs

    def permuted(self, perm: Sequence[int]) -> "MolecularGraph":
        """Relabel nodes so that new node ``i`` is old node ``perm[i]``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return MolecularGraph(self.node_features[perm], inv[self.edges], self.edge_features)


@dataclass(frozen=True, eq=False)
class LabeledGraph:
    graph: MolecularGraph
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")

    @property
    def one_hot(self) -> np.ndarray:
        # [inactive, active]
        return np.array([1.0 - self.label, float(self.label)])


@dataclass(frozen=True, eq=False)
class Task:
    task_id: str
    pool: Tuple[LabeledGraph, ...]

    def __post_init__(self):
        object.__setattr__(self, "pool", tuple(self.pool))

    def class_indices(self, label: int) -> np.ndarray:
        return np.array([i for i, g in enumerate(self.pool) if g.label == label], dtype=np.int64)


@dataclass(frozen=True, eq=False)
class Episode:
    """One few-shot instance. Index arrays refer to positions in the task pool."""

    support: Tuple[LabeledGraph, ...]
    query: Tuple[LabeledGraph, ...]
    support_index: Tuple[int, ...] = ()
    query_index: Tuple[int, ...] = ()
    task_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "support", tuple(self.support))
        object.__setattr__(self, "query", tuple(self.query))
        if set(self.support_index) & set(self.query_index):
            raise ValueError("support and query overlap")

    @property
    def support_labels(self) -> np.ndarray:
        return np.array([g.label for g in self.support], dtype=np.int64)

    @property
    def query_labels(self) -> np.ndarray:
        return np.array([g.label for g in self.query], dtype=np.int64)

    @property
    def support_pos(self) -> List[int]:
        return [i for i, g in enumerate(self.support) if g.label == 1]

    @property
    def support_neg(self) -> List[int]:
        return [i for i, g in enumerate(self.support) if g.label == 0]


# ---------------------------------------------------------------------------
# ingestion


def _parse_graph(obj, lineno: int, gi: int) -> LabeledGraph:
    where = f"line {lineno}, graph {gi}"
    try:
        nodes = np.asarray(obj["nodes"], dtype=np.float64)
        raw_edges = obj.get("edges", [])
        label = obj["label"]
    except (KeyError, TypeError, ValueError) as err:
        raise TaskFileError(f"{where}: malformed graph ({err})") from None
    if nodes.ndim != 2 or nodes.shape[0] == 0:
        raise TaskFileError(f"{where}: 'nodes' must be a non-empty list of equal-length vectors")
    if label not in (0, 1) or isinstance(label, bool):
        raise TaskFileError(f"{where}: label must be 0 or 1, got {label!r}")
    n = nodes.shape[0]
    edges, efeats = [], []
    for ei, edge in enumerate(raw_edges):
        if not isinstance(edge, list) or len(edge) not in (2, 3):
            raise TaskFileError(f"{where}: edge {ei} must be [u, v] or [u, v, [features]]")
        u, v = edge[0], edge[1]
        if not (isinstance(u, int) and isinstance(v, int)) or not (0 <= u < n and 0 <= v < n):
            raise TaskFileError(f"{where}: edge {ei} ({u}, {v}) references a node outside 0..{n - 1}")
        if u == v:
            raise TaskFileError(f"{where}: edge {ei} is a self-loop on node {u}")
        edges.append((u, v))
        efeats.append(edge[2] if len(edge) == 3 else [])
    widths = {len(f) for f in efeats}
    if len(widths) > 1:
        raise TaskFileError(f"{where}: inconsistent edge feature dimensions {sorted(widths)}")
    try:
        graph = MolecularGraph(nodes, np.array(edges, dtype=np.int64).reshape(-1, 2), np.array(efeats, dtype=np.float64))
    except ValueError as err:
        raise TaskFileError(f"{where}: {err}") from None
    return LabeledGraph(graph, int(label))


def load_tasks(path) -> List[Task]:
    """Read one task per non-blank line of a JSON-lines file."""
    tasks: List[Task] = []
    dim: Optional[int] = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise TaskFileError(f"line {lineno}: invalid JSON ({err.msg})") from None
            if not isinstance(obj, dict) or "graphs" not in obj:
                raise TaskFileError(f"line {lineno}: expected an object with 'task_id' and 'graphs'")
            pool = [_parse_graph(g, lineno, gi) for gi, g in enumerate(obj["graphs"])]
            for gi, g in enumerate(pool):
                if dim is None:
                    dim = g.graph.feature_dim
                elif g.graph.feature_dim != dim:
                    raise TaskFileError(
                        f"line {lineno}, graph {gi}: node feature dimension {g.graph.feature_dim} != {dim}"
                    )
            tasks.append(Task(str(obj.get("task_id", f"task{lineno}")), pool))
    return tasks


def task_to_json(task: Task) -> str:
    graphs = []
    for lg in task.pool:
        g = lg.graph
        edges = [
            [int(u), int(v), [float(x) for x in g.edge_features[i]]] if g.edge_features.shape[1] else [int(u), int(v)]
            for i, (u, v) in enumerate(g.edges)
        ]
        graphs.append({"nodes": g.node_features.tolist(), "edges": edges, "label": lg.label})
    return json.dumps({"task_id": task.task_id, "graphs": graphs}, separators=(",", ":"))


def save_tasks(tasks: Iterable[Task], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in tasks:
            fh.write(task_to_json(t) + "\n")


# ---------------------------------------------------------------------------
# synthetic tasks

# pattern name -> (node count, edge list)
MOTIF_SHAPES: Dict[str, Tuple[int, Tuple[Tuple[int, int], ...]]] = {
    "triangle": (3, ((0, 1), (1, 2), (0, 2))),
    "square": (4, ((0, 1), (1, 2), (2, 3), (0, 3))),
    "star": (4, ((0, 1), (0, 2), (0, 3))),
    "path": (3, ((0, 1), (1, 2))),
}


@dataclass(frozen=True)
class MotifRule:
    """Active iff the graph contains ``shape`` with node ``i`` of type ``types[i]``."""

    shape: str
    types: Tuple[int, ...]

    def describe(self) -> str:
        return f"motif:{self.shape}:{'-'.join(map(str, self.types))}"


@dataclass(frozen=True)
class ThresholdRule:
    """Active iff ``weights . sum_v x_v > threshold``."""

    weights: Tuple[float, ...]
    threshold: float

    def describe(self) -> str:
        return f"threshold:{self.threshold:.4f}"


@dataclass(frozen=True)
class SyntheticSpec:
    d_in: int = 8
    min_nodes: int = 8
    max_nodes: int = 16
    n_types: int = 4
    extra_edge_prob: float = 0.1
    motif_fraction: float = 0.5
    shapes: Tuple[str, ...] = ("triangle", "square", "star", "path")

    def validate(self) -> None:
        problems = []
        if self.n_types < 1 or self.d_in < self.n_types:
            problems.append(f"need 1 <= n_types <= d_in (n_types={self.n_types}, d_in={self.d_in})")
        if not 1 <= self.min_nodes <= self.max_nodes:
            problems.append(f"need 1 <= min_nodes <= max_nodes ({self.min_nodes}, {self.max_nodes})")
        if not 0.0 <= self.motif_fraction <= 1.0:
            problems.append("motif_fraction must lie in [0, 1]")
        for s in self.shapes:
            if s not in MOTIF_SHAPES:
                problems.append(f"unknown motif shape {s!r}")
            elif MOTIF_SHAPES[s][0] > self.min_nodes:
                problems.append(f"motif {s!r} does not fit in {self.min_nodes}-node graphs")
        if problems:
            raise InfeasibleSpecError("; ".join(problems))

    def motif_family(self) -> List[MotifRule]:
        # homogeneous-type motifs: "triangle of type-A nodes" etc.
        return [MotifRule(s, (t,) * MOTIF_SHAPES[s][0]) for s in self.shapes for t in range(self.n_types)]


def node_types(graph: MolecularGraph, n_types: int) -> np.ndarray:
    return np.argmax(graph.node_features[:, :n_types], axis=1)


def contains_motif(graph: MolecularGraph, rule: MotifRule, n_types: int) -> bool:
    """Exhaustive typed subgraph-monomorphism search by backtracking."""
    k, pattern_edges = MOTIF_SHAPES[rule.shape]
    types = node_types(graph, n_types)
    nbrs = graph.neighbors()
    candidates = [[v for v in range(graph.node_count) if types[v] == rule.types[i]] for i in range(k)]
    required = [[j for (a, b) in pattern_edges for j in ((b,) if a == i else (a,) if b == i else ()) if j < i] for i in range(k)]
    assignment: List[int] = []

    def extend(i: int) -> bool:
        if i == k:
            return True
        for v in candidates[i]:
            if v in assignment:
                continue
            if all(assignment[j] in nbrs[v] for j in required[i]):
                assignment.append(v)
                if extend(i + 1):
                    return True
                assignment.pop()
        return False

    return extend(0)


def _random_graph(rng: np.random.Generator, spec: SyntheticSpec) -> Tuple[np.ndarray, set]:
    n = int(rng.integers(spec.min_nodes, spec.max_nodes + 1))
    types = rng.integers(0, spec.n_types, size=n)
    edges = set()
    for v in range(1, n):
        u = int(rng.integers(0, v))
        edges.add((u, v))
    for u, v in itertools.combinations(range(n), 2):
        if (u, v) not in edges and rng.random() < spec.extra_edge_prob:
            edges.add((u, v))
    return types, edges


def _features(rng: np.random.Generator, types: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    n = len(types)
    x = np.empty((n, spec.d_in))
    x[:, : spec.n_types] = rng.uniform(-0.2, 0.2, size=(n, spec.n_types))
    x[np.arange(n), types] += 1.0
    x[:, spec.n_types :] = rng.normal(size=(n, spec.d_in - spec.n_types))
    return x


def _build(types, edges, x) -> MolecularGraph:
    e = np.array(sorted(edges), dtype=np.int64).reshape(-1, 2)
    return MolecularGraph(x, e, np.zeros((len(e), 0)))


def _plant(rng, types, edges, rule: MotifRule):
    k, pattern_edges = MOTIF_SHAPES[rule.shape]
    nodes = rng.choice(len(types), size=k, replace=False)
    types = types.copy()
    for i, v in enumerate(nodes):
        types[v] = rule.types[i]
    edges = set(edges)
    for a, b in pattern_edges:
        u, v = sorted((int(nodes[a]), int(nodes[b])))
        edges.add((u, v))
    return types, edges


def _motif_pool(rng, rule: MotifRule, n_graphs: int, spec: SyntheticSpec) -> List[LabeledGraph]:
    pool = []
    for _ in range(n_graphs):
        want = int(rng.random() < 0.5)
        for _attempt in range(MAX_REJECTIONS):
            types, edges = _random_graph(rng, spec)
            if want:
                types, edges = _plant(rng, types, edges, rule)
            g = _build(types, edges, _features(rng, types, spec))
            label = int(contains_motif(g, rule, spec.n_types))
            if label == want:
                break
        else:
            raise InfeasibleSpecError(f"could not draw a graph with label {want} for {rule.describe()}")
        pool.append(LabeledGraph(g, label))
    return pool


def _threshold_pool(rng, n_graphs: int, spec: SyntheticSpec) -> Tuple[ThresholdRule, List[LabeledGraph]]:
    graphs = []
    for _ in range(n_graphs):
        types, edges = _random_graph(rng, spec)
        graphs.append(_build(types, edges, _features(rng, types, spec)))
    w = rng.normal(size=spec.d_in)
    w /= np.linalg.norm(w)
    scores = np.array([w @ g.node_features.sum(axis=0) for g in graphs])
    srt = np.sort(scores)
    mid = len(srt) // 2
    thr = float(0.5 * (srt[mid - 1] + srt[mid])) if len(srt) > 1 else float(srt[0]) - 1.0
    rule = ThresholdRule(tuple(float(v) for v in w), thr)
    return rule, [LabeledGraph(g, int(evaluate_rule(rule, g, spec.n_types))) for g in graphs]


def evaluate_rule(rule, graph: MolecularGraph, n_types: int) -> bool:
    if isinstance(rule, MotifRule):
        return contains_motif(graph, rule, n_types)
    return float(np.asarray(rule.weights) @ graph.node_features.sum(axis=0)) > rule.threshold


@dataclass(frozen=True, eq=False)
class SyntheticTask(Task):
    rule: object = field(default=None)


def generate_synthetic_tasks(seed: int, n_tasks: int, graphs_per_task: int, spec: SyntheticSpec = SyntheticSpec()) -> List[SyntheticTask]:
    """Tasks whose labels follow a hidden per-task rule; deterministic in ``seed``.

    Each task's rule is either a distinct typed motif from the spec's family or
    a random linear threshold over summed node features. Every task's active
    fraction lies in [0.3, 0.7].
    """
    spec.validate()
    if n_tasks <= 0:
        return []
    if graphs_per_task < 2:
        raise InfeasibleSpecError("need at least 2 graphs per task for both classes")
    rng = np.random.default_rng(seed)
    family = spec.motif_family()
    order = rng.permutation(len(family))
    n_motif = int(round(n_tasks * spec.motif_fraction))
    if spec.motif_fraction >= 1.0 and len(family) < n_tasks:
        raise InfeasibleSpecError(f"motif family has {len(family)} distinct rules, need {n_tasks}")
    n_motif = min(n_motif, len(family))
    kinds = np.array([1] * n_motif + [0] * (n_tasks - n_motif))
    rng.shuffle(kinds)

    tasks: List[SyntheticTask] = []
    next_motif = 0
    for ti, is_motif in enumerate(kinds):
        if is_motif:
            rule = family[order[next_motif]]
            next_motif += 1
        for _attempt in range(MAX_REJECTIONS):
            if is_motif:
                pool = _motif_pool(rng, rule, graphs_per_task, spec)
            else:
                rule, pool = _threshold_pool(rng, graphs_per_task, spec)
            frac = sum(g.label for g in pool) / len(pool)
            if 0.3 <= frac <= 0.7:
                break
        else:
            raise InfeasibleSpecError(f"task {ti}: could not reach label balance in {MAX_REJECTIONS} attempts")
        tasks.append(SyntheticTask(f"syn{ti:03d}-{rule.describe()}", tuple(pool), rule))
    return tasks


# ---------------------------------------------------------------------------
# episodes


def sample_episode(
    task: Task,
    rng: np.random.Generator,
    k_shot: Optional[int] = None,
    support_size: Optional[int] = None,
    query_size: int = 16,
) -> Episode:
    """Draw a support/query split from ``task.pool``.

    Exactly one of ``k_shot`` (balanced, K per class) or ``support_size``
    (class-agnostic draw, re-drawn until both classes appear) must be given.
    The query is drawn uniformly from the remaining pool.
    """
    if (k_shot is None) == (support_size is None):
        raise ValueError("give exactly one of k_shot or support_size")
    pos, neg = task.class_indices(1), task.class_indices(0)
    n = len(task.pool)
    if k_shot is not None:
        if k_shot < 1:
            raise ValueError("k_shot must be >= 1")
        if len(pos) < k_shot or len(neg) < k_shot or n - 2 * k_shot < query_size:
            raise InsufficientPoolError(
                f"task {task.task_id}: need {k_shot} active + {k_shot} inactive + {query_size} query, "
                f"have {len(pos)} active, {len(neg)} inactive ({n} total)"
            )
        support = np.concatenate([rng.choice(pos, k_shot, replace=False), rng.choice(neg, k_shot, replace=False)])
    else:
        if support_size < 2 or len(pos) < 1 or len(neg) < 1 or n - support_size < query_size:
            raise InsufficientPoolError(
                f"task {task.task_id}: need support {support_size} with >= 1 per class + {query_size} query, "
                f"have {len(pos)} active, {len(neg)} inactive ({n} total)"
            )
        for _ in range(MAX_REJECTIONS):
            support = rng.choice(n, support_size, replace=False)
            labels = {task.pool[i].label for i in support}
            if len(labels) == 2:
                break
        else:
            raise InsufficientPoolError(f"task {task.task_id}: could not draw a two-class support of {support_size}")
    rest = np.setdiff1d(np.arange(n), support)
    query = rng.choice(rest, query_size, replace=False)
    return Episode(
        tuple(task.pool[i] for i in support),
        tuple(task.pool[i] for i in query),
        tuple(int(i) for i in support),
        tuple(int(i) for i in query),
        task.task_id,
    )


def prevalence(graphs: Sequence[LabeledGraph]) -> float:
    return sum(g.label for g in graphs) / len(graphs) if graphs else math.nan
