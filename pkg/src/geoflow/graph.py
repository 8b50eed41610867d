"""Finite undirected weighted graphs and the structural transforms used by the flow.

Edges are stored once per undirected pair in canonical orientation ``head < tail``,
sorted lexicographically, as three parallel read-only arrays. A symmetric CSR
adjacency is derived on construction for neighbor lookups and propagation.
"""

from __future__ import annotations

import json
from collections import deque
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np
import scipy.sparse as sps
from scipy.sparse.csgraph import connected_components as _cc

from .errors import (
    ConflictingDuplicateEdge,
    EmptyLabeledSet,
    EmptySourceSet,
    IndexOutOfRange,
    NonPositiveWeight,
    ParseError,
    SchemaMismatch,
    SelfLoop,
)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


class WeightedGraph:
    """Immutable undirected graph with strictly positive edge weights.

    Attributes:
        num_nodes: number of nodes ``N``; nodes are ``0 .. N-1``.
        heads, tails: int arrays with ``heads[e] < tails[e]`` for every undirected edge.
        weights: float array of edge weights, aligned with ``heads``/``tails``.
        adjacency: symmetric ``scipy.sparse.csr_matrix`` holding the weights.
    """

    __slots__ = ("num_nodes", "heads", "tails", "weights", "adjacency")

    def __init__(self, num_nodes: int, heads, tails, weights):
        heads = np.asarray(heads, dtype=np.int64)
        tails = np.asarray(tails, dtype=np.int64)
        weights = np.asarray(weights, dtype=np.float64)
        order = np.lexsort((tails, heads))
        self.num_nodes = int(num_nodes)
        self.heads = _readonly(heads[order].copy())
        self.tails = _readonly(tails[order].copy())
        self.weights = _readonly(weights[order].copy())
        rows = np.concatenate([self.heads, self.tails])
        cols = np.concatenate([self.tails, self.heads])
        vals = np.concatenate([self.weights, self.weights])
        adj = sps.csr_matrix((vals, (rows, cols)), shape=(self.num_nodes, self.num_nodes))
        adj.sort_indices()
        self.adjacency = adj

    @property
    def num_edges(self) -> int:
        return int(self.heads.size)

    def edges(self) -> Iterator[tuple[int, int, float]]:
        """Yield every edge in both orientations, ``(i, j, w)`` sorted by ``(i, j)``."""
        adj = self.adjacency
        for i in range(self.num_nodes):
            lo, hi = adj.indptr[i], adj.indptr[i + 1]
            for j, w in zip(adj.indices[lo:hi], adj.data[lo:hi]):
                yield i, int(j), float(w)

    def undirected_edges(self) -> list[tuple[int, int, float]]:
        return [(int(i), int(j), float(w)) for i, j, w in zip(self.heads, self.tails, self.weights)]

    def degrees(self) -> np.ndarray:
        return np.asarray(self.adjacency.sum(axis=1)).ravel()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WeightedGraph):
            return NotImplemented
        return (
            self.num_nodes == other.num_nodes
            and np.array_equal(self.heads, other.heads)
            and np.array_equal(self.tails, other.tails)
            and np.array_equal(self.weights, other.weights)
        )

    def __hash__(self) -> int:
        return hash((self.num_nodes, self.heads.tobytes(), self.tails.tobytes(), self.weights.tobytes()))

    def __repr__(self) -> str:
        return f"WeightedGraph(num_nodes={self.num_nodes}, num_edges={self.num_edges})"


def build_graph(num_nodes: int, edge_triples: Iterable[Sequence]) -> WeightedGraph:
    """Build a symmetrized, deduplicated graph from ``(i, j[, w])`` tuples.

    A pair given in both orientations (or repeated) is kept once provided the
    weights agree; a missing weight defaults to 1.0.
    """
    if num_nodes < 1:
        raise IndexOutOfRange(f"num_nodes must be >= 1, got {num_nodes}")
    seen: dict[tuple[int, int], float] = {}
    for triple in edge_triples:
        if len(triple) == 2:
            i, j = triple
            w = 1.0
        else:
            i, j, w = triple
        i, j, w = int(i), int(j), float(w)
        if not (0 <= i < num_nodes and 0 <= j < num_nodes):
            raise IndexOutOfRange(f"edge ({i}, {j}) outside [0, {num_nodes})")
        if i == j:
            raise SelfLoop(f"self-loop at node {i}")
        if not w > 0 or not np.isfinite(w):
            raise NonPositiveWeight(f"edge ({i}, {j}) has weight {w}")
        key = (i, j) if i < j else (j, i)
        prev = seen.get(key)
        if prev is not None and prev != w:
            raise ConflictingDuplicateEdge(f"edge {key} given with weights {prev} and {w}")
        seen[key] = w
    if seen:
        keys = np.array(list(seen.keys()), dtype=np.int64)
        return WeightedGraph(num_nodes, keys[:, 0], keys[:, 1], list(seen.values()))
    return WeightedGraph(num_nodes, [], [], [])


def from_arrays(num_nodes: int, heads, tails, weights=None) -> WeightedGraph:
    """Vectorized constructor with the same validation as :func:`build_graph`."""
    heads = np.asarray(heads, dtype=np.int64)
    tails = np.asarray(tails, dtype=np.int64)
    weights = np.ones(heads.size) if weights is None else np.asarray(weights, dtype=np.float64)
    if heads.shape != tails.shape or heads.shape != weights.shape:
        raise ValueError("heads, tails and weights must have equal length")
    if heads.size and (min(heads.min(), tails.min()) < 0 or max(heads.max(), tails.max()) >= num_nodes):
        raise IndexOutOfRange(f"edge endpoint outside [0, {num_nodes})")
    if np.any(heads == tails):
        raise SelfLoop(f"self-loop at node {int(heads[heads == tails][0])}")
    if np.any(~(weights > 0)) or not np.all(np.isfinite(weights)):
        raise NonPositiveWeight("edge weights must be finite and > 0")
    lo, hi = np.minimum(heads, tails), np.maximum(heads, tails)
    keys = lo * num_nodes + hi
    uniq, first = np.unique(keys, return_index=True)
    if uniq.size != keys.size:
        _, inverse = np.unique(keys, return_inverse=True)
        if np.any(weights != weights[first][inverse]):
            raise ConflictingDuplicateEdge("duplicate edge with conflicting weights")
    return WeightedGraph(num_nodes, lo[first], hi[first], weights[first])


def neighbors(g: WeightedGraph, i: int) -> list[tuple[int, float]]:
    """Neighbors of ``i`` with edge weights, in ascending neighbor order."""
    if not 0 <= i < g.num_nodes:
        raise IndexOutOfRange(f"node {i} outside [0, {g.num_nodes})")
    adj = g.adjacency
    lo, hi = adj.indptr[i], adj.indptr[i + 1]
    return [(int(j), float(w)) for j, w in zip(adj.indices[lo:hi], adj.data[lo:hi])]


def connected_components(g: WeightedGraph) -> list[set[int]]:
    """Partition of the nodes into components, ordered by smallest member."""
    _, labels = _cc(g.adjacency, directed=False)
    groups: dict[int, set[int]] = {}
    for node, lab in enumerate(labels):
        groups.setdefault(int(lab), set()).add(node)
    return sorted(groups.values(), key=min)


def component_labels(g: WeightedGraph) -> np.ndarray:
    """Component id per node, numbered in order of each component's smallest member."""
    labels = np.empty(g.num_nodes, dtype=np.int64)
    for k, comp in enumerate(connected_components(g)):
        labels[list(comp)] = k
    return labels


def hop_distance(g: WeightedGraph, sources: Iterable[int]) -> np.ndarray:
    """Unweighted BFS distance to the nearest source; ``inf`` where unreachable."""
    sources = sorted(set(int(s) for s in sources))
    if not sources:
        raise EmptySourceSet("hop_distance needs at least one source")
    for s in sources:
        if not 0 <= s < g.num_nodes:
            raise IndexOutOfRange(f"source {s} outside [0, {g.num_nodes})")
    dist = np.full(g.num_nodes, np.inf)
    dist[sources] = 0
    indptr, indices = g.adjacency.indptr, g.adjacency.indices
    queue = deque(sources)
    while queue:
        u = queue.popleft()
        for v in indices[indptr[u]:indptr[u + 1]]:
            if dist[v] == np.inf:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def reconnect_labeled(g: WeightedGraph, labeled: Iterable[int], k: int) -> WeightedGraph:
    """Add unit-weight shortcut edges from each labeled node to its ``k`` nearest labeled nodes.

    Nearness is BFS hop count in ``g``; ties go to the smaller node index.
    Existing edges keep their weights.
    """
    labeled = sorted(set(int(x) for x in labeled))
    if not labeled:
        raise EmptyLabeledSet("reconnect_labeled needs at least one labeled node")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    is_labeled = np.zeros(g.num_nodes, dtype=bool)
    is_labeled[labeled] = True
    existing = set(zip(g.heads.tolist(), g.tails.tolist()))
    new_heads, new_tails = [], []
    for src in labeled:
        dist = hop_distance(g, [src])
        cand = np.flatnonzero(is_labeled & np.isfinite(dist))
        cand = cand[cand != src]
        # lexsort is stable: primary key distance, secondary node index
        chosen = cand[np.lexsort((cand, dist[cand]))][:k]
        for dst in chosen.tolist():
            key = (min(src, dst), max(src, dst))
            if key not in existing:
                existing.add(key)
                new_heads.append(key[0])
                new_tails.append(key[1])
    if not new_heads:
        return g
    return WeightedGraph(
        g.num_nodes,
        np.concatenate([g.heads, new_heads]),
        np.concatenate([g.tails, new_tails]),
        np.concatenate([g.weights, np.ones(len(new_heads))]),
    )


# ---------------------------------------------------------------------------
# on-disk formats
# ---------------------------------------------------------------------------


def read_edge_list(path, num_nodes: int | None = None) -> WeightedGraph:
    """Parse ``i j [w]`` lines; ``#`` starts a comment.

    Without ``num_nodes`` the node count is one past the largest index seen.
    """
    path = Path(path)
    triples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (2, 3):
                raise ParseError(path, lineno, 1, f"expected 'i j [w]', got {len(parts)} fields")
            try:
                i, j = int(parts[0]), int(parts[1])
            except ValueError:
                raise ParseError(path, lineno, 1, "node ids must be integers") from None
            try:
                w = float(parts[2]) if len(parts) == 3 else 1.0
            except ValueError:
                raise ParseError(path, lineno, 3, f"bad weight {parts[2]!r}") from None
            triples.append((i, j, w))
    if num_nodes is None:
        num_nodes = 1 + max((max(i, j) for i, j, _ in triples), default=0)
    return build_graph(num_nodes, triples)


def write_edge_list(g: WeightedGraph, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# num_nodes {g.num_nodes}\n")
        for i, j, w in g.undirected_edges():
            fh.write(f"{i} {j} {w!r}\n")


def graph_to_json(g: WeightedGraph) -> dict:
    return {"num_nodes": g.num_nodes, "edges": [[i, j, w] for i, j, w in g.undirected_edges()]}


def graph_from_json(obj: dict) -> WeightedGraph:
    if not isinstance(obj, dict) or "num_nodes" not in obj or "edges" not in obj:
        raise SchemaMismatch("graph JSON needs 'num_nodes' and 'edges'")
    edges = obj["edges"]
    if not isinstance(edges, list) or any(not isinstance(e, list) or len(e) not in (2, 3) for e in edges):
        raise SchemaMismatch("graph JSON 'edges' must be a list of [i, j, w] arrays")
    return build_graph(int(obj["num_nodes"]), edges)


def save_graph_json(g: WeightedGraph, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(graph_to_json(g), fh)
        fh.write("\n")


def load_graph_json(path) -> WeightedGraph:
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(path, exc.lineno, exc.colno, exc.msg) from None
    return graph_from_json(obj)
