"""Datasets: on-disk layout plus seeded synthetic shift generators.

Every generator lays out three domains of ``n_per_group`` nodes each, in node
order: the source domain (train mask), an intermediate domain (val mask) whose
shift parameter sits halfway between source and target, and the target domain
(test mask). ``groups`` partitions the test nodes for worst-group evaluation.
Groups are never used by training.

Directory layout written by :func:`save_dataset`::

    graph.json  features.csv  labels.csv  masks.json  [groups.json]  meta.json
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateConfig, InsufficientSamples, ParseError, SchemaMismatch
from .graph import WeightedGraph, from_arrays, graph_from_json, graph_to_json
from .model import UNLABELED

MASK_NAMES = ("train", "val", "test")
DOMAIN_LEVELS = (0.0, 0.5, 1.0)

KNN_K = 5
CROSS_EDGE_P = 0.01


@dataclass
class Dataset:
    graph: WeightedGraph
    features: np.ndarray
    labels: np.ndarray
    masks: dict[str, np.ndarray]
    groups: list[np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.masks = {k: np.asarray(sorted(int(i) for i in v), dtype=np.int64) for k, v in self.masks.items()}
        if self.groups is not None:
            self.groups = [np.asarray(sorted(int(i) for i in grp), dtype=np.int64) for grp in self.groups]
        self.validate()

    @property
    def num_nodes(self) -> int:
        return self.graph.num_nodes

    @property
    def num_classes(self) -> int:
        if "num_classes" in self.meta:
            return int(self.meta["num_classes"])
        return int(self.labels.max()) + 1

    def validate(self) -> None:
        n = self.graph.num_nodes
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise SchemaMismatch(f"features shape {self.features.shape} does not match {n} nodes")
        if self.labels.shape != (n,):
            raise SchemaMismatch(f"labels shape {self.labels.shape} does not match {n} nodes")
        if set(self.masks) != set(MASK_NAMES):
            raise SchemaMismatch(f"masks must be exactly {MASK_NAMES}, got {sorted(self.masks)}")
        seen: set[int] = set()
        for name in MASK_NAMES:
            m = self.masks[name]
            if m.size and (m.min() < 0 or m.max() >= n):
                raise SchemaMismatch(f"mask {name!r} has node ids outside [0, {n})")
            if seen.intersection(m.tolist()):
                raise SchemaMismatch(f"mask {name!r} overlaps another mask")
            seen.update(m.tolist())
        if np.any(self.labels[self.masks["train"]] == UNLABELED):
            raise SchemaMismatch("every train node must be labeled")
        if self.groups is not None:
            covered = np.sort(np.concatenate(self.groups)) if self.groups else np.array([], dtype=np.int64)
            if not np.array_equal(covered, self.masks["test"]):
                raise SchemaMismatch("groups must partition the test mask")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        same_groups = (self.groups is None) == (other.groups is None) and (
            self.groups is None
            or (len(self.groups) == len(other.groups)
                and all(np.array_equal(a, b) for a, b in zip(self.groups, other.groups)))
        )
        return (
            self.graph == other.graph
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and all(np.array_equal(self.masks[k], other.masks[k]) for k in MASK_NAMES)
            and same_groups
            and self.meta == other.meta
        )


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


def mutual_knn_edges(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Pairs ``(i, j)``, ``i < j``, where each point is among the other's ``k`` nearest."""
    n = x.shape[0]
    k = min(k, n - 1)
    if k < 1:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    _, nbr = cKDTree(x).query(x, k=k + 1)
    nbr = nbr[:, 1:]
    rows = np.repeat(np.arange(n), k)
    cols = nbr.ravel()
    directed = set(zip(rows.tolist(), cols.tolist()))
    pairs = sorted((i, j) for i, j in directed if i < j and (j, i) in directed)
    if not pairs:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    arr = np.asarray(pairs, dtype=np.int64)
    return arr[:, 0], arr[:, 1]


def domain_graph(rng: np.random.Generator, x: np.ndarray, domains: list[np.ndarray],
                 k: int = KNN_K, cross_p: float = CROSS_EDGE_P) -> WeightedGraph:
    """Mutual k-NN edges inside each domain plus Bernoulli(cross_p) edges between domains."""
    heads, tails = [], []
    for dom in domains:
        h, t = mutual_knn_edges(x[dom], k)
        heads.append(dom[h])
        tails.append(dom[t])
    for a in range(len(domains)):
        for b in range(a + 1, len(domains)):
            hit = rng.random((domains[a].size, domains[b].size)) < cross_p
            ia, ib = np.nonzero(hit)
            heads.append(domains[a][ia])
            tails.append(domains[b][ib])
    return from_arrays(x.shape[0], np.concatenate(heads), np.concatenate(tails))


def _balanced_labels(rng, n, num_classes):
    y = np.arange(n) % num_classes
    rng.shuffle(y)
    return y


def _check_sizes(n_per_group, d, num_classes):
    if n_per_group < 2 or num_classes < 2 or d < 1:
        raise DegenerateConfig(f"need n_per_group >= 2, C >= 2, d >= 1 (got {n_per_group}, {num_classes}, {d})")
    if n_per_group < num_classes:
        raise DegenerateConfig("n_per_group must be at least C so every class appears")


def _assemble(rng, x, y, groups, meta, n_per_group):
    domains = [np.arange(k * n_per_group, (k + 1) * n_per_group) for k in range(3)]
    g = domain_graph(rng, x, domains)
    masks = dict(zip(MASK_NAMES, domains))
    return Dataset(g, x, y, masks, groups=groups, meta=meta)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def gen_covariate_shift(seed: int, n_per_group: int, d: int, num_classes: int,
                        shift_magnitude: float, class_sep: float = 2.0) -> Dataset:
    """Covariate shift: ``P(X)`` moves across domains while ``P(Y|X)`` is fixed.

    Class ``c`` has mean ``class_sep * e_c`` in the first ``C`` coordinates, unit
    isotropic noise everywhere. Coordinate ``C`` is a nuisance axis orthogonal to
    every class mean: each node draws a nuisance cluster ``s = +-1`` with a
    domain-dependent mixing probability and is shifted by
    ``shift_magnitude * (level + s / 2)`` along that axis. Class priors are equal
    in every domain, so the Bayes classifier is the same everywhere. Test groups
    are the two nuisance clusters.
    """
    _check_sizes(n_per_group, d, num_classes)
    if d < num_classes + 1:
        raise DegenerateConfig(f"covariate shift needs d >= C + 1 (got d={d}, C={num_classes})")
    if not math.isfinite(shift_magnitude):
        raise DegenerateConfig("shift_magnitude must be finite")
    rng = np.random.default_rng(seed)
    means = np.zeros((num_classes, d))
    means[np.arange(num_classes), np.arange(num_classes)] = class_sep
    xs, ys, clusters = [], [], []
    for level in DOMAIN_LEVELS:
        y = _balanced_labels(rng, n_per_group, num_classes)
        s = np.where(rng.random(n_per_group) < 0.25 + 0.5 * level, 1.0, -1.0)
        x = means[y] + rng.standard_normal((n_per_group, d))
        x[:, num_classes] += shift_magnitude * (level + 0.5 * s)
        xs.append(x)
        ys.append(y)
        clusters.append(s)
    x, y = np.vstack(xs), np.concatenate(ys)
    test = np.arange(2 * n_per_group, 3 * n_per_group)
    groups = [grp for grp in (test[clusters[2] < 0], test[clusters[2] > 0]) if grp.size]
    meta = {
        "generator": "covariate", "seed": seed, "n_per_group": n_per_group, "d": d,
        "num_classes": num_classes, "shift_magnitude": shift_magnitude, "class_sep": class_sep,
        "nuisance_axis": num_classes,
    }
    return _assemble(rng, x, y, groups, meta, n_per_group)


def gen_concept_shift(seed: int, n_per_group: int, d: int, num_classes: int,
                      spurious_strength: float, class_sep: float = 1.0,
                      causal_noise: float = 1.0, spurious_noise: float = 0.1) -> Dataset:
    """Concept shift through one spurious coordinate.

    The first ``d - 1`` coordinates are causal (Gaussian around a class mean).
    The last coordinate encodes a category that equals the label with
    probability ``spurious_strength`` in the source domain and ``1 -
    spurious_strength`` in the target (otherwise a uniformly chosen other
    class). Classes are exactly balanced, so the category marginal, and hence
    ``P(X)``, is the same in every domain. Test groups split the target nodes by
    whether the spurious category agrees with the label.
    """
    _check_sizes(n_per_group, d, num_classes)
    if d < 2:
        raise DegenerateConfig("concept shift needs d >= 2 (causal + spurious)")
    if not 0.0 <= spurious_strength <= 1.0:
        raise DegenerateConfig(f"spurious_strength must lie in [0, 1], got {spurious_strength}")
    rng = np.random.default_rng(seed)
    dc = d - 1
    means = np.zeros((num_classes, dc))
    if dc >= num_classes:
        means[np.arange(num_classes), np.arange(num_classes)] = class_sep
    else:
        means[:, 0] = class_sep * np.arange(num_classes)
    xs, ys, agrees = [], [], []
    for level in DOMAIN_LEVELS:
        strength = spurious_strength + level * (1.0 - 2.0 * spurious_strength)
        y = _balanced_labels(rng, n_per_group, num_classes)
        agree = rng.random(n_per_group) < strength
        other = (y + rng.integers(1, num_classes, size=n_per_group)) % num_classes
        cat = np.where(agree, y, other)
        x = np.empty((n_per_group, d))
        x[:, :dc] = means[y] + causal_noise * rng.standard_normal((n_per_group, dc))
        x[:, dc] = cat + spurious_noise * rng.standard_normal(n_per_group)
        xs.append(x)
        ys.append(y)
        agrees.append(agree)
    x, y = np.vstack(xs), np.concatenate(ys)
    test = np.arange(2 * n_per_group, 3 * n_per_group)
    groups = [grp for grp in (test[agrees[2]], test[~agrees[2]]) if grp.size]
    meta = {
        "generator": "concept", "seed": seed, "n_per_group": n_per_group, "d": d,
        "num_classes": num_classes, "spurious_strength": spurious_strength, "class_sep": class_sep,
        "causal_noise": causal_noise, "spurious_noise": spurious_noise,
    }
    return _assemble(rng, x, y, groups, meta, n_per_group)


def imbalance_counts(available: np.ndarray, imbalance_ratio: float) -> np.ndarray:
    """Per-class train counts decaying geometrically from class 0 (majority) to class C-1.

    The minority count is ``floor(available_major / ratio)`` (at least 1), the
    majority is ``floor(minority * ratio)``, middle classes are
    ``floor(major * ratio ** (-c / (C - 1)))`` clipped to ``[minority, major]``.
    For integer ratios ``major / minority == ratio`` exactly.
    """
    available = np.asarray(available, dtype=np.int64)
    c = available.size
    n_min = int(available[0] // imbalance_ratio)
    if n_min < 1:
        raise InsufficientSamples(f"class 0 has {available[0]} nodes, too few for ratio {imbalance_ratio}")
    n_max = int(math.floor(n_min * imbalance_ratio + 1e-9))
    counts = np.array(
        [math.floor(n_max * imbalance_ratio ** (-k / (c - 1)) + 1e-9) for k in range(c)], dtype=np.int64
    )
    counts = np.clip(counts, n_min, n_max)
    counts[0], counts[-1] = n_max, n_min
    short = np.flatnonzero(counts > available)
    if short.size:
        k = int(short[0])
        raise InsufficientSamples(f"class {k} needs {counts[k]} train nodes, only {available[k]} available")
    return counts


def gen_class_imbalance(seed: int, base: Dataset, imbalance_ratio: float) -> Dataset:
    """Subsample the train mask to a long-tailed label distribution; val/test untouched.

    Dropped train nodes stay in the graph but leave every mask.
    """
    if not imbalance_ratio >= 1:
        raise DegenerateConfig(f"imbalance_ratio must be >= 1, got {imbalance_ratio}")
    rng = np.random.default_rng(seed)
    train = base.masks["train"]
    c = base.num_classes
    by_class = [train[base.labels[train] == k] for k in range(c)]
    counts = imbalance_counts(np.array([b.size for b in by_class]), imbalance_ratio)
    keep = np.concatenate([rng.choice(b, size=n, replace=False) for b, n in zip(by_class, counts)])
    masks = dict(base.masks)
    masks["train"] = np.sort(keep)
    meta = dict(base.meta, imbalance_ratio=imbalance_ratio, imbalance_seed=seed,
                train_counts=[int(n) for n in counts])
    return Dataset(base.graph, base.features.copy(), base.labels.copy(), masks,
                   groups=None if base.groups is None else [g.copy() for g in base.groups], meta=meta)


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj) + "\n", encoding="utf-8")


def save_dataset(ds: Dataset, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    p = out / "graph.json"
    _dump_json(graph_to_json(ds.graph), p)
    written.append(p)
    p = out / "features.csv"
    with open(p, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in ds.features.tolist():
            w.writerow([repr(v) for v in row])
    written.append(p)
    p = out / "labels.csv"
    with open(p, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node_id", "label"])
        for i, lab in enumerate(ds.labels.tolist()):
            w.writerow([i, "-" if lab == UNLABELED else lab])
    written.append(p)
    p = out / "masks.json"
    _dump_json({k: ds.masks[k].tolist() for k in MASK_NAMES}, p)
    written.append(p)
    if ds.groups is not None:
        p = out / "groups.json"
        _dump_json([grp.tolist() for grp in ds.groups], p)
        written.append(p)
    p = out / "meta.json"
    _dump_json(ds.meta, p)
    written.append(p)
    return written


def _load_json(path: Path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise SchemaMismatch(f"missing file {path}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.lineno, exc.colno, exc.msg) from None


def read_features(path) -> np.ndarray:
    path = Path(path)
    rows = []
    try:
        fh = open(path, encoding="utf-8", newline="")
    except FileNotFoundError:
        raise SchemaMismatch(f"missing file {path}") from None
    with fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if rows and len(row) != len(rows[0]):
                raise ParseError(path, lineno, 1, f"row {lineno} has {len(row)} columns, expected {len(rows[0])}")
            vals = []
            for col, cell in enumerate(row, start=1):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(path, lineno, col, f"row {lineno}: not a number: {cell!r}") from None
            rows.append(vals)
    if not rows:
        raise SchemaMismatch(f"{path} has no rows")
    return np.asarray(rows, dtype=np.float64)


def read_labels(path, num_nodes: int) -> np.ndarray:
    path = Path(path)
    try:
        fh = open(path, encoding="utf-8", newline="")
    except FileNotFoundError:
        raise SchemaMismatch(f"missing file {path}") from None
    labels = np.full(num_nodes, UNLABELED, dtype=np.int64)
    seen = np.zeros(num_nodes, dtype=bool)
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["node_id", "label"]:
            raise ParseError(path, 1, 1, f"expected header 'node_id,label', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise ParseError(path, lineno, 1, f"row {lineno}: expected 2 columns, got {len(row)}")
            try:
                i = int(row[0])
            except ValueError:
                raise ParseError(path, lineno, 1, f"row {lineno}: bad node id {row[0]!r}") from None
            if not 0 <= i < num_nodes:
                raise ParseError(path, lineno, 1, f"row {lineno}: node id {i} outside [0, {num_nodes})")
            if row[1] != "-":
                try:
                    labels[i] = int(row[1])
                except ValueError:
                    raise ParseError(path, lineno, 2, f"row {lineno}: bad label {row[1]!r}") from None
            seen[i] = True
    if not seen.all():
        raise SchemaMismatch(f"{path} is missing rows for {int((~seen).sum())} nodes")
    return labels


def load_dataset(in_dir) -> Dataset:
    d = Path(in_dir)
    graph = graph_from_json(_load_json(d / "graph.json"))
    features = read_features(d / "features.csv")
    labels = read_labels(d / "labels.csv", graph.num_nodes)
    masks = _load_json(d / "masks.json")
    if not isinstance(masks, dict):
        raise SchemaMismatch("masks.json must be an object")
    groups = _load_json(d / "groups.json") if (d / "groups.json").exists() else None
    meta = _load_json(d / "meta.json")
    return Dataset(graph, features, labels, masks, groups=groups, meta=meta)
