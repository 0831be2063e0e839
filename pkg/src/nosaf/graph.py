"""Graph data, normalized adjacency, homophily/smoothness metrics, SBM generator, bundle I/O."""

from __future__ import annotations

import json
import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import SparseCsr
from .errors import ArgumentError, DataError, IntegrityError, ParseError


class Graph:
    """Undirected, unweighted graph with node features and labels.

    Edges are stored once each as ``(u, v)`` with ``u < v``, sorted; the
    constructor canonicalizes orientation and drops repeated pairs.
    Self-loops are rejected (normalization adds them).
    """

    def __init__(self, n, edges, features, labels, num_classes=None, name="graph"):
        self.n = int(n)
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= self.n):
            raise DataError(f"edge endpoint outside [0, {self.n})")
        if np.any(e[:, 0] == e[:, 1]):
            raise DataError("self-loops are not stored in a Graph")
        e = np.sort(e, axis=1)
        self.edges = np.unique(e, axis=0) if e.size else np.zeros((0, 2), dtype=np.int64)
        self.features = np.asarray(features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != self.n:
            raise DataError(f"features must be {self.n} x D, got {self.features.shape}")
        self.labels = np.asarray(labels, dtype=np.int64)
        if self.labels.shape != (self.n,):
            raise DataError(f"need {self.n} labels, got shape {self.labels.shape}")
        if num_classes is None:
            num_classes = int(self.labels.max()) + 1 if self.n else 0
        self.num_classes = int(num_classes)
        if self.n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")
        self.name = name

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.ravel(), minlength=self.n)

    def neighbors(self, i: int) -> np.ndarray:
        u, v = self.edges[:, 0], self.edges[:, 1]
        return np.sort(np.concatenate([v[u == i], u[v == i]]))

    def permuted(self, perm) -> "Graph":
        """Relabel nodes so that old node ``perm[k]`` becomes node ``k``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(self.n)
        return Graph(self.n, inv[self.edges], self.features[perm], self.labels[perm],
                     self.num_classes, self.name)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (self.n == other.n and self.num_classes == other.num_classes
                and self.name == other.name
                and np.array_equal(self.edges, other.edges)
                and np.array_equal(self.labels, other.labels)
                and self.features.shape == other.features.shape
                and np.array_equal(self.features, other.features))

    def __repr__(self):
        return (f"Graph({self.name!r}, n={self.n}, edges={self.num_edges}, "
                f"D={self.feature_dim}, K={self.num_classes})")


@dataclass
class SplitMasks:
    """Disjoint sorted node-id arrays for train/validation/test."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def validate(self, n: int) -> None:
        parts = [np.asarray(p, dtype=np.int64) for p in (self.train, self.val, self.test)]
        allids = np.concatenate(parts)
        if allids.size != n or not np.array_equal(np.sort(allids), np.arange(n)):
            raise IntegrityError("splits must be disjoint and cover every node exactly once")

    def as_lists(self) -> dict:
        return {k: [int(i) for i in getattr(self, k)] for k in ("train", "val", "test")}


# ----------------------------------------------------------------------------
# adjacency and metrics


def normalize_adjacency(g: Graph) -> SparseCsr:
    """Symmetric GCN propagation matrix with self-loops: 1/sqrt(deg_i * deg_j)."""
    u, v = g.edges[:, 0], g.edges[:, 1]
    loops = np.arange(g.n)
    r = np.concatenate([u, v, loops])
    c = np.concatenate([v, u, loops])
    deg = g.degrees() + 1.0
    vals = 1.0 / np.sqrt(deg[r] * deg[c])
    return SparseCsr.from_coo(g.n, g.n, r, c, vals)


def _same_label_counts(g: Graph) -> tuple[np.ndarray, np.ndarray]:
    u, v = g.edges[:, 0], g.edges[:, 1]
    same = (g.labels[u] == g.labels[v]).astype(np.int64)
    same_count = np.bincount(u, same, g.n) + np.bincount(v, same, g.n)
    return same_count, g.degrees()


def node_homophily_all(g: Graph) -> np.ndarray:
    """Per-node fraction of same-label neighbors; NaN marks isolated nodes."""
    same, deg = _same_label_counts(g)
    out = np.full(g.n, np.nan)
    has = deg > 0
    out[has] = same[has] / deg[has]
    return out


def node_homophily(g: Graph, i: int) -> float:
    """Same-label fraction of node ``i``'s neighbors, or NaN when it has none."""
    nb = g.neighbors(i)
    if nb.size == 0:
        return math.nan
    return float(np.mean(g.labels[nb] == g.labels[i]))


def graph_homophily(g: Graph) -> float:
    """Average node homophily over non-isolated nodes (NaN for an edgeless graph)."""
    h = node_homophily_all(g)
    h = h[~np.isnan(h)]
    return float(h.mean()) if h.size else math.nan


def isolated_nodes(g: Graph) -> np.ndarray:
    return np.flatnonzero(g.degrees() == 0)


def smoothness_davg(h) -> float:
    """Mean pairwise cosine distance between rows.

    Rows of zero norm are treated as having cosine similarity 0 with every
    other row, i.e. distance 1.
    """
    h = np.asarray(getattr(h, "data", h), dtype=np.float64)
    n = h.shape[0]
    if n < 2:
        raise ArgumentError("smoothness needs at least two rows")
    norms = np.linalg.norm(h, axis=1)
    nz = norms > 0
    unit = np.zeros_like(h)
    unit[nz] = h[nz] / norms[nz, None]
    s = unit.sum(axis=0)
    # sum over i<j of cos_ij = (|sum of unit rows|^2 - sum_i |u_i|^2) / 2
    pair_cos = 0.5 * (float(s @ s) - float(np.count_nonzero(nz)))
    pairs = n * (n - 1) / 2
    return float((pairs - pair_cos) / pairs)


# ----------------------------------------------------------------------------
# synthetic graphs


@dataclass
class SbmSpec:
    n: int = 400
    k: int = 3
    target_h: float = 0.9
    avg_degree: float = 10.0
    feature_dim: int = 16
    class_separation: float = 2.0
    noise_std: float = 0.5
    seed: int = 0

    def validate(self) -> "SbmSpec":
        if not 0.0 < self.target_h < 1.0:
            raise ArgumentError(f"target_h must be in (0, 1), got {self.target_h}")
        if self.k < 2:
            raise ArgumentError(f"k must be at least 2, got {self.k}")
        if self.n < self.k:
            raise ArgumentError(f"n must be at least k, got n={self.n}, k={self.k}")
        if self.avg_degree <= 0:
            raise ArgumentError(f"avg_degree must be positive, got {self.avg_degree}")
        if self.feature_dim < self.k:
            raise ArgumentError(f"feature_dim must be at least k, got {self.feature_dim}")
        if self.class_separation < 0:
            raise ArgumentError(f"class_separation must be >= 0, got {self.class_separation}")
        if self.noise_std <= 0:
            raise ArgumentError(f"noise_std must be positive, got {self.noise_std}")
        return self


def generate_sbm(spec: SbmSpec) -> Graph:
    """Random graph whose expected same-label endpoint rate is ``target_h``.

    Each edge picks a uniform endpoint ``u``; with probability ``target_h`` the
    partner is a uniform same-class node, otherwise a uniform node of another
    class.  Repeated pairs are redrawn.  Class means sit on scaled basis
    vectors so every pair of means is ``class_separation`` apart.
    """
    spec.validate()
    n, k = spec.n, spec.k
    rng = np.random.default_rng(spec.seed)
    labels = np.arange(n) % k
    rng.shuffle(labels)
    m = math.ceil(n * spec.avg_degree / 2)
    if m > n * (n - 1) // 2:
        raise ArgumentError(f"{m} edges exceed simple-graph capacity of {n} nodes")
    same = [np.flatnonzero(labels == c) for c in range(k)]
    other = [np.flatnonzero(labels != c) for c in range(k)]

    edges = set()
    budget = 100 * m + 10_000
    while len(edges) < m:
        budget -= 1
        if budget < 0:
            raise ArgumentError("could not place the requested edges; lower avg_degree")
        u = int(rng.integers(n))
        pool = same[labels[u]] if rng.random() < spec.target_h else other[labels[u]]
        v = int(pool[rng.integers(pool.size)])
        if u != v:
            edges.add((min(u, v), max(u, v)))

    means = np.zeros((k, spec.feature_dim))
    means[np.arange(k), np.arange(k)] = spec.class_separation / math.sqrt(2.0)
    features = means[labels] + rng.normal(0.0, spec.noise_std, (n, spec.feature_dim))
    name = f"sbm-n{n}-k{k}-h{spec.target_h:g}-s{spec.seed}"
    return Graph(n, sorted(edges), features, labels, k, name)


def make_split(g: Graph, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> SplitMasks:
    """Stratified per-class random split; classes under 3 nodes go to train."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ArgumentError(f"split ratios must be three non-negatives summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for c in range(g.num_classes):
        members = np.flatnonzero(g.labels == c)
        if members.size == 0:
            continue
        members = rng.permutation(members)
        if members.size < 3:
            warnings.warn(f"class {c} has {members.size} node(s); assigning all to train")
            parts[0].append(members)
            continue
        n_train = int(math.floor(ratios[0] * members.size + 0.5))
        n_val = min(int(math.floor(ratios[1] * members.size + 0.5)), members.size - n_train)
        parts[0].append(members[:n_train])
        parts[1].append(members[n_train:n_train + n_val])
        parts[2].append(members[n_train + n_val:])
    out = [np.sort(np.concatenate(p)) if p else np.zeros(0, dtype=np.int64) for p in parts]
    return SplitMasks(*out)


# ----------------------------------------------------------------------------
# bundle directory format


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def save_bundle(g: Graph, directory, splits: SplitMasks | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"n": g.n, "feature_dim": g.feature_dim, "num_classes": g.num_classes,
            "name": g.name}
    _write_text(d / "meta.json", json.dumps(meta, indent=2) + "\n")
    lines = []
    for i in range(g.n):
        row = [str(i), str(int(g.labels[i]))] + [_fmt(x) for x in g.features[i]]
        lines.append("\t".join(row))
    _write_text(d / "nodes.tsv", "".join(line + "\n" for line in lines))
    _write_text(d / "edges.tsv", "".join(f"{u}\t{v}\n" for u, v in g.edges))
    if splits is not None:
        _write_text(d / "splits.json", json.dumps(splits.as_lists()) + "\n")
    return d


def _read(path: Path) -> str:
    if not path.is_file():
        raise ParseError(f"missing bundle file: {path}")
    return path.read_text(encoding="utf-8")


def load_bundle(directory) -> tuple[Graph, SplitMasks | None]:
    """Read a bundle directory; returns the graph and its splits (if present)."""
    d = Path(directory)
    try:
        meta = json.loads(_read(d / "meta.json"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{d / 'meta.json'}:{exc.lineno}: {exc.msg}") from None
    for key in ("n", "feature_dim", "num_classes", "name"):
        if key not in meta:
            raise ParseError(f"{d / 'meta.json'}: missing key {key!r}")
    n, dim, k = int(meta["n"]), int(meta["feature_dim"]), int(meta["num_classes"])

    path = d / "nodes.tsv"
    labels = np.zeros(n, dtype=np.int64)
    feats = np.zeros((n, dim))
    count = 0
    for lineno, line in enumerate(_read(path).splitlines(), 1):
        if not line.strip():
            continue
        cells = line.split("\t")
        try:
            ident, label = int(cells[0]), int(cells[1])
            values = [float(x) for x in cells[2:]]
        except (ValueError, IndexError):
            raise ParseError(f"{path}:{lineno}: malformed node row") from None
        if ident != count:
            raise IntegrityError(f"{path}:{lineno}: expected node id {count}, got {ident}")
        if ident >= n:
            raise IntegrityError(f"{path}:{lineno}: more node rows than n={n}")
        if len(values) != dim:
            raise IntegrityError(f"{path}:{lineno}: {len(values)} features, expected {dim}")
        if not 0 <= label < k:
            raise IntegrityError(f"{path}:{lineno}: label {label} outside [0, {k})")
        labels[ident] = label
        feats[ident] = values
        count += 1
    if count != n:
        raise IntegrityError(f"{path}: {count} node rows, meta says n={n}")

    path = d / "edges.tsv"
    edges = []
    seen = set()
    for lineno, line in enumerate(_read(path).splitlines(), 1):
        if not line.strip():
            continue
        cells = line.split("\t")
        try:
            if len(cells) != 2:
                raise ValueError
            u, v = int(cells[0]), int(cells[1])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: malformed edge row") from None
        if not (0 <= u < n and 0 <= v < n):
            raise IntegrityError(f"{path}:{lineno}: edge references unknown node")
        if u >= v:
            raise IntegrityError(f"{path}:{lineno}: edge must satisfy u < v")
        if (u, v) in seen:
            raise IntegrityError(f"{path}:{lineno}: duplicate edge ({u}, {v})")
        seen.add((u, v))
        edges.append((u, v))

    g = Graph(n, edges, feats, labels, k, str(meta["name"]))
    splits = None
    path = d / "splits.json"
    if path.exists():
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
            splits = SplitMasks(*(np.asarray(sorted(raw[key]), dtype=np.int64)
                                  for key in ("train", "val", "test")))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"{path}: {exc}") from None
        splits.validate(n)
    return g, splits

