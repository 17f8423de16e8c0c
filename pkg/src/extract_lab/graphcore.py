"""Graph data model, dataset I/O, adjacency operators, synthetic graphs and splits."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ArgumentError, ConfigError, FormatError, LoadError
from .numkit import Rng

log = logging.getLogger(__name__)

SPLIT_TAGS = ("train", "val", "test", "none")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def canonical_edges(edges, n: int) -> tuple[np.ndarray, int]:
    """Symmetrize, drop self-loops and duplicates. Returns ``(edges, dropped)``.

    Canonical form: each unordered pair once as ``(i, j)`` with ``i < j``, rows sorted.
    """
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n):
        raise FormatError(f"edge endpoint outside [0, {n})")
    lo, hi = np.minimum(e[:, 0], e[:, 1]), np.maximum(e[:, 0], e[:, 1])
    keep = lo != hi
    if not keep.any():
        return np.zeros((0, 2), dtype=np.int64), int(len(e))
    keys = np.unique(lo[keep] * n + hi[keep])
    out = np.stack([keys // n, keys % n], axis=1)
    return out, int(len(e) - len(out))


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected attributed graph. Arrays are read-only after construction.

    ``labels`` may be ``None`` for an adversary-side (unlabeled) view; ``split`` is an
    optional per-node tag array drawn from ``SPLIT_TAGS``.
    """

    features: np.ndarray
    edges: np.ndarray
    labels: np.ndarray | None
    num_classes: int
    split: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise FormatError(f"features must be 2-D, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise FormatError("non-finite feature value")
        n = x.shape[0]
        edges, dropped = canonical_edges(self.edges, n)
        if dropped:
            log.debug("dropped %d duplicate/self-loop edge entries", dropped)
        object.__setattr__(self, "features", _frozen(x))
        object.__setattr__(self, "edges", _frozen(edges))
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (n,):
                raise FormatError(f"{y.shape[0]} labels for {n} nodes")
            if n and (y.min() < 0 or y.max() >= self.num_classes):
                raise FormatError(f"label outside [0, {self.num_classes})")
            object.__setattr__(self, "labels", _frozen(y))
        if self.split is not None:
            s = np.asarray(self.split, dtype="<U5")
            if s.shape != (n,):
                raise FormatError(f"{s.shape[0]} split tags for {n} nodes")
            bad = set(np.unique(s)) - set(SPLIT_TAGS)
            if bad:
                raise FormatError(f"unknown split tags {sorted(bad)}")
            object.__setattr__(self, "split", _frozen(s))
        if self.num_classes < 1:
            raise FormatError("num_classes must be >= 1")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def num_edges(self) -> int:
        return self.edges.shape[0]

    def ids(self, tag: str) -> np.ndarray:
        """Node ids carrying split ``tag``."""
        if self.split is None:
            raise ConfigError("graph has no split")
        return np.flatnonzero(self.split == tag)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        """Binary symmetric adjacency (no self-loops), CSR with sorted indices."""
        n = self.n
        e = self.edges
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        a.sort_indices()
        return a

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr).astype(np.int64)

    def neighbors(self, i: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[i] : a.indptr[i + 1]]

    def without_labels(self) -> "Graph":
        return replace(self, labels=None)

    def with_split(self, split) -> "Graph":
        return replace(self, split=split)


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    """``D^-1/2 (A + I) D^-1/2`` in CSR form, with ``D = deg + 1``."""

    matrix: sp.csr_matrix

    @property
    def shape(self):
        return self.matrix.shape

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()


def normalize_adjacency(g: Graph) -> NormalizedAdjacency:
    n = g.n
    inv = 1.0 / np.sqrt(g.degrees.astype(np.float64) + 1.0)
    e = g.edges
    # one value per unordered pair, mirrored, so the result is exactly symmetric
    w = inv[e[:, 0]] * inv[e[:, 1]]
    rows = np.concatenate([e[:, 0], e[:, 1], np.arange(n)])
    cols = np.concatenate([e[:, 1], e[:, 0], np.arange(n)])
    vals = np.concatenate([w, w, inv * inv])
    m = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    m.sort_indices()
    return NormalizedAdjacency(m)


def mean_adjacency(g: Graph) -> sp.csr_matrix:
    """Row-normalized adjacency; isolated nodes get an all-zero row."""
    a = g.adjacency
    deg = g.degrees.astype(np.float64)
    scale = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg > 0)
    m = sp.diags(scale) @ a
    return sp.csr_matrix(m)


def row_normalize_features(g: Graph) -> Graph:
    """Scale each feature row to unit L1 norm (zero rows untouched)."""
    x = g.features
    s = np.abs(x).sum(axis=1, keepdims=True)
    s[s == 0] = 1.0
    return replace(g, features=x / s)


# ----------------------------------------------------------------------------- I/O


def load_dataset(directory) -> Graph:
    """Read a dataset directory (meta.json, edges.tsv, features.csv, labels.csv, split.csv?)."""
    root = Path(directory)
    required = ["meta.json", "edges.tsv", "features.csv", "labels.csv"]
    for name in required:
        if not (root / name).is_file():
            raise LoadError(f"missing {root / name}")
    try:
        meta = json.loads((root / "meta.json").read_text(encoding="utf-8"))
        n, d, c = int(meta["n"]), int(meta["d"]), int(meta["num_classes"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad meta.json: {exc}") from exc

    features = _read_matrix(root / "features.csv", n, d)
    labels = _read_ints(root / "labels.csv")
    if labels.shape[0] != n:
        raise FormatError(f"labels.csv has {labels.shape[0]} rows, meta says n={n}")
    edges = _read_edges(root / "edges.tsv")
    if edges.size and (edges.min() < 0 or edges.max() >= n):
        raise FormatError(f"edges.tsv references a node outside [0, {n})")

    split = None
    if (root / "split.csv").is_file():
        split = np.array((root / "split.csv").read_text(encoding="utf-8").split(), dtype="<U5")
        if split.shape[0] != n:
            raise FormatError(f"split.csv has {split.shape[0]} rows, meta says n={n}")

    kept, dropped = canonical_edges(edges, n)
    if dropped:
        log.info("%s: dropped %d duplicate or self-loop edge entries", root, dropped)
    return Graph(features, kept, labels, c, split)


def _read_matrix(path: Path, n: int, d: int) -> np.ndarray:
    text = path.read_text(encoding="utf-8").strip()
    if n == 0:
        return np.zeros((0, d))
    try:
        rows = [np.array(line.split(","), dtype=np.float64) for line in text.split("\n")]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if len(rows) != n or any(r.shape[0] != d for r in rows):
        raise FormatError(f"{path}: expected {n} rows of {d} values")
    x = np.vstack(rows)
    if not np.all(np.isfinite(x)):
        raise FormatError(f"{path}: non-finite feature value")
    return x


def _read_ints(path: Path) -> np.ndarray:
    try:
        return np.array(path.read_text(encoding="utf-8").split(), dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def _read_edges(path: Path) -> np.ndarray:
    tokens = path.read_text(encoding="utf-8").split()
    if len(tokens) % 2:
        raise FormatError(f"{path}: odd number of endpoints")
    try:
        return np.array(tokens, dtype=np.int64).reshape(-1, 2)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_dataset(g: Graph, directory) -> Path:
    if g.labels is None:
        raise ArgumentError("cannot save a graph without labels")
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    meta = {"n": g.n, "d": g.d, "num_classes": g.num_classes}
    (root / "meta.json").write_text(json.dumps(meta) + "\n", encoding="utf-8")
    with open(root / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{i}\t{j}\n" for i, j in g.edges)
    np.savetxt(root / "features.csv", g.features, fmt="%.17g", delimiter=",", newline="\n")
    np.savetxt(root / "labels.csv", g.labels, fmt="%d", newline="\n")
    if g.split is not None:
        (root / "split.csv").write_text("\n".join(g.split) + "\n", encoding="utf-8")
    return root


# ------------------------------------------------------------------------- synthetic


def generate_sbm(
    classes: int,
    nodes_per_class: int,
    p_in: float,
    p_out: float,
    feature_dim: int,
    feature_shift: float,
    seed: int = 0,
) -> Graph:
    """Stochastic block model with Gaussian features shifted by class.

    Class ``c`` has feature mean ``feature_shift * e_(c mod feature_dim)`` and unit
    variance; nodes are numbered block by block.
    """
    if not 0.0 <= p_out <= p_in <= 1.0:
        raise ConfigError(f"need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if nodes_per_class < 1 or classes < 1 or feature_dim < 1:
        raise ConfigError("classes, nodes_per_class and feature_dim must be >= 1")
    rng = Rng(seed)
    n = classes * nodes_per_class
    labels = np.repeat(np.arange(classes), nodes_per_class)
    edges = []
    for i in range(n - 1):
        j = np.arange(i + 1, n)
        prob = np.where(labels[j] == labels[i], p_in, p_out)
        hit = rng.child("edges", i).uniform(len(j)) < prob
        edges.append(np.stack([np.full(hit.sum(), i), j[hit]], axis=1))
    e = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    x = rng.child("features").normal((n, feature_dim))
    x[np.arange(n), labels % feature_dim] += feature_shift
    return Graph(x, e, labels, classes)


# Published statistics of the Planetoid citation graphs: class sizes, vocabulary
# size, undirected edge count, edge homophily and mean words per document.
# ``signal`` (fraction of a document's words drawn from its class vocabulary) is the
# one free knob, set so that a feature-only classifier at the public split lands
# near the feature-only accuracy commonly reported for each dataset (~57% / ~59%).
PLANETOID_PROFILES = {
    "cora": dict(class_sizes=(351, 217, 418, 818, 426, 298, 180), d=1433, edges=5278,
                 homophily=0.81, words=18.2, signal=0.26, isolated=0),
    "citeseer": dict(class_sizes=(264, 590, 668, 701, 596, 508), d=3703, edges=4552,
                     homophily=0.74, words=31.7, signal=0.28, isolated=48),
}


def generate_planetoid_like(profile: str = "cora", seed: int = 0) -> Graph:
    """Synthetic citation graph matching a Planetoid dataset's published statistics.

    Binary bag-of-words features from a two-component topic mixture (per-class
    vocabulary vs. shared background, both Zipf-weighted), a degree-corrected edge
    process with the dataset's homophily, and the public split layout (20 train nodes
    per class, 500 validation, 1000 test, the rest untagged).
    """
    if profile not in PLANETOID_PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; known: {sorted(PLANETOID_PROFILES)}")
    p = PLANETOID_PROFILES[profile]
    rng = Rng(seed).child("planetoid", profile)
    sizes = np.array(p["class_sizes"])
    c, d = len(sizes), p["d"]
    n = int(sizes.sum())
    labels = rng.child("labels").permutation(n)
    labels = np.repeat(np.arange(c), sizes)[labels]

    # vocabulary: disjoint class-specific blocks covering 60% of the words
    vocab = rng.child("vocab").permutation(d)
    block = int(0.6 * d) // c
    class_words = [vocab[k * block : (k + 1) * block] for k in range(c)]
    zipf_c = 1.0 / np.arange(1, block + 1) ** 0.8
    zipf_c /= zipf_c.sum()
    zipf_bg = 1.0 / np.arange(1, d + 1) ** 0.8
    zipf_bg /= zipf_bg.sum()
    bg_order = rng.child("bg").permutation(d)

    wr = rng.child("words")
    counts = 1 + np.floor(-np.log(1.0 - wr.uniform(n)) * (p["words"] - 1)).astype(int)
    x = np.zeros((n, d))
    cdf_c, cdf_bg = np.cumsum(zipf_c), np.cumsum(zipf_bg)
    for i in range(n):
        k = counts[i]
        from_class = wr.uniform(k) < p["signal"]
        u = wr.uniform(k)
        own = class_words[labels[i]][np.minimum(np.searchsorted(cdf_c, u), block - 1)]
        bg = bg_order[np.minimum(np.searchsorted(cdf_bg, u), d - 1)]
        x[i, np.where(from_class, own, bg)] = 1.0

    # degree-corrected edges: heavy-tailed propensities, class-homophilous pairing
    er = rng.child("edges")
    theta = (1.0 - er.uniform(n)) ** (-1.0 / 1.8)
    members = [np.flatnonzero(labels == k) for k in range(c)]
    others = [np.flatnonzero(labels != k) for k in range(c)]

    def partner(u: int) -> int:
        pool = members[labels[u]] if er.uniform(1)[0] < p["homophily"] else others[labels[u]]
        w = np.cumsum(theta[pool])
        return int(pool[min(np.searchsorted(w, er.uniform(1)[0] * w[-1]), len(pool) - 1)])

    isolated = set(er.choice(n, p["isolated"]).tolist()) if p["isolated"] else set()
    active = np.array([i for i in range(n) if i not in isolated])
    keys: set[int] = set()

    def add(u: int, v: int) -> None:
        if u != v and u not in isolated and v not in isolated:
            keys.add(min(u, v) * n + max(u, v))

    for u in active[er.permutation(len(active))]:
        v = partner(int(u))
        while v == u:
            v = partner(int(u))
        add(int(u), v)
    cum = np.cumsum(theta[active])
    while len(keys) < p["edges"]:
        u = int(active[min(np.searchsorted(cum, er.uniform(1)[0] * cum[-1]), len(active) - 1)])
        add(u, partner(u))
    e = np.array(sorted(keys), dtype=np.int64)
    edges = np.stack([e // n, e % n], axis=1)
    return planetoid_split(Graph(x, edges, labels, c), seed=seed)


# ---------------------------------------------------------------------------- splits


def planetoid_split(g: Graph, per_class: int = 20, val: int = 500, test: int = 1000, seed: int = 0) -> Graph:
    """Public-split layout: ``per_class`` train nodes per class, then val/test, rest 'none'."""
    if g.labels is None:
        raise ArgumentError("planetoid_split needs labels")
    order = Rng(seed).child("planetoid_split").permutation(g.n)
    tags = np.full(g.n, "none", dtype="<U5")
    taken = np.zeros(g.n, dtype=bool)
    for c in range(g.num_classes):
        idx = order[g.labels[order] == c][:per_class]
        tags[idx] = "train"
        taken[idx] = True
    rest = order[~taken[order]]
    tags[rest[:val]] = "val"
    tags[rest[val : val + test]] = "test"
    return g.with_split(tags)


def split_nodes(g: Graph, train_frac: float, val_frac: float, test_frac: float, seed: int = 0,
                respect_existing: bool = True) -> Graph:
    """Random train/val/test split with floor counts; the remainder goes to test.

    A graph that already carries a split (e.g. from split.csv) is returned untouched
    unless ``respect_existing`` is false.
    """
    fracs = (train_frac, val_frac, test_frac)
    if any(f < 0 for f in fracs) or abs(sum(fracs) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be >= 0 and sum to 1, got {fracs}")
    if respect_existing and g.split is not None:
        return g
    n = g.n
    n_train, n_val = math.floor(train_frac * n), math.floor(val_frac * n)
    order = Rng(seed).child("split").permutation(n)
    tags = np.full(n, "test", dtype="<U5")
    tags[order[:n_train]] = "train"
    tags[order[n_train : n_train + n_val]] = "val"
    return g.with_split(tags)


# -------------------------------------------------------------------------- subgraphs


def induced_subgraph(g: Graph, node_ids: Sequence[int]) -> tuple[Graph, np.ndarray]:
    """Subgraph on ``node_ids``; new node ``i`` is original node ``node_ids[i]``."""
    ids = np.asarray(node_ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= g.n):
        raise ArgumentError(f"node id outside [0, {g.n})")
    if np.unique(ids).size != ids.size:
        raise ArgumentError("duplicate node id")
    local = np.full(g.n, -1, dtype=np.int64)
    local[ids] = np.arange(ids.size)
    e = g.edges
    keep = (local[e[:, 0]] >= 0) & (local[e[:, 1]] >= 0)
    sub_edges = local[e[keep]]
    sub = Graph(
        g.features[ids],
        sub_edges,
        None if g.labels is None else g.labels[ids],
        g.num_classes,
        None if g.split is None else g.split[ids],
    )
    return sub, ids.copy()


def k_hop_nodes(g: Graph, seeds: Sequence[int], hops: int) -> np.ndarray:
    """Sorted ids of all nodes within ``hops`` edges of any seed."""
    a = g.adjacency
    seen = np.zeros(g.n, dtype=bool)
    frontier = np.unique(np.asarray(seeds, dtype=np.int64))
    seen[frontier] = True
    for _ in range(hops):
        if frontier.size == 0:
            break
        nxt = np.unique(a[frontier].indices)
        nxt = nxt[~seen[nxt]]
        seen[nxt] = True
        frontier = nxt
    return np.flatnonzero(seen)
