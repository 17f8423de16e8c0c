"""Query selection in embedding space.

The headline strategy clusters the embeddings into ``q_n`` groups with k-means and
queries, from every cluster, the member closest to its centroid. The other tags
are the diversity / uncertainty baselines it is compared against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import ArgumentError, ConfigError
from .numkit import Rng

STRATEGIES = ("kmeans", "random", "farthest_first", "kcenter_greedy", "entropy", "margin", "herding")
UNCERTAINTY = ("entropy", "margin")


@dataclass(frozen=True)
class SelectionStrategy:
    tag: str = "kmeans"
    rounds: int = 5
    restarts: int = 10

    def __post_init__(self):
        if self.tag not in STRATEGIES:
            raise ConfigError(f"unknown selection strategy {self.tag!r}; known: {', '.join(STRATEGIES)}")
        if self.rounds < 1 or self.restarts < 1:
            raise ConfigError("rounds and restarts must be >= 1")

    @classmethod
    def of(cls, value) -> "SelectionStrategy":
        return value if isinstance(value, cls) else cls(str(value))


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int
    history: list  # inertia after each assignment step of the winning restart


def _sq_dists(x: np.ndarray, x_sq: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = x @ c.T
    d *= -2.0
    d += x_sq[:, None]
    d += np.sum(c * c, axis=1)[None, :]
    return np.maximum(d, 0.0, out=d)


def _sq_dists_one(x: np.ndarray, x_sq: np.ndarray, i: int) -> np.ndarray:
    # squared distance to the single row x[i]: a matvec instead of a (n, 1) product
    v = x[i]
    d = x @ v
    d *= -2.0
    d += x_sq
    d += np.dot(v, v)
    return np.maximum(d, 0.0, out=d)


def _kmeanspp(x: np.ndarray, x_sq: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(n)[0])]
    closest = _sq_dists_one(x, x_sq, chosen[0])
    for _ in range(1, k):
        total = closest.sum()
        u = rng.uniform(1)[0]
        if total <= 0.0:
            # every point coincides with a center already: take a uniform unused index
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(free[min(int(u * free.size), free.size - 1)])
        else:
            cum = np.cumsum(closest)
            nxt = int(min(np.searchsorted(cum, u * total, side="right"), n - 1))
            while closest[nxt] == 0.0 and nxt + 1 < n:  # never pick a zero-weight point
                nxt += 1
        chosen.append(nxt)
        np.minimum(closest, _sq_dists_one(x, x_sq, nxt), out=closest)
    return x[chosen].copy()


def _assign(x: np.ndarray, x_sq: np.ndarray, centroids: np.ndarray):
    d = _sq_dists(x, x_sq, centroids)
    labels = np.argmin(d, axis=1)
    return labels, d[np.arange(x.shape[0]), labels]


def _fill_empty(x: np.ndarray, labels: np.ndarray, cost: np.ndarray, centroids: np.ndarray, k: int):
    """Reseed each empty cluster at the point farthest from its current centroid."""
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        donors = counts[labels] > 1
        far = int(np.argmax(np.where(donors, cost, -1.0)))
        counts[labels[far]] -= 1
        labels[far] = j
        cost[far] = 0.0
        counts[j] = 1
        centroids[j] = x[far]
    return labels, cost


def _lloyd(x, x_sq, centroids, k, max_iter, tol_abs):
    history = []
    n = x.shape[0]
    ones = np.ones(n)
    labels, cost = _assign(x, x_sq, centroids)
    labels, cost = _fill_empty(x, labels, cost, centroids, k)
    history.append(float(cost.sum()))
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        # cluster sums as a one-hot (k x n) product, built directly in CSR layout
        counts = np.bincount(labels, minlength=k)
        indptr = np.concatenate(([0], np.cumsum(counts)))
        member = sp.csr_matrix((ones, np.argsort(labels, kind="stable"), indptr), shape=(k, n))
        new = np.asarray(member @ x) / counts[:, None]
        shift = float(np.sum((new - centroids) ** 2))
        centroids = new
        new_labels, cost = _assign(x, x_sq, centroids)
        new_labels, cost = _fill_empty(x, new_labels, cost, centroids, k)
        history.append(float(cost.sum()))
        stable = np.array_equal(new_labels, labels)
        labels = new_labels
        if stable or shift <= tol_abs:
            break
    return labels, centroids, float(cost.sum()), n_iter, history


def kmeans(h: np.ndarray, k: int, seed: int = 0, restarts: int = 10, max_iter: int = 300,
           tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds; best inertia over ``restarts``.

    Every cluster is non-empty. Convergence: labels stop changing, or the summed
    squared centroid shift drops below ``tol`` times the mean per-dimension variance
    of ``h`` (a scale-free threshold).
    """
    x = np.asarray(h, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k <= n:
        raise ArgumentError(f"need 1 <= k <= n, got k={k}, n={n}")
    x_sq = np.sum(x * x, axis=1)
    tol_abs = tol * float(np.mean(np.var(x, axis=0))) if n > 1 else 0.0
    rng = Rng(seed).child("kmeans")
    best = None
    for r in range(restarts):
        init = _kmeanspp(x, x_sq, k, rng.child("restart", r))
        labels, cent, inertia, n_iter, hist = _lloyd(x, x_sq, init, k, max_iter, tol_abs)
        if best is None or inertia < best.inertia:
            best = KMeansResult(labels, cent, inertia, n_iter, hist)
    return best


def class_coverage(ids, labels, num_classes: int) -> float:
    """Fraction of the ``num_classes`` classes hit at least once by ``ids``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        return 0.0
    return len(np.unique(np.asarray(labels)[ids])) / num_classes


def _kmeans_pick(h: np.ndarray, q_n: int, seed: int, restarts: int) -> np.ndarray:
    res = kmeans(h, q_n, seed, restarts)
    out = []
    for j in range(q_n):
        members = np.flatnonzero(res.assignments == j)
        d = np.sum((h[members] - res.centroids[j]) ** 2, axis=1)
        # exact ties (e.g. the two members of a pair around its midpoint) differ only by
        # rounding; a relative band keeps "lowest id wins" independent of the scale of h
        near = d <= d.min() * (1.0 + 1e-9)
        out.append(int(members[near][0]))
    return np.array(out, dtype=np.int64)


def _greedy_cover(h: np.ndarray, q_n: int, rng: Rng) -> np.ndarray:
    """Gonzalez's farthest-point traversal from a uniformly drawn start."""
    x_sq = np.sum(h * h, axis=1)
    first = int(rng.integers(h.shape[0])[0])
    picked = [first]
    closest = _sq_dists(h, x_sq, h[[first]])[:, 0]
    closest[first] = -np.inf
    for _ in range(1, q_n):
        nxt = int(np.argmax(closest))
        picked.append(nxt)
        closest = np.minimum(closest, _sq_dists(h, x_sq, h[[nxt]])[:, 0])
        closest[picked] = -np.inf
    return np.array(picked, dtype=np.int64)


def _herding(h: np.ndarray, q_n: int) -> np.ndarray:
    mu = h.mean(axis=0)
    running = np.zeros_like(mu)
    free = np.ones(h.shape[0], dtype=bool)
    picked = []
    for t in range(q_n):
        # mean of (picked + x) is closest to mu  <=>  x closest to (t+1)mu - running
        target = (t + 1) * mu - running
        d = np.sum((h - target) ** 2, axis=1)
        d[~free] = np.inf
        nxt = int(np.argmin(d))
        picked.append(nxt)
        free[nxt] = False
        running += h[nxt]
    return np.array(picked, dtype=np.int64)


def _round_sizes(q_n: int, rounds: int) -> list[int]:
    rounds = min(rounds, q_n)
    base, extra = divmod(q_n, rounds)
    return [base + (i < extra) for i in range(rounds)]


def _uncertainty(h, q_n, tag, seed, oracle, num_classes, rounds, restarts):
    from .gnn import train_head  # local import: gnn depends on nothing here
    from .numkit import softmax

    sizes = _round_sizes(q_n, rounds)
    ids = _kmeans_pick(h, sizes[0], seed, restarts)
    labels = np.asarray(oracle(ids), dtype=np.int64)
    for r, size in enumerate(sizes[1:], start=1):
        head = train_head(h[ids], labels, num_classes, seed=seed + r)
        p = softmax(h @ head.weight + head.bias)
        if tag == "entropy":
            score = -np.sum(p * np.log(np.clip(p, 1e-300, None)), axis=1)  # higher = pick
        else:
            top2 = np.sort(p, axis=1)[:, -2:] if num_classes > 1 else np.hstack([np.zeros((len(p), 1)), p])
            score = -(top2[:, 1] - top2[:, 0])  # small margin = pick
        score[ids] = -np.inf
        order = np.lexsort((np.arange(len(score)), -score))  # best score, then lowest id
        new = order[:size]
        ids = np.concatenate([ids, new])
        labels = np.concatenate([labels, np.asarray(oracle(new), dtype=np.int64)])
    return ids, labels


def select_queries_with_responses(h: np.ndarray, q_n: int, strategy="kmeans", seed: int = 0,
                                  victim_oracle: Callable | None = None, num_classes: int | None = None):
    """Like :func:`select_queries`, also returning labels obtained during selection.

    One-shot strategies never call the oracle and return ``None`` for the labels.
    """
    s = SelectionStrategy.of(strategy)
    h = np.asarray(h, dtype=np.float64)
    n = h.shape[0]
    if not 1 <= q_n <= n:
        raise ArgumentError(f"need 1 <= q_n <= n, got q_n={q_n}, n={n}")
    if not np.all(np.isfinite(h)):
        raise ArgumentError("embeddings contain non-finite values")
    rng = Rng(seed).child("select", s.tag)
    if s.tag in UNCERTAINTY:
        if victim_oracle is None or num_classes is None:
            raise ConfigError(f"{s.tag} selection needs a victim oracle and num_classes")
        return _uncertainty(h, q_n, s.tag, seed, victim_oracle, num_classes, s.rounds, s.restarts)
    if s.tag == "kmeans":
        ids = _kmeans_pick(h, q_n, seed, s.restarts)
    elif s.tag == "random":
        ids = rng.choice(n, q_n).astype(np.int64)
    elif s.tag in ("farthest_first", "kcenter_greedy"):
        ids = _greedy_cover(h, q_n, rng)
    else:
        ids = _herding(h, q_n)
    return ids, None


def select_queries(h: np.ndarray, q_n: int, strategy="kmeans", seed: int = 0,
                   victim_oracle: Callable | None = None, num_classes: int | None = None) -> np.ndarray:
    """Pick ``q_n`` distinct node ids (rows of ``h``) to send to the victim."""
    ids, _ = select_queries_with_responses(h, q_n, strategy, seed, victim_oracle, num_classes)
    return ids
