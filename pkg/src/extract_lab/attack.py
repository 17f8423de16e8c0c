"""The extraction pipeline, the flip defense and distribution-shift perturbations.

Pipeline: obtain an encoder without touching the victim (random init or local SSL),
embed the adversary graph, pick ``q_n`` query nodes in embedding space, spend the
budget on exactly those nodes and fit a softmax head on the returned hard labels.
"""

from __future__ import annotations

import logging
import math
import threading
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .errors import ArgumentError, BudgetError, ConfigError
from .gnn import (
    EMBED_NORMS,
    SurrogateModel,
    VictimParams,
    encode,
    init_encoder,
    normalize_embeddings,
    train_e2e_surrogate,
    train_head,
    victim_predict,
)
from .graphcore import Graph
from .numkit import Rng
from .selection import UNCERTAINTY, SelectionStrategy, select_queries_with_responses
from .ssl import OBJECTIVE_TAG, SslConfig, train_ssl_encoder

log = logging.getLogger(__name__)

SETTINGS = ("inductive", "transductive")
ENCODERS = ("random_init", "ssl", "e2e_baseline")


@dataclass
class AttackConfig:
    setting: str = "transductive"
    q_n: int = 10
    strategy: str = "kmeans"
    encoder: str = "ssl"
    arch: str = "gcn"
    depth: int = 2
    hidden: int = 256
    out_dim: int = 256
    activation: str = "relu"
    batch_norm: bool = False
    embed_norm: str = "l2"
    head_lr: float = 0.01
    head_epochs: int = 100
    e2e_epochs: int = 100
    e2e_lr: float = 0.01
    e2e_dropout: float = 0.5
    rounds: int = 5
    restarts: int = 10
    seed: int = 0
    ssl: SslConfig = field(default_factory=SslConfig)

    def __post_init__(self):
        if self.setting not in SETTINGS:
            raise ConfigError(f"setting must be one of {SETTINGS}, got {self.setting!r}")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.embed_norm not in EMBED_NORMS:
            raise ConfigError(f"embed_norm must be one of {EMBED_NORMS}")
        if self.q_n < 1:
            raise ConfigError(f"q_n must be >= 1, got {self.q_n}")
        if isinstance(self.ssl, dict):
            self.ssl = SslConfig(**self.ssl)
        self.selection()  # validates the tag

    def selection(self) -> SelectionStrategy:
        return SelectionStrategy(self.strategy, self.rounds, self.restarts)

    @property
    def label(self) -> str:
        """Report tag such as ``ssl+kmeans``."""
        short = {"random_init": "rinit", "ssl": "ssl", "e2e_baseline": "e2e"}[self.encoder]
        return f"{short}+{self.strategy}"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class QueryResponse:
    node_ids: np.ndarray
    labels: np.ndarray
    budget_remaining: int | None = None

    def __post_init__(self):
        self.node_ids = np.asarray(self.node_ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.node_ids.shape != self.labels.shape:
            raise ArgumentError(f"{self.node_ids.size} ids but {self.labels.size} labels")

    def __len__(self) -> int:
        return int(self.node_ids.size)


@dataclass(frozen=True)
class DefenseConfig:
    p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"flip probability must be in [0, 1], got {self.p}")


def apply_flip_defense(labels, d: DefenseConfig, num_classes: int, stream: tuple = ()) -> np.ndarray:
    """Replace each label, with probability ``d.p``, by a uniform *different* class.

    Position ``i`` uses draws ``2i`` and ``2i+1`` of the stream keyed by
    ``(d.seed, "flip", *stream)``, so a replay with the same stream key is identical.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ArgumentError(f"label outside [0, {num_classes})")
    if d.p == 0.0:
        return labels.copy()
    if num_classes < 2:
        raise ConfigError("flip defense needs at least two classes")
    u = Rng(d.seed).child("flip", *stream).uniform((labels.size, 2))
    offset = 1 + np.minimum(np.floor(u[:, 1] * (num_classes - 1)).astype(np.int64), num_classes - 2)
    return np.where(u[:, 0] < d.p, (labels + offset) % num_classes, labels)


def perturb_features(g: Graph, fraction: float, seed: int = 0) -> Graph:
    """Resample the features of ``ceil(fraction * n)`` random nodes from the per-dimension
    empirical marginals of ``g``."""
    if not 0.0 <= fraction <= 1.0:
        raise ArgumentError(f"fraction must be in [0, 1], got {fraction}")
    m = math.ceil(fraction * g.n)
    if m == 0:
        return g
    rng = Rng(seed).child("perturb_features")
    rows = rng.child("rows").choice(g.n, m)
    donors = rng.child("donors").integers(g.n, m * g.d).reshape(m, g.d)
    x = g.features.copy()
    x[rows] = g.features[donors, np.arange(g.d)[None, :]]
    return replace(g, features=x)


def dropout_edges(g: Graph, fraction: float, seed: int = 0) -> Graph:
    """Drop every undirected edge independently with probability ``fraction``."""
    if not 0.0 <= fraction <= 1.0:
        raise ArgumentError(f"fraction must be in [0, 1], got {fraction}")
    if fraction == 0.0:
        return g
    keep = Rng(seed).child("dropout_edges").uniform(g.num_edges) >= fraction
    return replace(g, edges=g.edges[keep])


# ------------------------------------------------------------------ victim handles


class LocalVictim:
    """In-process victim: predicts on the whole graph it is handed, returns hard labels.

    ``budget`` (optional) mirrors the server's reject-whole rule.
    """

    def __init__(self, params: VictimParams, defense: DefenseConfig | None = None, budget: int | None = None):
        self.params = params
        self.defense = defense or DefenseConfig()
        self.remaining = budget
        self._calls = 0
        self._lock = threading.Lock()

    @property
    def num_classes(self) -> int:
        return self.params.num_classes

    @property
    def depth(self) -> int:
        return self.params.depth

    def query(self, g: Graph, ids) -> QueryResponse:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if ids.size == 0:
            raise ArgumentError("empty query")
        with self._lock:
            if self.remaining is not None:
                if ids.size > self.remaining:
                    raise BudgetError(f"query of {ids.size} nodes exceeds remaining budget {self.remaining}")
                self.remaining -= ids.size
            call = self._calls
            self._calls += 1
        labels = victim_predict(self.params, g, ids)
        labels = apply_flip_defense(labels, self.defense, self.num_classes, ("local", call))
        return QueryResponse(ids, labels, self.remaining)


class CountingVictim:
    """Wraps a victim handle; refuses to spend more than ``limit`` node predictions."""

    def __init__(self, inner, limit: int):
        self.inner = inner
        self.limit = limit
        self.used = 0

    @property
    def num_classes(self) -> int:
        return self.inner.num_classes

    def query(self, g: Graph, ids) -> QueryResponse:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if self.used + ids.size > self.limit:
            raise BudgetError(f"attack would use {self.used + ids.size} queries, limit is {self.limit}")
        resp = self.inner.query(g, ids)
        if not np.array_equal(resp.node_ids, ids):
            raise ArgumentError("victim answered different nodes than asked")
        self.used += ids.size
        return resp


# ------------------------------------------------------------------------ pipeline


@dataclass
class AttackArtifacts:
    query_ids: np.ndarray
    responses: np.ndarray
    embeddings: np.ndarray
    queries_used: int
    seconds: float
    ssl_objective: str | None = None


def run_attack(g_d: Graph, victim, cfg: AttackConfig) -> tuple[SurrogateModel, AttackArtifacts]:
    """Build a surrogate of ``victim`` from at most ``cfg.q_n`` hard-label answers."""
    start = time.perf_counter()
    g = g_d.without_labels() if g_d.labels is not None else g_d
    if cfg.q_n > g.n:
        raise ArgumentError(f"q_n={cfg.q_n} exceeds the {g.n} adversary nodes")
    num_classes = victim.num_classes
    counted = CountingVictim(victim, cfg.q_n)

    if cfg.encoder == "ssl":
        encoder = train_ssl_encoder(g, cfg.arch, cfg.depth, cfg.hidden, cfg.out_dim,
                                    replace(cfg.ssl, seed=cfg.seed), cfg.activation, cfg.batch_norm)
    else:
        encoder = init_encoder(cfg.arch, cfg.depth, g.d, cfg.hidden, cfg.out_dim, cfg.seed,
                               cfg.activation, cfg.batch_norm)
    h = normalize_embeddings(encode(encoder, g), cfg.embed_norm)

    def oracle(ids):
        return counted.query(g, ids).labels

    ids, labels = select_queries_with_responses(h, cfg.q_n, cfg.selection(), cfg.seed, oracle, num_classes)
    if labels is None:
        labels = counted.query(g, ids).labels
    if cfg.strategy not in UNCERTAINTY and counted.used != cfg.q_n:
        raise BudgetError(f"one-shot strategy used {counted.used} queries, expected {cfg.q_n}")

    if cfg.encoder == "e2e_baseline":
        model = train_e2e_surrogate(g, ids, labels, num_classes, cfg.arch, cfg.depth, cfg.hidden, cfg.out_dim,
                                    cfg.e2e_epochs, cfg.e2e_lr, cfg.e2e_dropout, cfg.seed, cfg.activation,
                                    cfg.batch_norm)
    else:
        head = train_head(h[ids], labels, num_classes, cfg.head_lr, cfg.head_epochs, cfg.seed)
        model = SurrogateModel(encoder, head, cfg.embed_norm)
    seconds = time.perf_counter() - start
    log.info("attack %s q_n=%d seed=%d: %d queries, %.2fs", cfg.label, cfg.q_n, cfg.seed, counted.used, seconds)
    art = AttackArtifacts(ids, labels, h, counted.used, seconds,
                          OBJECTIVE_TAG if cfg.encoder == "ssl" else None)
    return model, art
