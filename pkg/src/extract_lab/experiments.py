"""Experiment harness: victim scenarios, grid cells and report rows.

Two scenarios:

* transductive: the victim is trained on the labeled graph's train split; the
  adversary holds the same graph without labels; metrics are taken on test nodes.
* inductive: nodes are split 40/10/50; the victim is trained on the subgraph induced
  by train + val nodes; the adversary holds the subgraph induced by test nodes and
  metrics are taken on all of them.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .attack import AttackConfig, DefenseConfig, LocalVictim, dropout_edges, perturb_features, run_attack
from .errors import ConfigError
from .evaluation import EvalReport, accuracy, fidelity, mcnemar
from .gnn import (VictimParams, encode, init_encoder, normalize_embeddings, surrogate_predict, train_victim,
                  victim_predict)
from .graphcore import Graph, induced_subgraph, split_nodes
from .selection import SelectionStrategy, class_coverage, select_queries

log = logging.getLogger(__name__)

# desk-scale stand-in for the inductive benchmarks (see README)
INDUCTIVE_SBM = dict(classes=8, nodes_per_class=250, p_in=0.05, p_out=0.002, feature_dim=32,
                     feature_shift=1.5)


@dataclass
class VictimConfig:
    arch: str = "gcn"
    depth: int = 2
    hidden: int = 256
    epochs: int = 200
    lr: float = 0.01
    dropout: float = 0.5
    weight_decay: float = 5e-4
    output: str = "conv"
    seed: int = 0

    @classmethod
    def transductive(cls, **kw) -> "VictimConfig":
        return cls(**kw)

    @classmethod
    def inductive(cls, **kw) -> "VictimConfig":
        return cls(**{"arch": "sage", "depth": 5, "hidden": 512, **kw})


def transductive_attack(**kw) -> AttackConfig:
    """Surrogate used against citation graphs: 2-layer GCN, SSL-trained by default."""
    return AttackConfig(**{"setting": "transductive", "encoder": "ssl", "arch": "gcn", "depth": 2,
                           "hidden": 256, "out_dim": 256, "activation": "relu", "batch_norm": True, **kw})


def inductive_attack(**kw) -> AttackConfig:
    """Surrogate used in the inductive setting: random 5-layer GCN-512, BN + PReLU."""
    return AttackConfig(**{"setting": "inductive", "encoder": "random_init", "arch": "gcn", "depth": 5,
                           "hidden": 512, "out_dim": 512, "activation": "prelu", "batch_norm": True, **kw})


@dataclass
class Scenario:
    dataset: str
    setting: str
    victim: VictimParams
    victim_config: VictimConfig
    g_d: Graph  # adversary graph; labels kept here for evaluation only
    eval_ids: np.ndarray
    victim_pred: np.ndarray = field(init=False)

    def __post_init__(self):
        self.victim_pred = victim_predict(self.victim, self.g_d, self.eval_ids)

    @property
    def truth(self) -> np.ndarray:
        return self.g_d.labels[self.eval_ids]

    @property
    def victim_acc(self) -> float:
        return accuracy(self.victim_pred, self.truth)


def transductive_scenario(g: Graph, dataset: str, vcfg: VictimConfig | None = None,
                          victim: VictimParams | None = None) -> Scenario:
    vcfg = vcfg or VictimConfig.transductive()
    if g.split is None:
        raise ConfigError("transductive scenario needs a train/val/test split")
    if victim is None:
        victim = train_victim(g, vcfg.arch, vcfg.depth, vcfg.hidden, vcfg.epochs, vcfg.lr, vcfg.dropout,
                              vcfg.seed, vcfg.weight_decay, vcfg.output)
    return Scenario(dataset, "transductive", victim, vcfg, g, g.ids("test"))


def inductive_scenario(g: Graph, dataset: str, vcfg: VictimConfig | None = None,
                       victim: VictimParams | None = None, split_seed: int = 0) -> Scenario:
    vcfg = vcfg or VictimConfig.inductive()
    g = split_nodes(g, 0.4, 0.1, 0.5, split_seed)
    train_val = np.sort(np.concatenate([g.ids("train"), g.ids("val")]))
    g_d, _ = induced_subgraph(g, g.ids("test"))
    if victim is None:
        g_v, _ = induced_subgraph(g, train_val)
        victim = train_victim(g_v, vcfg.arch, vcfg.depth, vcfg.hidden, vcfg.epochs, vcfg.lr, vcfg.dropout,
                              vcfg.seed, vcfg.weight_decay, vcfg.output)
    return Scenario(dataset, "inductive", victim, vcfg, g_d, np.arange(g_d.n))


def shifted_scenario(sc: Scenario, edge_dropout: float = 0.0, feature_fraction: float = 0.0,
                     seed: int = 0) -> Scenario:
    """Same victim, perturbed adversary graph: the victim answers on (and metrics are taken
    on) the shifted copy."""
    g = perturb_features(sc.g_d, feature_fraction, seed)
    g = dropout_edges(g, edge_dropout, seed)
    name = f"{sc.dataset}[edge_drop={edge_dropout:g},feat={feature_fraction:g}]"
    return Scenario(name, sc.setting, sc.victim, sc.victim_config, g, sc.eval_ids)


def config_hash(payload: dict) -> str:
    """sha256 of the canonical JSON (sorted keys, no whitespace) of ``payload``."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def run_cell(sc: Scenario, cfg: AttackConfig, defense: DefenseConfig | None = None, victim=None) -> EvalReport:
    """One (strategy, encoder, q_n, seed) cell against ``sc``'s victim."""
    defense = defense or DefenseConfig()
    start = time.perf_counter()
    handle = victim if victim is not None else LocalVictim(sc.victim, DefenseConfig(defense.p, defense.seed + cfg.seed))
    model, art = run_attack(sc.g_d, handle, cfg)
    pred = surrogate_predict(model, sc.g_d, sc.eval_ids)
    truth = sc.truth
    payload = {"dataset": sc.dataset, "setting": sc.setting, "attack": cfg.to_dict(),
               "victim": asdict(sc.victim_config), "defense": asdict(defense),
               "ssl_objective": art.ssl_objective}
    h = config_hash(payload)
    return EvalReport(
        run_id=h[:12], dataset=sc.dataset, setting=sc.setting, strategy=cfg.label, q_n=cfg.q_n, seed=cfg.seed,
        victim_acc=sc.victim_acc, surrogate_acc=accuracy(pred, truth), fidelity=fidelity(pred, sc.victim_pred),
        mcnemar_p=mcnemar(pred, sc.victim_pred, truth, min(70, truth.size), cfg.seed),
        class_coverage=class_coverage(art.query_ids, sc.g_d.labels, sc.g_d.num_classes),
        seconds=time.perf_counter() - start, config_hash=h)


def grid_configs(base: AttackConfig, encoders, strategies, q_ns, seeds) -> list[AttackConfig]:
    return [replace(base, encoder=e, strategy=s, q_n=q, seed=sd)
            for e in encoders for s in strategies for q in q_ns for sd in seeds]


_WORKER: dict = {}


def _run_worker(args):
    cfg, defense = args
    return run_cell(_WORKER["scenario"], cfg, defense)


def physical_cores() -> int:
    try:
        import psutil

        return psutil.cpu_count(logical=False) or os.cpu_count() or 1
    except ImportError:  # pragma: no cover
        return os.cpu_count() or 1


def run_grid(sc: Scenario, configs: list[AttackConfig], defense: DefenseConfig | None = None,
             jobs: int = 1) -> list[EvalReport]:
    """Run every config; results come back in ``configs`` order whatever ``jobs`` is."""
    if jobs <= 1 or len(configs) <= 1:
        return [run_cell(sc, c, defense) for c in configs]
    import multiprocessing as mp

    _WORKER["scenario"] = sc  # inherited by forked workers
    ctx = mp.get_context("fork")
    with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
        return list(pool.map(_run_worker, [(c, defense) for c in configs]))


COVERAGE_HEADER = ("dataset", "strategy", "q_n", "seed", "class_coverage")


def coverage_rows(sc: Scenario, cfg: AttackConfig, strategies, q_ns, seeds) -> list[list[str]]:
    """Class coverage of the selected query sets, one row per (seed, strategy, q_n).

    Only the untrained encoders are supported (``ssl`` would retrain per seed); each
    seed builds one encoder and reuses its embeddings across strategies and budgets.
    """
    if cfg.encoder != "random_init":
        raise ConfigError("coverage sweeps use the random_init encoder")
    g = sc.g_d.without_labels()
    out = []
    for seed in seeds:
        enc = init_encoder(cfg.arch, cfg.depth, g.d, cfg.hidden, cfg.out_dim, seed, cfg.activation,
                           cfg.batch_norm)
        h = normalize_embeddings(encode(enc, g), cfg.embed_norm)
        for s in strategies:
            for q in q_ns:
                ids = select_queries(h, q, SelectionStrategy(s, cfg.rounds, cfg.restarts), seed)
                cov = class_coverage(ids, sc.g_d.labels, sc.g_d.num_classes)
                out.append([sc.dataset, s, str(q), str(seed), f"{cov:.4f}"])
    return out
