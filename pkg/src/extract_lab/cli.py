"""Command line entry point: ``extract-lab <subcommand> [flags]``.

Subcommands: ``gen-data``, ``train-victim``, ``serve``, ``attack``, ``eval``, ``bench``.
Values are resolved as built-in defaults < ``--config`` file < command-line flags; the
``EXTRACT_LAB_SEED`` environment variable supplies a seed when neither the file nor a
flag sets one. Exit status: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

import tomli

from .attack import ENCODERS, SETTINGS, AttackConfig, DefenseConfig
from .errors import ArgumentError, ConfigError, ExtractLabError, FormatError
from .evaluation import aggregate_rows, emit_report, read_report
from .experiments import (
    INDUCTIVE_SBM,
    VictimConfig,
    grid_configs,
    inductive_attack,
    inductive_scenario,
    physical_cores,
    run_cell,
    run_grid,
    transductive_attack,
    transductive_scenario,
)
from .gnn import ARCHS, VictimParams, load_model, save_model
from .graphcore import (
    PLANETOID_PROFILES,
    Graph,
    generate_planetoid_like,
    generate_sbm,
    load_dataset,
    planetoid_split,
    save_dataset,
    split_nodes,
)
from .selection import STRATEGIES
from .ssl import SslConfig

log = logging.getLogger("extract_lab")

ENCODER_ALIASES = {"e2e": "e2e_baseline", "rinit": "random_init", "random": "random_init"}
SEED_ENV = "EXTRACT_LAB_SEED"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are configuration errors (exit 1)
        raise ConfigError(f"{self.prog}: {message}")


# ------------------------------------------------------------------------ values


def _ints(text) -> list[int]:
    if isinstance(text, int):
        return [text]
    if isinstance(text, list):
        return [int(v) for v in text]
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _words(text) -> list[str]:
    if isinstance(text, list):
        return [str(v) for v in text]
    return [v.strip() for v in str(text).split(",") if v.strip()]


def load_config(path) -> dict:
    """Read a TOML experiment file (see README for the keys)."""
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"bad config {path}: {e}") from e


class Settings:
    """Layered lookup: flag value if given, else config file (dotted keys), else default."""

    def __init__(self, args: argparse.Namespace, config: dict):
        self.args = args
        self.config = config

    def get(self, flag: str, key: str | None = None, default=None):
        value = getattr(self.args, flag, None)
        if value is not None:
            return value
        node = self.config
        for part in (key or flag).split("."):
            if not isinstance(node, dict) or part not in node:
                return default
            node = node[part]
        return node

    def seed(self, flag="seed", key="seed") -> int:
        """Seed for ``flag``/``key``; falls back to the global seed, then $EXTRACT_LAB_SEED, then 0."""
        value = self.get(flag, key)
        if value is None and flag != "seed":
            value = self.get("seed", "seed")
        if value is None:
            value = os.environ.get(SEED_ENV, 0)
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {value!r}") from None


def resolve_dataset(spec: str, seed: int = 0) -> Graph:
    """A dataset directory, or ``synthetic:<profile>`` / ``sbm`` for the built-in generators.

    Generated graphs use ``seed``; split randomness is seeded separately by the caller.
    """
    if spec.startswith("synthetic:"):
        profile = spec.split(":", 1)[1]
        return generate_planetoid_like(profile, seed)
    if spec == "sbm":
        return generate_sbm(**INDUCTIVE_SBM, seed=seed)
    return load_dataset(spec)


def _dataset_name(spec: str) -> str:
    return spec.split(":", 1)[1] if ":" in spec else Path(spec).name or spec


# ---------------------------------------------------------------------- commands


def cmd_gen_data(s: Settings) -> int:
    out = s.get("out", "output")
    if out is None:
        raise ConfigError("gen-data needs --out")
    kind = s.get("kind", "data.kind", "sbm")
    seed = s.seed()
    if kind == "planetoid":
        g = generate_planetoid_like(s.get("profile", "data.profile", "cora"), seed)
    elif kind == "sbm":
        params = {k: s.get(k, f"data.{k}", INDUCTIVE_SBM[k]) for k in INDUCTIVE_SBM}
        g = generate_sbm(**params, seed=seed)
        split = s.get("split", "data.split")
        if split:
            tr, va, te = (float(v) for v in _words(split))
            g = split_nodes(g, tr, va, te, seed)
    else:
        raise ConfigError(f"unknown data kind {kind!r} (sbm | planetoid)")
    root = save_dataset(g, out)
    print(json.dumps({"path": str(root), "n": g.n, "d": g.d, "edges": g.num_edges,
                      "num_classes": g.num_classes}))
    return 0


def _victim_config(s: Settings, setting: str) -> VictimConfig:
    base = VictimConfig.inductive() if setting == "inductive" else VictimConfig.transductive()
    kw = {}
    for f in fields(VictimConfig):
        value = s.get(f"victim_{f.name}", f"victim.{f.name}")
        if value is not None:
            kw[f.name] = value
    if "seed" not in kw:
        kw["seed"] = s.seed("victim_seed", "victim.seed")
    return replace(base, **kw)


def _prepare_graph(g: Graph, setting: str, split_seed: int) -> Graph:
    """Give an unsplit transductive graph the public-split layout when it is big enough
    (20 per class + 500 val + 1000 test), else a random 40/10/50 split."""
    if setting == "transductive" and g.split is None:
        if g.n >= 20 * g.num_classes + 1500:
            return planetoid_split(g, seed=split_seed)
        return split_nodes(g, 0.4, 0.1, 0.5, split_seed)
    return g


def cmd_train_victim(s: Settings) -> int:
    setting = s.get("setting", default="transductive")
    spec = s.get("dataset")
    out = s.get("out", "victim.output")
    if spec is None or out is None:
        raise ConfigError("train-victim needs --dataset and --out")
    vcfg = _victim_config(s, setting)
    split_seed = int(s.get("split_seed", default=0))
    g = _prepare_graph(resolve_dataset(spec), setting, split_seed)
    start = time.perf_counter()
    if setting == "inductive":
        sc = inductive_scenario(g, _dataset_name(spec), vcfg, split_seed=split_seed)
    else:
        sc = transductive_scenario(g, _dataset_name(spec), vcfg)
    save_model(sc.victim, out)
    print(json.dumps({"model": str(out), "setting": setting, "test_acc": round(sc.victim_acc, 6),
                      "seconds": round(time.perf_counter() - start, 3)}))
    return 0


def cmd_serve(s: Settings) -> int:
    from .serve import ServerConfig, VictimServer

    model = s.get("model", "serve.model")
    if model is None:
        raise ConfigError("serve needs --model")
    keys = s.get("api_key", "serve.api_keys") or ["test-key"]
    keys = [keys] if isinstance(keys, str) else keys
    cfg = ServerConfig(model, int(s.get("qn", "serve.budget", 100)), tuple(keys),
                       DefenseConfig(float(s.get("flip_p", "defense.p", 0.0))),
                       s.get("host", "serve.host", "127.0.0.1"), int(s.get("port", "serve.port", 8080)),
                       s.seed())
    server = VictimServer(cfg)
    print(json.dumps({"url": server.url, "budget": cfg.budget, "flip_p": cfg.defense.p}), flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.httpd.server_close()
    return 0


ATTACK_FLAGS = ("arch", "depth", "hidden", "out_dim", "activation", "batch_norm", "embed_norm", "head_lr",
                "head_epochs", "e2e_epochs", "e2e_lr", "e2e_dropout", "rounds", "restarts")


def attack_configs(s: Settings, setting: str) -> list[AttackConfig]:
    overrides = {k: s.get(k, f"attack.{k}") for k in ATTACK_FLAGS}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    ssl_kw = dict(s.config.get("ssl", {}))
    for k in ("mask_ratio", "lr", "epochs", "invariance_weight"):
        value = getattr(s.args, f"ssl_{k}", None)
        if value is not None:
            ssl_kw[k] = value
    factory = inductive_attack if setting == "inductive" else transductive_attack
    base = factory(**overrides, ssl=SslConfig(**ssl_kw))
    default_encoder = "random_init" if setting == "inductive" else "ssl"
    encoders = [ENCODER_ALIASES.get(e, e) for e in _words(s.get("encoder", "attack.encoder", default_encoder))]
    for e in encoders:
        if e not in ENCODERS:
            raise ConfigError(f"unknown encoder {e!r}; known: {', '.join(ENCODERS)} (aliases e2e, rinit)")
    strategies = _words(s.get("strategy", "attack.strategy", "kmeans"))
    q_ns = _ints(s.get("qn", "attack.q_n", 10))
    seeds = s.get("seeds", "attack.seeds")
    seeds = _ints(seeds) if seeds is not None else [s.seed()]
    if not (encoders and strategies and q_ns and seeds):
        raise ConfigError("empty encoder, strategy, q_n or seed list")
    return grid_configs(base, encoders, strategies, q_ns, seeds)


def cmd_attack(s: Settings) -> int:
    setting = s.get("setting", default="transductive")
    if setting not in SETTINGS:
        raise ConfigError(f"setting must be one of {SETTINGS}")
    spec = s.get("dataset", default="synthetic:cora" if setting == "transductive" else "sbm")
    out = s.get("out", "output", "report.csv")
    split_seed = int(s.get("split_seed", default=0))
    configs = attack_configs(s, setting)
    vcfg = _victim_config(s, setting)
    victim_path = s.get("victim", "victim.model")
    victim: VictimParams | None = None
    if victim_path is not None:
        victim = load_model(victim_path)
        if not isinstance(victim, VictimParams):
            raise ConfigError(f"{victim_path} does not hold a victim model")
    g = _prepare_graph(resolve_dataset(spec), setting, split_seed)
    name = _dataset_name(spec)
    if setting == "inductive":
        sc = inductive_scenario(g, name, vcfg, victim, split_seed)
    else:
        sc = transductive_scenario(g, name, vcfg, victim)
    log.info("victim accuracy on the evaluation nodes: %.4f", sc.victim_acc)
    defense = DefenseConfig(float(s.get("flip_p", "defense.p", 0.0)), s.seed("defense_seed", "defense.seed"))

    remote = s.get("remote", "attack.remote")
    if remote:
        from .serve import RemoteVictim, VictimClient

        if victim is None:
            raise ConfigError("--remote needs --victim too: the evaluator scores fidelity against it")
        keys = s.get("api_key", "attack.api_key", ["test-key"])
        key = keys if isinstance(keys, str) else keys[0]
        reports = [run_cell(sc, c, defense, RemoteVictim(VictimClient(remote, key))) for c in configs]
    else:
        jobs = int(s.get("jobs", default=physical_cores()))
        reports = run_grid(sc, configs, defense, jobs)

    path = Path(out)
    previous = read_report(path) if path.exists() else []
    emit_report(previous + reports, path)
    for row in aggregate_rows(reports):
        print(",".join(row))
    log.info("wrote %d new rows to %s", len(reports), path)
    return 0


def cmd_eval(s: Settings) -> int:
    report = s.get("report")
    if report is None:
        raise ConfigError("eval needs --report")
    runs = read_report(report)
    if not runs:
        raise FormatError(f"{report} holds no run rows")
    out = s.get("out")
    if out:
        emit_report(runs, out)
    for row in aggregate_rows(runs):
        print(",".join(row))
    return 0


def cmd_bench(s: Settings) -> int:
    """Wall-clock of the transductive pipeline: victim training, then one SSL + k-means attack."""
    spec = s.get("dataset", default="synthetic:cora")
    seed = s.seed()
    t0 = time.perf_counter()
    g = _prepare_graph(resolve_dataset(spec, 0), "transductive", 0)
    t1 = time.perf_counter()
    sc = transductive_scenario(g, _dataset_name(spec), _victim_config(s, "transductive"))
    t2 = time.perf_counter()
    cfg = transductive_attack(q_n=int(_ints(s.get("qn", default=10))[0]), seed=seed)
    rep = run_cell(sc, cfg)
    t3 = time.perf_counter()
    print(json.dumps({"dataset": spec, "load_s": round(t1 - t0, 3), "victim_s": round(t2 - t1, 3),
                      "attack_s": round(t3 - t2, 3), "victim_acc": sc.victim_acc,
                      "surrogate_acc": rep.surrogate_acc, "fidelity": rep.fidelity}))
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train-victim": cmd_train_victim, "serve": cmd_serve,
            "attack": cmd_attack, "eval": cmd_eval, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="extract-lab", description="Limited-query GNN model extraction toolkit.")
    p.add_argument("--log-level", default="WARNING", help="logging level for stderr diagnostics")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="TOML experiment file; flags override its values")
        sp.add_argument("--seed", type=int, help=f"global seed (falls back to ${SEED_ENV}, then 0)")

    def victim_flags(sp):
        sp.add_argument("--victim-arch", choices=ARCHS)
        sp.add_argument("--victim-depth", type=int)
        sp.add_argument("--victim-hidden", type=int)
        sp.add_argument("--victim-epochs", type=int)
        sp.add_argument("--victim-lr", type=float)
        sp.add_argument("--victim-dropout", type=float)
        sp.add_argument("--victim-weight-decay", type=float)
        sp.add_argument("--victim-seed", type=int)

    g = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    common(g)
    g.add_argument("--out")
    g.add_argument("--kind", choices=("sbm", "planetoid"))
    g.add_argument("--profile", choices=sorted(PLANETOID_PROFILES))
    g.add_argument("--classes", type=int)
    g.add_argument("--nodes-per-class", type=int)
    g.add_argument("--p-in", type=float)
    g.add_argument("--p-out", type=float)
    g.add_argument("--feature-dim", type=int)
    g.add_argument("--feature-shift", type=float)
    g.add_argument("--split", help="train,val,test fractions, e.g. 0.4,0.1,0.5")

    t = sub.add_parser("train-victim", help="train and save a victim model")
    common(t)
    t.add_argument("--dataset")
    t.add_argument("--setting", choices=SETTINGS)
    t.add_argument("--split-seed", type=int)
    t.add_argument("--out")
    victim_flags(t)

    v = sub.add_parser("serve", help="serve a victim over HTTP")
    common(v)
    v.add_argument("--model")
    v.add_argument("--qn", type=int, help="query budget per API key")
    v.add_argument("--flip-p", type=float, help="label-flip defense probability")
    v.add_argument("--host")
    v.add_argument("--port", type=int)
    v.add_argument("--api-key", action="append", help="accepted key (repeatable)")

    a = sub.add_parser("attack", help="run an attack grid and append rows to a CSV report")
    common(a)
    a.add_argument("--dataset", help="dataset directory, synthetic:<profile> or sbm")
    a.add_argument("--setting", choices=SETTINGS)
    a.add_argument("--split-seed", type=int)
    a.add_argument("--encoder", help="comma list of " + ", ".join(ENCODERS) + " (aliases e2e, rinit)")
    a.add_argument("--strategy", help="comma list of " + ", ".join(STRATEGIES))
    a.add_argument("--qn", help="comma list of query budgets")
    a.add_argument("--seeds", help="comma list of seeds")
    a.add_argument("--victim", help="victim model JSON (trained on the fly when absent)")
    a.add_argument("--remote", help="victim server URL; queries go over HTTP")
    a.add_argument("--api-key", action="append")
    a.add_argument("--flip-p", type=float, help="label-flip defense for the local victim")
    a.add_argument("--defense-seed", type=int)
    a.add_argument("--out", help="CSV report path (rows are appended)")
    a.add_argument("--jobs", type=int, help="parallel grid cells (default: physical cores)")
    a.add_argument("--arch", choices=ARCHS)
    a.add_argument("--depth", type=int)
    a.add_argument("--hidden", type=int)
    a.add_argument("--out-dim", type=int)
    a.add_argument("--activation", choices=("relu", "prelu", "none"))
    a.add_argument("--batch-norm", action=argparse.BooleanOptionalAction, default=None)
    a.add_argument("--embed-norm", choices=("none", "l2"))
    a.add_argument("--head-lr", type=float)
    a.add_argument("--head-epochs", type=int)
    a.add_argument("--e2e-epochs", type=int)
    a.add_argument("--e2e-lr", type=float)
    a.add_argument("--e2e-dropout", type=float)
    a.add_argument("--rounds", type=int)
    a.add_argument("--restarts", type=int)
    a.add_argument("--ssl-mask-ratio", type=float)
    a.add_argument("--ssl-lr", type=float)
    a.add_argument("--ssl-epochs", type=int)
    a.add_argument("--ssl-invariance-weight", type=float)
    victim_flags(a)

    e = sub.add_parser("eval", help="recompute aggregates from a report CSV")
    common(e)
    e.add_argument("--report")
    e.add_argument("--out", help="rewrite the report (rows + fresh agg block) here")

    b = sub.add_parser("bench", help="time the transductive pipeline")
    common(b)
    b.add_argument("--dataset")
    b.add_argument("--qn")
    victim_flags(b)
    return p


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                            stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
        settings = Settings(args, load_config(getattr(args, "config", None)))
        return COMMANDS[args.command](settings)
    except (ConfigError, ArgumentError, ValueError, TypeError) as e:
        print(f"extract-lab: configuration error: {e}", file=sys.stderr)
        return 1
    except ExtractLabError as e:
        print(f"extract-lab: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"extract-lab: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
