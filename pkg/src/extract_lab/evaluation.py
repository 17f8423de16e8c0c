"""Metrics, the exact McNemar test and CSV report emission."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ArgumentError, FormatError, IoError
from .numkit import Rng

log = logging.getLogger(__name__)

HEADER = ("run_id", "dataset", "setting", "strategy", "q_n", "seed", "victim_acc", "surrogate_acc",
          "fidelity", "mcnemar_p", "class_coverage", "seconds", "config_hash")
METRICS = ("victim_acc", "surrogate_acc", "fidelity", "mcnemar_p", "class_coverage", "seconds")
CELL_KEYS = ("dataset", "setting", "strategy", "q_n")


def _pair(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ArgumentError(f"length mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ArgumentError("empty prediction vector")
    return a, b


def accuracy(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return int(np.count_nonzero(pred == truth)) / pred.size


def fidelity(pred_surrogate, pred_victim) -> float:
    """Agreement rate with the victim; symmetric in its arguments."""
    return accuracy(pred_surrogate, pred_victim)


def binomial_two_sided(b: int, c: int) -> float:
    """``min(1, 2 P(X <= min(b, c)))`` for ``X ~ Bin(b + c, 1/2)``; 1.0 when ``b + c = 0``."""
    n = b + c
    if n == 0:
        return 1.0
    k = min(b, c)
    # integer arithmetic keeps the tail exact until the final division
    tail = sum(math.comb(n, i) for i in range(k + 1))
    return min(1.0, 2 * tail / 2**n)


def mcnemar(pred_a, pred_b, truth, sample_size: int = 70, seed: int = 0) -> float:
    """Exact McNemar p-value on a seeded subsample of ``sample_size`` positions."""
    pred_a, truth = _pair(pred_a, truth)
    pred_b, _ = _pair(pred_b, truth)
    if pred_a.size < sample_size:
        raise ArgumentError(f"need at least {sample_size} predictions, got {pred_a.size}")
    idx = Rng(seed).child("mcnemar").choice(pred_a.size, sample_size)
    ok_a, ok_b = pred_a[idx] == truth[idx], pred_b[idx] == truth[idx]
    b = int(np.count_nonzero(ok_a & ~ok_b))
    c = int(np.count_nonzero(~ok_a & ok_b))
    log.debug("mcnemar seed=%d b=%d c=%d", seed, b, c)
    return binomial_two_sided(b, c)


@dataclass
class EvalReport:
    run_id: str
    dataset: str
    setting: str
    strategy: str
    q_n: int
    seed: int
    victim_acc: float
    surrogate_acc: float
    fidelity: float
    mcnemar_p: float
    class_coverage: float
    seconds: float
    config_hash: str

    def __post_init__(self):
        for name in ("victim_acc", "surrogate_acc", "fidelity", "mcnemar_p", "class_coverage"):
            value = getattr(self, name)
            if not (isinstance(value, float) and math.isnan(value)) and not 0.0 <= value <= 1.0:
                raise ArgumentError(f"{name}={value} outside [0, 1]")


def _fmt(x) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.4f}"


def _row(r: EvalReport) -> list[str]:
    d = asdict(r)
    return [_fmt(d[k]) if k in METRICS else str(d[k]) for k in HEADER]


def aggregate_rows(runs: list[EvalReport]) -> list[list[str]]:
    """One ``agg`` row per (dataset, setting, strategy, q_n) cell: ``mean±std`` per metric.

    Statistics are taken over the 4-place values written in the run rows, so a report
    re-aggregated from its own CSV is identical. ``seed`` holds the number of runs;
    std is the sample std (0 for a single run).
    """
    cells: dict[tuple, list[EvalReport]] = {}
    for r in runs:
        cells.setdefault(tuple(getattr(r, k) for k in CELL_KEYS), []).append(r)
    out = []
    for key, members in cells.items():
        row = ["agg", *map(str, key), str(len(members))]
        for m in METRICS:
            vals = np.array([float(_fmt(getattr(r, m))) for r in members], dtype=np.float64)
            mean = float(np.mean(vals))
            std = float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0
            row.append(f"{mean:.12g}±{std:.12g}")
        hashes = sorted({r.config_hash for r in members})
        row.append(hashes[0] if len(hashes) == 1 else "mixed")
        out.append(row)
    return out


def render_report(runs: list[EvalReport]) -> str:
    if not runs:
        raise ArgumentError("no runs to report")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HEADER)
    for r in runs:
        w.writerow(_row(r))
    w.writerows(aggregate_rows(runs))
    return buf.getvalue()


def emit_report(runs: list[EvalReport], path) -> Path:
    """Write header, one row per run, then the ``agg`` block. Atomic replace."""
    path = Path(path)
    text = render_report(runs)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    except OSError as e:
        raise IoError(f"cannot write report {path}: {e}") from e
    return path


def read_report(path) -> list[EvalReport]:
    """Parse the per-run rows of a report CSV (``agg`` rows are skipped)."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise IoError(f"cannot read report {path}: {e}") from e
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != HEADER:
        raise FormatError(f"{path}: unexpected header {header}")
    types = {f.name: f.type for f in fields(EvalReport)}
    runs = []
    for lineno, row in enumerate(reader, start=2):
        if not row or row[0] == "agg":
            continue
        if len(row) != len(HEADER):
            raise FormatError(f"{path}:{lineno}: expected {len(HEADER)} fields, got {len(row)}")
        try:
            values = {k: (int(v) if types[k] == "int" else float(v) if types[k] == "float" else v)
                      for k, v in zip(HEADER, row)}
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: {e}") from e
        runs.append(EvalReport(**values))
    return runs
