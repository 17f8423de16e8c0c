"""Convert the raw Planetoid files (ind.<name>.x, .allx, .tx, .y, .ally, .ty, .graph,
.test.index) into the extract_lab dataset directory format, public split included.

    python3 scripts/export_planetoid.py --raw data/planetoid --name cora --out data/cora
    EXTRACT_LAB_CORA=data/cora pytest tests/test_acceptance.py

Features are kept raw (binary bag of words); no row normalization is applied.
"""

import argparse
import pickle
import sys
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from extract_lab import graphcore as gc


def _load(raw: Path, name: str, part: str):
    with open(raw / f"ind.{name}.{part}", "rb") as fh:
        return pickle.load(fh, encoding="latin1")


def export(raw: Path, name: str) -> gc.Graph:
    x, y, tx, ty, allx, ally, graph = (_load(raw, name, p) for p in ("x", "y", "tx", "ty", "allx", "ally", "graph"))
    test_order = np.loadtxt(raw / f"ind.{name}.test.index", dtype=np.int64)
    test_sorted = np.sort(test_order)
    if name == "citeseer":
        # some test ids have no node: pad tx/ty so row positions line up
        full = np.arange(test_sorted.min(), test_sorted.max() + 1)
        tx_full = sp.lil_matrix((full.size, x.shape[1]))
        tx_full[test_sorted - test_sorted.min(), :] = tx
        ty_full = np.zeros((full.size, y.shape[1]))
        ty_full[test_sorted - test_sorted.min(), :] = ty
        tx, ty = tx_full, ty_full

    features = sp.vstack((allx, tx)).tolil()
    features[test_order, :] = features[test_sorted, :]
    onehot = np.vstack((ally, ty))
    onehot[test_order, :] = onehot[test_sorted, :]
    labeled = onehot.sum(axis=1) > 0
    labels = np.argmax(onehot, axis=1)

    n = features.shape[0]
    edges = [(i, j) for i, nbrs in graph.items() for j in nbrs if i < n and j < n]
    split = np.full(n, "none", dtype="<U5")
    split[: len(y)] = "train"
    split[len(y): len(y) + 500] = "val"
    split[test_sorted] = "test"
    split[~labeled] = "none"  # padded citeseer rows carry no label
    return gc.Graph(np.asarray(features.todense(), dtype=np.float64), edges, labels, onehot.shape[1], split)


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--raw", required=True, type=Path, help="directory holding the ind.<name>.* files")
    ap.add_argument("--name", default="cora", choices=("cora", "citeseer", "pubmed"))
    ap.add_argument("--out", required=True, type=Path)
    args = ap.parse_args(argv)
    g = export(args.raw, args.name)
    gc.save_dataset(g, args.out)
    print(f"{args.name}: n={g.n} d={g.d} classes={g.num_classes} edges={g.num_edges} -> {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
