"""GCN / SAGE / GIN encoders with hand-written backward passes, plus training loops.

A network is a list of :class:`Layer`. Each graph layer is

    aggregate -> affine -> [batch norm] -> activation

with the aggregation fixed by ``kind``:

* ``gcn``:  ``Â X W + b`` (symmetric normalization with self-loops)
* ``sage``: ``[X, mean_nbr(X)] W + b``
* ``gin``:  ``(X + sum_nbr(X)) W + b``  (epsilon fixed at 0)
* ``linear``: ``X W + b`` (no message passing; used for heads)

Batch norm always uses statistics of the whole input graph, in training and at
inference alike. Dropout (inverted) is applied to each layer's input during
training only.
"""

from __future__ import annotations

import json
import logging
import weakref
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ArgumentError, ConfigError, FormatError, LoadError, ShapeError
from .graphcore import Graph, mean_adjacency, normalize_adjacency
from .numkit import AdamState, Rng, adam_step, softmax_cross_entropy

log = logging.getLogger(__name__)

ARCHS = ("gcn", "sage", "gin")
EMBED_NORMS = ("none", "l2")
BN_EPS = 1e-5


@dataclass
class Layer:
    kind: str
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "none"  # relu | prelu | none
    alpha: np.ndarray | None = None  # shape (1,), PReLU slope
    bn_scale: np.ndarray | None = None
    bn_shift: np.ndarray | None = None

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0] // 2 if self.kind == "sage" else self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def params(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order (matches the gradient order of ``backward``)."""
        out = [self.weight, self.bias]
        if self.alpha is not None:
            out.append(self.alpha)
        if self.bn_scale is not None:
            out += [self.bn_scale, self.bn_shift]
        return out

    def copy(self) -> "Layer":
        cp = lambda a: None if a is None else a.copy()  # noqa: E731
        return Layer(self.kind, self.weight.copy(), self.bias.copy(), self.activation,
                     cp(self.alpha), cp(self.bn_scale), cp(self.bn_shift))


@dataclass
class EncoderParams:
    arch: str
    layers: list[Layer]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params()]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.arch, [l.copy() for l in self.layers])


@dataclass
class HeadParams:
    weight: np.ndarray
    bias: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def as_layer(self) -> Layer:
        return Layer("linear", self.weight, self.bias)


@dataclass
class SurrogateModel:
    encoder: EncoderParams
    head: HeadParams
    embed_norm: str = "none"  # applied to encoder outputs before the head

    def __post_init__(self):
        if self.embed_norm not in EMBED_NORMS:
            raise ConfigError(f"unknown embedding normalization {self.embed_norm!r}")
        if self.head.in_dim != self.encoder.out_dim:
            raise ShapeError(f"head expects {self.head.in_dim} inputs, encoder gives {self.encoder.out_dim}")


@dataclass
class VictimParams:
    encoder: EncoderParams
    output: Layer
    meta: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return self.output.out_dim

    @property
    def depth(self) -> int:
        """Number of message-passing layers, i.e. the receptive-field radius."""
        return self.encoder.depth + (self.output.kind != "linear")

    def layers(self) -> list[Layer]:
        return self.encoder.layers + [self.output]


# ---------------------------------------------------------------------- graph ops


class GraphOps:
    """Lazily built propagation matrices for one graph."""

    def __init__(self, g: Graph):
        self.g = g
        self._cache: dict[str, sp.csr_matrix] = {}
        self._features = None

    @property
    def features(self):
        """Node features; a CSR copy when at most 10% of entries are nonzero."""
        if self._features is None:
            x = self.g.features
            nnz = np.count_nonzero(x)
            self._features = sp.csr_matrix(x) if x.size and nnz <= 0.1 * x.size else x
        return self._features

    def get(self, kind: str) -> sp.csr_matrix:
        if kind not in self._cache:
            if kind == "gcn":
                self._cache[kind] = normalize_adjacency(self.g).matrix
            elif kind == "sage":
                m = mean_adjacency(self.g)
                self._cache[kind] = m
                self._cache["sage_t"] = sp.csr_matrix(m.T)
            elif kind == "gin":
                self._cache[kind] = self.g.adjacency
            elif kind == "sage_t":
                self.get("sage")
        return self._cache[kind]


_OPS: "weakref.WeakKeyDictionary[Graph, GraphOps]" = weakref.WeakKeyDictionary()


def graph_ops(g: Graph) -> GraphOps:
    ops = _OPS.get(g)
    if ops is None:
        ops = _OPS[g] = GraphOps(g)
    return ops


# ------------------------------------------------------------------ init helpers


def glorot(rng: Rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform((fan_in, fan_out), -limit, limit)


def make_layer(kind: str, in_dim: int, out_dim: int, rng: Rng, activation: str = "none",
               batch_norm: bool = False) -> Layer:
    rows = 2 * in_dim if kind == "sage" else in_dim
    return Layer(
        kind,
        glorot(rng, rows, out_dim),
        np.zeros(out_dim),
        activation,
        np.array([0.25]) if activation == "prelu" else None,
        np.ones(out_dim) if batch_norm else None,
        np.zeros(out_dim) if batch_norm else None,
    )


def init_encoder(arch: str, depth: int, in_dim: int, hidden: int, out_dim: int, seed: int = 0,
                 activation: str = "relu", batch_norm: bool = False) -> EncoderParams:
    """Glorot-uniform weights, zero bias, PReLU slope 0.25, BN scale 1 / shift 0."""
    if arch not in ARCHS:
        raise ConfigError(f"unknown architecture {arch!r}")
    if depth < 1 or min(in_dim, hidden, out_dim) < 1:
        raise ConfigError("depth and all widths must be positive")
    if activation not in ("relu", "prelu", "none"):
        raise ConfigError(f"unknown activation {activation!r}")
    rng = Rng(seed).child("init_encoder")
    dims = [in_dim] + [hidden] * (depth - 1) + [out_dim]
    layers = [make_layer(arch, dims[i], dims[i + 1], rng.child(i), activation, batch_norm)
              for i in range(depth)]
    return EncoderParams(arch, layers)


def init_head(in_dim: int, num_classes: int, seed: int = 0) -> HeadParams:
    rng = Rng(seed).child("init_head")
    return HeadParams(glorot(rng, in_dim, num_classes), np.zeros(num_classes))


def init_victim(arch: str, depth: int, in_dim: int, hidden: int, num_classes: int, seed: int = 0,
                output: str = "conv") -> VictimParams:
    """``depth`` graph layers in total when ``output='conv'``; ReLU between them."""
    n_enc = depth - 1 if output == "conv" else depth
    if n_enc < 1:
        raise ConfigError("victim needs at least one hidden graph layer")
    enc = init_encoder(arch, n_enc, in_dim, hidden, hidden, seed)
    kind = arch if output == "conv" else "linear"
    out = make_layer(kind, hidden, num_classes, Rng(seed).child("init_output"))
    return VictimParams(enc, out)


# ------------------------------------------------------------- forward / backward


def _rowwise(x, w: np.ndarray) -> np.ndarray:
    """``x @ w`` with every output row depending only on the matching input row.

    BLAS kernels may pick different blockings for different row counts, which can
    change rounding; scipy's CSR product accumulates each row in column order.
    """
    return np.asarray((x if sp.issparse(x) else sp.csr_matrix(x)) @ w)


def _aggregate(layer: Layer, ops: GraphOps, x: np.ndarray, exact: bool = False):
    w = layer.weight
    mm = _rowwise if exact else (lambda a, b: np.asarray(a @ b))  # noqa: E731
    if layer.kind == "linear":
        return mm(x, w), None
    if layer.kind == "gcn":
        a = ops.get("gcn")
        if layer.in_dim > layer.out_dim:
            return np.asarray(a @ mm(x, w)), None
        ax = a @ x
        return mm(ax, w), ax
    if layer.kind == "sage":
        mx = ops.get("sage") @ x
        k = layer.in_dim
        return mm(x, w[:k]) + mm(mx, w[k:]), mx
    if layer.kind == "gin":
        sx = x + ops.get("gin") @ x
        return mm(sx, w), sx
    raise ConfigError(f"unknown layer kind {layer.kind!r}")


def _aggregate_backward(layer: Layer, ops: GraphOps, x, agg, dz: np.ndarray, need_dx: bool = True):
    w = layer.weight
    t = lambda m: np.asarray(m.T @ dz)  # noqa: E731
    if layer.kind == "linear":
        return t(x), (dz @ w.T if need_dx else None)
    if layer.kind == "gcn":
        a = ops.get("gcn")
        if agg is None:
            adz = np.asarray(a.T @ dz)
            return np.asarray(x.T @ adz), (adz @ w.T if need_dx else None)
        return t(agg), (np.asarray(a.T @ (dz @ w.T)) if need_dx else None)
    if layer.kind == "sage":
        k = layer.in_dim
        dw = np.vstack([t(x), t(agg)])
        if not need_dx:
            return dw, None
        return dw, dz @ w[:k].T + np.asarray(ops.get("sage_t") @ (dz @ w[k:].T))
    if layer.kind == "gin":
        if not need_dx:
            return t(agg), None
        dsx = dz @ w.T
        return t(agg), dsx + np.asarray(ops.get("gin").T @ dsx)
    raise ConfigError(f"unknown layer kind {layer.kind!r}")


def layer_forward(layer: Layer, ops: GraphOps, x: np.ndarray, exact: bool = False):
    if x.shape[1] != layer.in_dim:
        raise ShapeError(f"layer expects width {layer.in_dim}, got {x.shape[1]}")
    z, agg = _aggregate(layer, ops, x, exact)
    z = z + layer.bias
    cache = {"x": x, "agg": agg}
    if layer.bn_scale is not None:
        mu = z.mean(axis=0)
        inv_std = 1.0 / np.sqrt(z.var(axis=0) + BN_EPS)
        zhat = (z - mu) * inv_std
        cache.update(zhat=zhat, inv_std=inv_std)
        z = zhat * layer.bn_scale + layer.bn_shift
    cache["pre"] = z
    if layer.activation == "relu":
        z = np.maximum(z, 0.0)
    elif layer.activation == "prelu":
        z = np.where(z > 0, z, layer.alpha[0] * z)
    return z, cache


def layer_backward(layer: Layer, ops: GraphOps, cache: dict, dout: np.ndarray, need_dx: bool = True):
    pre = cache["pre"]
    grads = {}
    if layer.activation == "relu":
        dz = dout * (pre > 0)
    elif layer.activation == "prelu":
        dz = np.where(pre > 0, dout, layer.alpha[0] * dout)
        grads["alpha"] = np.array([np.sum(np.where(pre > 0, 0.0, pre * dout))])
    else:
        dz = dout
    if layer.bn_scale is not None:
        zhat, inv_std = cache["zhat"], cache["inv_std"]
        grads["bn_scale"] = np.sum(dz * zhat, axis=0)
        grads["bn_shift"] = np.sum(dz, axis=0)
        dxhat = dz * layer.bn_scale
        n = dz.shape[0]
        dz = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - zhat * np.sum(dxhat * zhat, axis=0))
    grads["bias"] = dz.sum(axis=0)
    grads["weight"], dx = _aggregate_backward(layer, ops, cache["x"], cache["agg"], dz, need_dx)
    ordered = [grads["weight"], grads["bias"]]
    if layer.alpha is not None:
        ordered.append(grads["alpha"])
    if layer.bn_scale is not None:
        ordered += [grads["bn_scale"], grads["bn_shift"]]
    return ordered, dx


def network_forward(layers: Sequence[Layer], ops: GraphOps, x: np.ndarray, dropout: float = 0.0,
                    rng: Rng | None = None, exact: bool = False):
    """Run ``layers``; returns ``(out, caches)``. Dropout only when ``rng`` is given.

    ``exact`` makes each node's output bitwise independent of which other nodes are
    present, as long as its receptive field is unchanged (used for victim answers).
    """
    caches = []
    for i, layer in enumerate(layers):
        mask = None
        if dropout > 0 and rng is not None:
            if sp.issparse(x):
                # zeros stay zero under dropout, so only stored entries need a draw
                x = x.copy()
                x.data *= (rng.child(i).uniform(x.nnz) >= dropout) / (1.0 - dropout)
            else:
                mask = (rng.child(i).uniform(x.shape) >= dropout) / (1.0 - dropout)
                x = x * mask
        x, cache = layer_forward(layer, ops, x, exact)
        cache["mask"] = mask
        caches.append(cache)
    return x, caches


def network_backward(layers: Sequence[Layer], ops: GraphOps, caches: list, dout: np.ndarray,
                     need_input_grad: bool = True):
    """Gradients for every layer (list of lists, ``Layer.params`` order) and the input."""
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        need = i > 0 or need_input_grad
        grads[i], dout = layer_backward(layers[i], ops, caches[i], dout, need)
        if need and caches[i]["mask"] is not None:
            dout = dout * caches[i]["mask"]
    return grads, dout


def encode(enc: EncoderParams, g: Graph) -> np.ndarray:
    """Embeddings ``H`` (n x b) of every node of ``g`` (inference mode)."""
    if g.d != enc.in_dim:
        raise ShapeError(f"encoder expects {enc.in_dim} features, graph has {g.d}")
    ops = graph_ops(g)
    h, _ = network_forward(enc.layers, ops, ops.features)
    return h


def _check_ids(ids, n: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ArgumentError(f"query id outside [0, {n})")
    return ids


def _hard(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the smaller class index
    return np.argmax(logits, axis=1).astype(np.int64)


def victim_logits(v: VictimParams, g: Graph) -> np.ndarray:
    if g.d != v.encoder.in_dim:
        raise ShapeError(f"victim expects {v.encoder.in_dim} features, graph has {g.d}")
    ops = graph_ops(g)
    out, _ = network_forward(v.layers(), ops, ops.features, exact=True)
    return out


def victim_predict(v: VictimParams, g: Graph, query_ids) -> np.ndarray:
    ids = _check_ids(query_ids, g.n)
    if ids.size == 0:
        return np.zeros(0, dtype=np.int64)
    return _hard(victim_logits(v, g)[ids])


def normalize_embeddings(h: np.ndarray, mode: str = "l2") -> np.ndarray:
    """``l2``: unit-length rows (all-zero rows stay zero); ``none``: unchanged."""
    if mode == "none":
        return h
    if mode != "l2":
        raise ConfigError(f"unknown embedding normalization {mode!r}")
    norms = np.linalg.norm(h, axis=1, keepdims=True)
    return h / np.where(norms > 0, norms, 1.0)


def surrogate_logits(s: SurrogateModel, g: Graph) -> np.ndarray:
    return normalize_embeddings(encode(s.encoder, g), s.embed_norm) @ s.head.weight + s.head.bias


def surrogate_predict(s: SurrogateModel, g: Graph, ids) -> np.ndarray:
    ids = _check_ids(ids, g.n)
    if ids.size == 0:
        return np.zeros(0, dtype=np.int64)
    return _hard(surrogate_logits(s, g)[ids])


# ---------------------------------------------------------------------- training


def network_loss(layers: Sequence[Layer], g: Graph, ids, targets, dropout: float = 0.0,
                 rng: Rng | None = None):
    """Mean CE at ``ids``; returns ``(loss, grads)`` with grads per layer."""
    ops = graph_ops(g)
    logits, caches = network_forward(layers, ops, ops.features, dropout, rng)
    loss, dsel = softmax_cross_entropy(logits[ids], targets)
    dlogits = np.zeros_like(logits)
    np.add.at(dlogits, ids, dsel)
    grads, _ = network_backward(layers, ops, caches, dlogits, need_input_grad=False)
    return loss, grads


def train_network(layers: list[Layer], g: Graph, train_ids, targets, epochs: int, lr: float,
                  dropout: float, seed: int, weight_decay: float = 0.0, val_ids=None,
                  val_targets=None) -> tuple[list[Layer], dict]:
    """Full-batch Adam on CE.

    With validation ids, returns the parameters of the epoch with the best validation
    accuracy (earliest wins ties; epoch 0 is the initialization); otherwise the final
    parameters.
    """
    train_ids = np.asarray(train_ids, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if train_ids.size == 0:
        raise ConfigError("no training nodes")
    params = [p for layer in layers for p in layer.params()]
    state = AdamState(lr=lr, weight_decay=weight_decay)
    rng = Rng(seed).child("dropout")
    use_val = val_ids is not None and len(val_ids) > 0
    ops = graph_ops(g)

    def val_acc() -> float:
        out, _ = network_forward(layers, ops, ops.features)
        return float(np.mean(_hard(out[val_ids]) == val_targets))

    best_acc, best_epoch = (val_acc(), 0) if use_val else (float("nan"), 0)
    best = [l.copy() for l in layers] if use_val else None
    losses = []
    for epoch in range(1, epochs + 1):
        loss, grads = network_loss(layers, g, train_ids, targets, dropout, rng.child(epoch))
        losses.append(loss)
        adam_step(params, [gr for lg in grads for gr in lg], state)
        if use_val:
            acc = val_acc()
            if acc > best_acc:
                best_acc, best_epoch, best = acc, epoch, [l.copy() for l in layers]
    info = {"epochs": epochs, "losses": losses, "best_epoch": best_epoch, "val_acc": best_acc}
    return (best if use_val else layers), info


def train_victim(g: Graph, arch: str = "gcn", depth: int = 2, hidden: int = 256, epochs: int = 200,
                 lr: float = 0.01, dropout: float = 0.5, seed: int = 0, weight_decay: float = 5e-4,
                 output: str = "conv") -> VictimParams:
    """Train the target model on ``g``'s train nodes, model-selecting on its val nodes."""
    if g.labels is None or g.split is None:
        raise ConfigError("victim training needs labels and a split")
    train_ids, val_ids = g.ids("train"), g.ids("val")
    if train_ids.size == 0:
        raise ConfigError("no train nodes")
    v = init_victim(arch, depth, g.d, hidden, g.num_classes, seed, output)
    layers, info = train_network(v.layers(), g, train_ids, g.labels[train_ids], epochs, lr, dropout,
                                 seed, weight_decay, val_ids, g.labels[val_ids])
    log.info("victim %s/%d trained: best val acc %.4f at epoch %d", arch, depth, info["val_acc"],
             info["best_epoch"])
    meta = {"seed": seed, "epochs": epochs, "val_acc": info["val_acc"], "best_epoch": info["best_epoch"],
            "lr": lr, "dropout": dropout, "weight_decay": weight_decay}
    return VictimParams(EncoderParams(arch, layers[:-1]), layers[-1], meta)


def train_head(h: np.ndarray, labels, num_classes: int, lr: float = 0.01, epochs: int = 100,
               seed: int = 0, weight_decay: float = 0.0) -> HeadParams:
    """One-layer softmax head on fixed embeddings; final-epoch parameters."""
    labels = np.asarray(labels, dtype=np.int64)
    if h.shape[0] != labels.shape[0] or labels.size == 0:
        raise ArgumentError(f"{h.shape[0]} embedding rows for {labels.size} labels")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ArgumentError(f"label outside [0, {num_classes})")
    head = init_head(h.shape[1], num_classes, seed)
    state = AdamState(lr=lr, weight_decay=weight_decay)
    params = [head.weight, head.bias]
    for _ in range(epochs):
        _, dlogits = softmax_cross_entropy(h @ head.weight + head.bias, labels)
        adam_step(params, [h.T @ dlogits, dlogits.sum(axis=0)], state)
    return head


def train_e2e_surrogate(g: Graph, ids, labels, num_classes: int, arch: str = "gcn", depth: int = 2,
                        hidden: int = 256, out_dim: int = 256, epochs: int = 100, lr: float = 0.01,
                        dropout: float = 0.5, seed: int = 0, activation: str = "relu",
                        batch_norm: bool = False) -> SurrogateModel:
    """Baseline: train encoder and head jointly on the query responses only."""
    enc = init_encoder(arch, depth, g.d, hidden, out_dim, seed, activation, batch_norm)
    head = init_head(out_dim, num_classes, seed)
    layers = enc.layers + [head.as_layer()]
    layers, _ = train_network(layers, g, ids, labels, epochs, lr, dropout, seed)
    return SurrogateModel(EncoderParams(arch, layers[:-1]), HeadParams(layers[-1].weight, layers[-1].bias))


# ------------------------------------------------------------------- persistence


def _fmt_array(a: np.ndarray) -> str:
    if a.ndim == 1:
        return "[" + ",".join(format(float(v), ".17g") for v in a) + "]"
    return "[" + ",".join(_fmt_array(row) for row in a) + "]"


def _layer_json(layer: Layer, role: str) -> str:
    parts = [f'"role":"{role}"', f'"kind":"{layer.kind}"', f'"activation":"{layer.activation}"',
             f'"w":{_fmt_array(layer.weight)}', f'"b":{_fmt_array(layer.bias)}']
    if layer.alpha is not None:
        parts.append(f'"alpha":{format(float(layer.alpha[0]), ".17g")}')
    if layer.bn_scale is not None:
        parts += [f'"bn_scale":{_fmt_array(layer.bn_scale)}', f'"bn_shift":{_fmt_array(layer.bn_shift)}']
    return "{" + ",".join(parts) + "}"


def model_to_json(model) -> str:
    """Serialize an EncoderParams, VictimParams or SurrogateModel (17 significant digits)."""
    if isinstance(model, VictimParams):
        kind, enc, extra, meta = "victim", model.encoder, [(model.output, "output")], model.meta
    elif isinstance(model, SurrogateModel):
        kind, enc, extra = "surrogate", model.encoder, [(model.head.as_layer(), "head")]
        meta = {"embed_norm": model.embed_norm}
    elif isinstance(model, EncoderParams):
        kind, enc, extra, meta = "encoder", model, [], {}
    else:
        raise ArgumentError(f"cannot serialize {type(model).__name__}")
    layers = [(l, "encoder") for l in enc.layers] + extra
    dims = [enc.in_dim] + [l.out_dim for l, _ in layers]
    body = ",".join(_layer_json(l, r) for l, r in layers)
    meta_json = json.dumps(meta, sort_keys=True, default=float)
    return (f'{{"type":"{kind}","arch":"{enc.arch}","dims":{json.dumps(dims)},'
            f'"layers":[{body}],"meta":{meta_json}}}')


def model_from_json(text: str):
    try:
        doc = json.loads(text)
        layers = []
        for spec in doc["layers"]:
            arr = lambda k: np.array(spec[k], dtype=np.float64)  # noqa: E731
            layers.append((spec.get("role", "encoder"), Layer(
                spec["kind"], np.atleast_2d(arr("w")), arr("b"), spec.get("activation", "none"),
                np.array([float(spec["alpha"])]) if "alpha" in spec else None,
                arr("bn_scale") if "bn_scale" in spec else None,
                arr("bn_shift") if "bn_shift" in spec else None)))
        enc = EncoderParams(doc["arch"], [l for r, l in layers if r == "encoder"])
        rest = [l for r, l in layers if r != "encoder"]
        kind = doc.get("type", "encoder")
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise FormatError(f"malformed model document: {exc}") from exc
    if kind == "victim":
        return VictimParams(enc, rest[0], doc.get("meta", {}))
    if kind == "surrogate":
        norm = doc.get("meta", {}).get("embed_norm", "none")
        return SurrogateModel(enc, HeadParams(rest[0].weight, rest[0].bias), norm)
    return enc


def save_model(model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(model_to_json(model) + "\n", encoding="utf-8")
    return path


def load_model(path):
    path = Path(path)
    if not path.is_file():
        raise LoadError(f"missing model file {path}")
    return model_from_json(path.read_text(encoding="utf-8"))
