"""Local self-supervised encoder training (no victim queries, labels never read).

Objective per epoch, for a fresh uniformly drawn node mask ``M``::

    loss = mse(decoder(enc(X_masked)), X | rows M)
         + lam * mean((enc(X_masked)[M] - enc(X)[M]) ** 2)

``X_masked`` zeroes the feature rows in ``M``. The decoder is a single affine map
from the embedding width back to the feature width and is thrown away after
training. Objective tag recorded in reports: ``masked_recon+inv``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError
from .gnn import EncoderParams, glorot, graph_ops, init_encoder, network_backward, network_forward
from .graphcore import Graph
from .numkit import AdamState, Rng, adam_step, mse

log = logging.getLogger(__name__)

OBJECTIVE_TAG = "masked_recon+inv"


@dataclass
class SslConfig:
    mask_ratio: float = 0.05
    lr: float = 0.001
    epochs: int = 30
    invariance_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if self.epochs < 1:
            raise ConfigError("SSL needs at least one epoch")
        if self.invariance_weight < 0:
            raise ConfigError("invariance weight must be >= 0")


def _masked(x, rows: np.ndarray):
    keep = np.ones(x.shape[0])
    keep[rows] = 0.0
    if sp.issparse(x):
        return sp.csr_matrix(sp.diags(keep) @ x)
    return x * keep[:, None]


def ssl_loss(enc: EncoderParams, decoder: list[np.ndarray], g: Graph, mask_rows: np.ndarray,
             invariance_weight: float):
    """Combined loss and gradients ``(loss, encoder_grads, decoder_grads)``."""
    ops = graph_ops(g)
    x = ops.features
    dec_w, dec_b = decoder
    h_masked, cache_m = network_forward(enc.layers, ops, _masked(x, mask_rows))
    # only masked rows enter the reconstruction term, so only they are decoded
    h_rows = h_masked[mask_rows]
    loss, d_rows = mse(h_rows @ dec_w + dec_b, g.features[mask_rows], np.arange(mask_rows.size))
    grad_dec = [h_rows.T @ d_rows, d_rows.sum(axis=0)]
    d_hm = np.zeros_like(h_masked)
    np.add.at(d_hm, mask_rows, d_rows @ dec_w.T)
    grads = None
    if invariance_weight > 0:
        h_clean, cache_c = network_forward(enc.layers, ops, x)
        diff = h_masked[mask_rows] - h_clean[mask_rows]
        count = diff.size
        loss += invariance_weight * float(np.sum(diff * diff) / count)
        d_diff = np.zeros_like(h_masked)
        d_diff[mask_rows] = invariance_weight * 2.0 * diff / count
        d_hm = d_hm + d_diff
        grads_c, _ = network_backward(enc.layers, ops, cache_c, -d_diff, need_input_grad=False)
        grads = grads_c
    grads_m, _ = network_backward(enc.layers, ops, cache_m, d_hm, need_input_grad=False)
    if grads is not None:
        grads_m = [[a + b for a, b in zip(lm, lc)] for lm, lc in zip(grads_m, grads)]
    return loss, grads_m, grad_dec


def train_ssl_encoder(g: Graph, arch: str = "gcn", depth: int = 2, hidden: int = 256, out_dim: int = 256,
                      config: SslConfig | None = None, activation: str = "relu",
                      batch_norm: bool = False, return_history: bool = False):
    """Train an encoder on all nodes of ``g`` with the masked objective above.

    With ``return_history`` the result is ``(encoder, losses, decoder)``; each loss is
    measured on that epoch's own mask.
    """
    c = config or SslConfig()
    if g.n < 2:
        raise ConfigError("SSL needs at least two nodes")
    n_mask = math.ceil(c.mask_ratio * g.n)
    if n_mask == 0:
        raise ConfigError("mask covers zero nodes")
    enc = init_encoder(arch, depth, g.d, hidden, out_dim, c.seed, activation, batch_norm)
    rng = Rng(c.seed).child("ssl")
    decoder = [glorot(rng.child("decoder"), out_dim, g.d), np.zeros(g.d)]
    params = enc.params() + decoder
    state = AdamState(lr=c.lr)
    history = []
    for epoch in range(c.epochs):
        rows = np.sort(rng.child("mask", epoch).choice(g.n, n_mask))
        loss, grads, grad_dec = ssl_loss(enc, decoder, g, rows, c.invariance_weight)
        history.append(loss)
        adam_step(params, [gr for lg in grads for gr in lg] + grad_dec, state)
    log.info("ssl %s/%d: loss %.6g -> %.6g over %d epochs", arch, depth, history[0], history[-1], c.epochs)
    return (enc, history, decoder) if return_history else enc
