"""Numeric substrate: products, losses with analytic gradients, Adam, and a portable RNG.

Matrices are plain ``float64`` numpy arrays. Every public op validates shapes and
rejects non-finite results with :class:`NumericError`.

The random stream is SplitMix64 used in counter mode: draw ``i`` (1-based) of a
stream with 64-bit seed ``s`` is ``mix(s + i * 0x9E3779B97F4A7C15 mod 2**64)`` where
``mix`` is the SplitMix64 finalizer::

    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

Uniform doubles are ``(z >> 11) * 2**-53``. Derived streams (:meth:`Rng.child`) hash
their keys with BLAKE2b, so streams are identical on every platform and language.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ArgumentError, NumericError, ShapeError

_MASK = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer; works in place on ``z`` (a fresh temporary) to save copies."""
    t = np.empty_like(z)
    for shift, mult in ((30, _M1), (27, _M2)):
        np.right_shift(z, np.uint64(shift), out=t)
        z ^= t
        z *= mult
    np.right_shift(z, np.uint64(31), out=t)
    z ^= t
    return z


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        data = int(key).to_bytes(16, "little", signed=True)
    else:
        data = str(key).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


class Rng:
    """Deterministic counter-based random stream (see module docstring)."""

    def __init__(self, seed: int | None = 0):
        self.seed = int(seed or 0) & _MASK
        self.counter = 0

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, counter={self.counter})"

    def child(self, *keys) -> "Rng":
        """Independent stream derived from this seed and ``keys`` (position-independent)."""
        s = self.seed
        for k in keys:
            z = np.array([(s ^ _key_to_int(k)) & _MASK], dtype=np.uint64)
            s = int(_mix(z + _GOLDEN)[0])
        return Rng(s)

    def next_u64(self, size: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + size, dtype=np.uint64)
        self.counter += size
        with np.errstate(over="ignore"):
            idx *= _GOLDEN
            idx += np.uint64(self.seed)
            return _mix(idx)

    def uniform(self, size: int | tuple = 1, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        count = int(np.prod(shape)) if shape else 1
        bits = self.next_u64(count)
        bits >>= np.uint64(11)
        u = bits.astype(np.float64)
        u *= 2.0**-53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, size: int | tuple = 1) -> np.ndarray:
        shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        count = int(np.prod(shape)) if shape else 1
        u1 = 1.0 - self.uniform(count)
        u2 = self.uniform(count)
        return (np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)).reshape(shape)

    def integers(self, high: int, size: int = 1) -> np.ndarray:
        """Integers uniform in ``[0, high)``."""
        if high < 1:
            raise ArgumentError(f"high must be >= 1, got {high}")
        out = np.floor(self.uniform(size) * high).astype(np.int64)
        return np.minimum(out, high - 1)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, m: int) -> np.ndarray:
        """``m`` distinct integers from ``[0, n)`` (uniform without replacement)."""
        if m > n:
            raise ArgumentError(f"cannot choose {m} of {n} without replacement")
        return self.permutation(n)[:m]


def _check_finite(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return _check_finite(a @ b, "matmul")


def spmm(s, x: np.ndarray) -> np.ndarray:
    """Sparse-dense product; ``s`` is a NormalizedAdjacency or a scipy sparse matrix."""
    mat = getattr(s, "matrix", s)
    if not sp.issparse(mat):
        raise ArgumentError("spmm expects a sparse left operand")
    if x.ndim != 2 or mat.shape[1] != x.shape[0]:
        raise ShapeError(f"cannot multiply sparse {mat.shape} by {x.shape}")
    return _check_finite(np.asarray(mat @ x), "spmm")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, targets) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over rows and its gradient w.r.t. ``logits``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"logits {logits.shape} do not match {targets.shape[0]} targets")
    rows, classes = logits.shape
    if rows == 0:
        raise ArgumentError("cross-entropy over zero rows")
    if targets.min() < 0 or targets.max() >= classes:
        raise ArgumentError(f"target outside [0, {classes})")
    _check_finite(logits, "logits")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - shifted[np.arange(rows), targets]))
    grad = np.exp(shifted - lse[:, None])
    grad[np.arange(rows), targets] -= 1.0
    return loss, grad / rows


def mse(pred: np.ndarray, target: np.ndarray, mask) -> tuple[float, np.ndarray]:
    """Mean squared error over the elements of the masked rows."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} != target {target.shape}")
    mask = np.asarray(mask, dtype=np.int64)
    if mask.size == 0:
        raise ArgumentError("mse mask is empty")
    if mask.min() < 0 or mask.max() >= pred.shape[0]:
        raise ArgumentError("mse mask row out of range")
    count = mask.size * pred.shape[1]
    diff = pred[mask] - target[mask]
    loss = float(np.sum(diff * diff) / count)
    grad = np.zeros_like(pred)
    np.add.at(grad, mask, 2.0 * diff / count)
    return _check_finite(np.array(loss), "mse").item(), grad


@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState) -> list:
    """Bias-corrected Adam update, applied in place; returns ``params``.

    ``weight_decay`` is coupled L2 (added to the gradient), as in the common
    framework default.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("Adam state does not match parameter list")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"param {p.shape}, grad {g.shape}, moment {m.shape}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if state.weight_decay:
            g = g + state.weight_decay * p
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        _check_finite(p, "Adam update")
    return list(params)


def finite_diff_check(
    f: Callable[[], float],
    params: Sequence[np.ndarray] | np.ndarray,
    analytic_grad: Sequence[np.ndarray] | np.ndarray,
    h: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between ``analytic_grad`` and central differences of ``f``.

    ``f`` takes no arguments and reads ``params`` (which are perturbed in place and
    restored). Relative error is ``|a - n| / max(1, |a|, |n|)``. With ``max_coords``
    only that many coordinates per parameter are checked, chosen by ``seed``.
    """
    if isinstance(params, np.ndarray):
        params, analytic_grad = [params], [analytic_grad]
    rng = Rng(seed)
    worst = 0.0
    for p, g in zip(params, analytic_grad):
        flat, gflat = p.reshape(-1), np.asarray(g).reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords))
        for i in coords:
            old = flat[i]
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            down = f()
            flat[i] = old
            num = (up - down) / (2.0 * h)
            a = gflat[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst
