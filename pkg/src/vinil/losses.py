"""Cross-entropy, the BarlowTwins redundancy-reduction loss and the mixing rule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

BATCH_STD_EPS = 1e-5


@dataclass
class HyperParams:
    w_c: float = 0.7
    w_b: float = 0.03
    batch_size: int = 64
    epochs_per_session: int = 20
    momentum: float = 0.9
    base_lr: float = 0.001
    min_lr: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.w_c <= 1.0:
            raise ValueError(f"w_c must lie in [0, 1], got {self.w_c}")
        if self.w_b <= 0:
            raise ValueError(f"w_b must be positive, got {self.w_b}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs_per_session < 0:
            raise ValueError(f"epochs_per_session must be >= 0, got {self.epochs_per_session}")


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    n = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"cross_entropy: labels must lie in [0, {n}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    picked = T.sum(T.mul(T.log_softmax(logits, axis=1), onehot), axis=1)
    return T.neg(T.mean(picked))


def batch_normalize(z, eps: float = BATCH_STD_EPS) -> Tensor:
    """Standardize each column over the batch (population std).

    Columns with std below ``eps`` come out as exact zeros.
    """
    z = T.as_tensor(z)
    if z.ndim != 2:
        raise ShapeError("batch_normalize", z.shape)
    if z.shape[0] < 2:
        raise ValueError(f"batch_normalize: need at least 2 rows, got {z.shape[0]}")
    centered = T.sub(z, T.batch_mean(z))
    std = T.batch_std(z, eps)
    live = (std.values > 0).astype(np.float64)
    # dead columns divide by 1 and are then masked to 0
    safe = T.add(std, 1.0 - live)
    return T.mul(T.div(centered, safe), live)


def cross_correlation(z, z_prime, eps: float = BATCH_STD_EPS) -> Tensor:
    """``(1/B) * norm(z)^T norm(z')``, a D' x D' matrix."""
    z, z_prime = T.as_tensor(z), T.as_tensor(z_prime)
    if z.shape != z_prime.shape or z.ndim != 2:
        raise ShapeError("cross_correlation", z.shape, z_prime.shape)
    b = z.shape[0]
    zn = batch_normalize(z, eps)
    zpn = batch_normalize(z_prime, eps)
    return T.mul(T.matmul(T.transpose(zn), zpn), 1.0 / b)


def barlow_twins(z, z_prime, w_b: float = 0.03, eps: float = BATCH_STD_EPS) -> Tensor:
    """Invariance term on the diagonal plus ``w_b``-weighted redundancy off it."""
    c = cross_correlation(z, z_prime, eps)
    d = c.shape[0]
    eye = np.eye(d)
    on_diag = T.sum(T.square(T.mul(T.sub(c, eye), eye)))
    off_diag = T.sum(T.square(T.mul(c, 1.0 - eye)))
    return T.add(on_diag, T.mul(off_diag, w_b))


def combined_objective(l_inst, l_incr, w_c: float):
    """``w_c * l_inst + (1 - w_c) * l_incr``; ``w_c == 1`` returns ``l_inst`` itself."""
    if not 0.0 <= w_c <= 1.0:
        raise ValueError(f"w_c must lie in [0, 1], got {w_c}")
    if w_c == 1.0:
        return l_inst
    if isinstance(l_inst, Tensor) or isinstance(l_incr, Tensor):
        return T.add(T.mul(l_inst, w_c), T.mul(l_incr, 1.0 - w_c))
    return w_c * l_inst + (1.0 - w_c) * l_incr
