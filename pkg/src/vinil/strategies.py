"""Fine-tuning, EwC and Replay, each label- or self-supervised.

Loss composition per (method, supervision):

=========  ===============================  ===============================
method     label                            self
=========  ===============================  ===============================
finetune   CE(x)                            BT(x, x')
ewc        w_c CE(x) + (1-w_c) Reg          w_c BT(x, x') + (1-w_c) Reg
replay     w_c CE(x) + (1-w_c) CE(x_m)      w_c BT(x, x') + (1-w_c) BT(x_m, x_m')
=========  ===============================  ===============================
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .losses import HyperParams, barlow_twins, combined_objective, cross_entropy
from .models import ModelState, classify, encode, project
from .tensor import Tape, Tensor

METHODS = ("finetune", "ewc", "replay")
SUPERVISIONS = ("label", "self")


@dataclass
class StrategyConfig:
    method: str = "finetune"
    supervision: str = "self"
    memory_fraction: float = 0.10
    hyper: HyperParams = field(default_factory=HyperParams)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.supervision not in SUPERVISIONS:
            raise ValueError(f"unknown supervision {self.supervision!r}; expected one of {SUPERVISIONS}")
        if not 0.0 <= self.memory_fraction <= 1.0:
            raise ValueError(f"memory_fraction must lie in [0, 1], got {self.memory_fraction}")

    @property
    def label(self) -> bool:
        return self.supervision == "label"


@dataclass
class Batch:
    """Current-task inputs: clean view ``x``, augmented view ``x_aug``."""

    x: np.ndarray
    x_aug: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.x)


# -- EwC ---------------------------------------------------------------------


@dataclass
class EwCState:
    theta_prev: dict[str, np.ndarray] | None = None
    importance: dict[str, np.ndarray] | None = None

    @property
    def anchored(self) -> bool:
        return self.theta_prev is not None


def ewc_penalty(model: ModelState, state: EwCState) -> Tensor:
    """``sum_p importance_p * (theta_p - theta_prev_p)^2`` over anchored params."""
    if not state.anchored:
        return Tensor(0.0)
    params = model.params
    total = None
    for name, anchor in state.theta_prev.items():
        if name not in params:
            raise ValueError(f"ewc_penalty: parameter {name!r} missing from model")
        p = params[name]
        if p.shape != anchor.shape:
            raise ValueError(f"ewc_penalty: {name!r} has shape {p.shape}, anchor {anchor.shape}")
        term = T.sum(T.mul(T.square(T.sub(p, anchor)), state.importance[name]))
        total = term if total is None else T.add(total, term)
    return total if total is not None else Tensor(0.0)


def ewc_update_after_session(model: ModelState, images: np.ndarray | None,
                             labels: np.ndarray | None, supervision: str) -> EwCState:
    """Snapshot shared parameters and recompute their importance.

    Self-supervision uses unit importance. Label supervision uses the
    diagonal empirical Fisher: per-sample squared gradients of the
    log-probability of the argmax class, averaged over the task.
    """
    shared = model.shared_params()
    theta_prev = {k: v.values.copy() for k, v in shared.items()}
    if supervision == "self":
        return EwCState(theta_prev, {k: np.ones_like(v) for k, v in theta_prev.items()})
    if images is None or len(images) == 0:
        raise ValueError("ewc_update_after_session: label supervision needs task data")
    fisher = {k: np.zeros_like(v) for k, v in theta_prev.items()}
    for img in images:
        model.zero_grad()
        with Tape():
            logp = T.log_softmax(classify(model, encode(model, img[None])), axis=1)
            pred = int(np.argmax(logp.values[0]))
            mask = np.zeros(logp.shape)
            mask[0, pred] = 1.0
            T.backward(T.sum(T.mul(logp, mask)))
        for k, p in shared.items():
            if p.grad is not None:
                fisher[k] += p.grad * p.grad
    model.zero_grad()
    n = float(len(images))
    return EwCState(theta_prev, {k: v / n for k, v in fisher.items()})


# -- Replay ------------------------------------------------------------------


@dataclass
class MemoryBuffer:
    images: list[np.ndarray] = field(default_factory=list)
    labels: list[int] | None = None  # None under self-supervision
    task_ids: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.images)

    @classmethod
    def for_supervision(cls, supervision: str) -> "MemoryBuffer":
        return cls(labels=[] if supervision == "label" else None)


def buffer_update(buffer: MemoryBuffer, images: np.ndarray, labels: np.ndarray | None,
                  task_id: int, fraction: float, rng_seed) -> MemoryBuffer:
    """Store a uniform sample of ``round(fraction * |task|)`` items of a finished task."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"buffer_update: fraction must lie in (0, 1], got {fraction}")
    n = len(images)
    if n == 0:
        return buffer
    if buffer.labels is not None and labels is None:
        raise ValueError("buffer_update: label buffer needs labels")
    count = round(fraction * n)
    picks = np.sort(np.random.default_rng(rng_seed).choice(n, size=count, replace=False))
    for i in picks:
        buffer.images.append(np.array(images[i]))
        buffer.task_ids.append(int(task_id))
        if buffer.labels is not None:
            buffer.labels.append(int(labels[i]))
    return buffer


def replay_batch(buffer: MemoryBuffer, batch_size: int, rng: np.random.Generator):
    """Draw ``(images, labels_or_None)``; with replacement only if the buffer is small."""
    if len(buffer) == 0:
        raise ValueError("replay_batch: memory buffer is empty")
    replace = len(buffer) < batch_size
    idx = rng.choice(len(buffer), size=batch_size, replace=replace)
    images = np.stack([buffer.images[i] for i in idx])
    labels = None if buffer.labels is None else np.array([buffer.labels[i] for i in idx])
    return images, labels


# -- loss --------------------------------------------------------------------


def _instance_loss(model: ModelState, batch: Batch, supervision: str, w_b: float) -> Tensor:
    if supervision == "label":
        if batch.labels is None:
            raise ValueError("session_loss: label supervision needs labelled samples")
        return cross_entropy(classify(model, encode(model, batch.x_aug)), batch.labels)
    z = project(model, encode(model, batch.x))
    z_aug = project(model, encode(model, batch.x_aug))
    return barlow_twins(z, z_aug, w_b)


def session_loss(model: ModelState, batch: Batch, strategy: StrategyConfig,
                 ewc_state: EwCState | None = None, memory: Batch | None = None) -> Tensor:
    """Build the strategy's training loss for one step on the active tape.

    ``memory`` is the replay batch; pass None when the buffer is still empty,
    which reduces Replay to fine-tuning for that step.
    """
    hyper = strategy.hyper
    l_inst = _instance_loss(model, batch, strategy.supervision, hyper.w_b)
    if strategy.method == "finetune":
        return l_inst
    if strategy.method == "ewc":
        if ewc_state is None or not ewc_state.anchored:
            return l_inst
        return combined_objective(l_inst, ewc_penalty(model, ewc_state), hyper.w_c)
    if memory is None or len(memory) == 0:
        return l_inst
    l_mem = _instance_loss(model, memory, strategy.supervision, hyper.w_b)
    return combined_objective(l_inst, l_mem, hyper.w_c)
