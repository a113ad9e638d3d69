"""Subspace gradients, Adam updates, and the checkpointed fine-tuning loop.

The gradient is reverse-mode over the flattened subspace vector only; frozen
parameters contribute no slots. Checkpoints are captured after the optimizer
step at equidistant step indices, always including the final step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .errors import DomainError, ShapeError
from .loss import affine_invariant_mae
from .peft import SubspaceDescriptor, flatten, unflatten

__all__ = [
    "AdamState",
    "Checkpoint",
    "TrainSchedule",
    "adam_step",
    "equidistant_indices",
    "finetune",
    "gradient",
]


@dataclass(frozen=True)
class AdamState:
    step: int
    first_moment: np.ndarray
    second_moment: np.ndarray
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def initial(cls, dim: int, lr: float) -> "AdamState":
        return cls(step=0, first_moment=np.zeros(dim), second_moment=np.zeros(dim), lr=lr)


def adam_step(state: AdamState, vec: np.ndarray, grad_vec: np.ndarray) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update; returns the new state and vector."""
    vec = np.asarray(vec, dtype=np.float64)
    grad_vec = np.asarray(grad_vec, dtype=np.float64)
    if vec.shape != grad_vec.shape or vec.shape != state.first_moment.shape:
        raise ShapeError(
            f"length mismatch: vec {vec.shape}, grad {grad_vec.shape}, state {state.first_moment.shape}"
        )
    t = state.step + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad_vec
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad_vec * grad_vec
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    updated = vec - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, step=t, first_moment=m, second_moment=v), updated


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 20
    batch_size: int = 4
    checkpoint_count: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.checkpoint_count < 1:
            raise DomainError(f"schedule fields must be positive: {self}")


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Flattened subspace vector captured after the optimizer step."""

    params: np.ndarray
    step: int  # 0-based optimizer step index
    loss: float  # batch loss at capture (before the update)


def _squeeze_target(target) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)
    if target.ndim == 3 and target.shape[0] == 1:
        return target[0]
    return target


def _loss_and_gradient(model, desc: SubspaceDescriptor, batch) -> tuple[np.ndarray, float]:
    if not batch:
        raise DomainError("empty batch")
    leaves = {slot.name: ad.leaf(model.get_value(slot.name)) for slot in desc.slots}
    preds = []
    targets = []
    for image, target in batch:
        out = model.forward_with(image, overrides=leaves)
        preds.append(ad.reshape(out, out.shape[1:]))
        targets.append(_squeeze_target(target))
    loss = affine_invariant_mae(preds, targets)
    grads = ad.grad(loss, [leaves[slot.name] for slot in desc.slots])
    if desc.slots:
        vec = np.concatenate([g.reshape(-1) for g in grads])
    else:
        vec = np.zeros(0)
    return vec, float(ad.value_of(loss))


def gradient(model, desc: SubspaceDescriptor, batch) -> np.ndarray:
    """Reverse-mode gradient of the batch loss w.r.t. the subspace vector.

    ``batch`` is a sequence of (image, target) pairs.
    """
    vec, _ = _loss_and_gradient(model, desc, batch)
    return vec


def equidistant_indices(total: int, count: int) -> list[int]:
    """``count`` 0-based indices spread over ``range(total)``, last included."""
    if not 1 <= count <= total:
        raise DomainError(f"cannot place {count} equidistant indices over {total} steps")
    return [math.ceil((j + 1) * total / count) - 1 for j in range(count)]


def finetune(model, desc: SubspaceDescriptor, dataset, sched: TrainSchedule, lr: float) -> list[Checkpoint]:
    """Continue fine-tuning the subspace, recording equidistant checkpoints.

    ``dataset`` is a sequence of (image, target) pairs; batches are reshuffled
    every epoch from the schedule seed. Partial final batches are kept.
    """
    dataset = list(dataset)
    if not dataset:
        raise DomainError("dataset is empty")
    steps_per_epoch = math.ceil(len(dataset) / sched.batch_size)
    total_steps = sched.epochs * steps_per_epoch
    if sched.checkpoint_count > total_steps:
        raise DomainError(
            f"{sched.checkpoint_count} checkpoints requested but only {total_steps} optimizer steps"
        )
    capture = set(equidistant_indices(total_steps, sched.checkpoint_count))

    rng = np.random.default_rng(sched.seed)
    vec = flatten(model, desc)
    state = AdamState.initial(vec.size, lr)
    checkpoints: list[Checkpoint] = []
    step = 0
    for _ in range(sched.epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(dataset), sched.batch_size):
            batch = [dataset[i] for i in order[start : start + sched.batch_size]]
            grad_vec, loss = _loss_and_gradient(model, desc, batch)
            state, vec = adam_step(state, vec, grad_vec)
            unflatten(model, desc, vec)
            if step in capture:
                checkpoints.append(Checkpoint(params=vec.copy(), step=step, loss=loss))
            step += 1
    return checkpoints
