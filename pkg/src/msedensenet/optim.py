"""Initialization, L2-regularized SGD/Adam, and epoch-level lr schedules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_L2 = 1e-4


def he_normal_init(shape: Sequence[int], fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Draw from N(0, 2 / fan_in)."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    return (rng.standard_normal(tuple(shape)) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _grad_of(p, l2: float) -> np.ndarray:
    if p.grad is None:
        raise ValueError(f"parameter {p.name or '<unnamed>'} has no gradient; call backward() first")
    g = p.grad
    if l2 and getattr(p, "decay", False):
        g = g + l2 * p.data
    return g


@dataclass
class SgdState:
    lr: float = 0.001
    momentum: float = 0.7
    velocity: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    t: int = 0


def sgd_step(params: Sequence, state: SgdState, l2: float = DEFAULT_L2) -> None:
    """Classic momentum: ``v <- mu*v - lr*(g + l2*w)``, ``w <- w + v``.

    The L2 term applies only to parameters flagged ``decay`` (conv and dense
    kernels). ``state.velocity`` is aligned with ``params`` by position.
    """
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    if len(state.velocity) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    for p, v in zip(params, state.velocity):
        g = _grad_of(p, l2)
        v *= state.momentum
        v -= state.lr * g
        p.data += v


def adam_step(params: Sequence, state: AdamState, l2: float = DEFAULT_L2) -> None:
    """Bias-corrected Adam with the L2 penalty folded into the gradient."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    grads = [_grad_of(p, l2) for p in params]
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


@dataclass(frozen=True)
class LrSchedule:
    """Epoch-indexed learning-rate/momentum timeline.

    ``steps`` holds ``(threshold, lr, momentum)`` triples: once
    ``epoch > threshold`` the lr (and momentum, when not ``None``) switch to
    the given values. ``plateau_patience`` enables multiplicative decay by
    ``plateau_factor`` whenever validation loss has failed to improve for that
    many consecutive epochs.
    """

    base_lr: float = 0.001
    base_momentum: Optional[float] = None
    steps: Tuple[Tuple[int, float, Optional[float]], ...] = ()
    plateau_patience: Optional[int] = None
    plateau_factor: float = 0.1

    def __post_init__(self):
        thresholds = [s[0] for s in self.steps]
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise ValueError(f"schedule thresholds must be strictly increasing: {thresholds}")
        if self.plateau_patience is not None and self.plateau_patience < 1:
            raise ValueError("plateau patience must be >= 1")


def classification_schedule(total_epochs: int = 250, base_lr: float = 0.001, base_momentum: float = 0.7) -> LrSchedule:
    """SGD timeline for the classification backbone.

    At 250 epochs this is lr 0.001/momentum 0.7, then 0.0001 after epoch 150,
    then 0.00001 with momentum 0.5 after epoch 200. Shorter runs keep the same
    proportions, and the two drops stay at 1/10 and 1/100 of ``base_lr``.
    """
    first = round(150 * total_epochs / 250)
    second = max(round(200 * total_epochs / 250), first + 1)
    return LrSchedule(
        base_lr=base_lr,
        base_momentum=base_momentum,
        steps=((first, base_lr * 0.1, None), (second, base_lr * 0.01, 0.5)),
    )


def count_plateau_reductions(val_losses: Sequence[float], patience: int) -> int:
    best = np.inf
    wait = 0
    reductions = 0
    for loss in val_losses:
        if loss < best:
            best = loss
            wait = 0
        else:
            wait += 1
            if wait >= patience:
                reductions += 1
                wait = 0
    return reductions


def schedule_epoch(schedule: LrSchedule, epoch: int, val_loss_history: Sequence[float] = ()) -> Tuple[float, Optional[float]]:
    """lr and momentum to use for ``epoch`` (1-based), given validation losses
    of the epochs completed so far. Pure: no state beyond the arguments."""
    if epoch < 1:
        raise ValueError(f"epoch is 1-based, got {epoch}")
    lr, momentum = schedule.base_lr, schedule.base_momentum
    for threshold, step_lr, step_momentum in schedule.steps:
        if epoch > threshold:
            lr = step_lr
            if step_momentum is not None:
                momentum = step_momentum
    if schedule.plateau_patience is not None:
        k = count_plateau_reductions(val_loss_history, schedule.plateau_patience)
        lr *= schedule.plateau_factor**k
    return lr, momentum
