import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from rewirelab.tensor import Tensor


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


class Optimizer:
    """Base class for in-place first-order optimizers.

    Updates rebind `param.data` to a new array instead of writing into the
    old one, so arrays captured by an earlier tape stay valid.
    """

    def __init__(
        self, params: Sequence[Tensor], lr: float, weight_decay: float = 0.0
    ) -> None:
        if lr < 0:
            raise ValueError(f"Learning rate must be non-negative, got {lr}")
        if weight_decay < 0:
            raise ValueError(
                f"Weight decay must be non-negative, got {weight_decay}"
            )
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay

    def zero_grad(self) -> None:
        for param in self.params:
            param.zero_grad()

    def _gradient(self, param: Tensor) -> Optional[np.ndarray]:
        if param.grad is None:
            return None
        if self.weight_decay:
            return param.grad + self.weight_decay * param.data
        return param.grad

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def step(self) -> None:
        for param in self.params:
            grad = self._gradient(param)
            if grad is not None:
                param.data = param.data - self.lr * grad


class Adam(Optimizer):
    """Adam with L2 weight decay added to the gradient."""

    def __init__(
        self,
        params: Sequence[Tensor],
        lr: float,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ) -> None:
        super().__init__(params, lr, weight_decay)
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        beta1, beta2 = self.betas
        correction1 = 1.0 - beta1**self.t
        correction2 = 1.0 - beta2**self.t

        for i, param in enumerate(self.params):
            grad = self._gradient(param)
            if grad is None:
                continue
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad**2
            m_hat = self.m[i] / correction1
            v_hat = self.v[i] / correction2
            param.data = param.data - self.lr * m_hat / (
                np.sqrt(v_hat) + self.eps
            )


def make_optimizer(
    kind: OptimizerKind,
    params: Sequence[Tensor],
    lr: float,
    weight_decay: float = 0.0,
) -> Optimizer:
    if kind == OptimizerKind.SGD:
        return SGD(params, lr, weight_decay)
    return Adam(params, lr, weight_decay)


def global_grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for param in params:
        if param.grad is not None:
            total += float(np.sum(param.grad**2))
    return math.sqrt(total)


def clip_grad_norm(
    params: Sequence[Tensor], max_norm: Optional[float]
) -> float:
    """Scale gradients so their global norm is at most `max_norm`.

    Returns:
        float: The norm before clipping.
    """
    norm = global_grad_norm(params)
    if max_norm is not None and norm > max_norm:
        factor = max_norm / norm
        for param in params:
            if param.grad is not None:
                param.grad = param.grad * factor
    return norm


@dataclass(frozen=True)
class CosineSchedule:
    """Cosine annealing stepped once per epoch."""

    base_lr: float
    t_max: int
    lr_min: float = 0.0

    def __call__(self, epoch: int) -> float:
        progress = min(epoch, self.t_max) / max(self.t_max, 1)
        return self.lr_min + 0.5 * (self.base_lr - self.lr_min) * (
            1.0 + math.cos(math.pi * progress)
        )


@dataclass(frozen=True)
class ConstantSchedule:
    base_lr: float

    def __call__(self, epoch: int) -> float:
        return self.base_lr
