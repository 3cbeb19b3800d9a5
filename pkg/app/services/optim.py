import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from app.services.tensor_core import NumericError, ShapeError, Tensor

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning rate must be positive, got {self.learning_rate}")


def adam_step(params: Dict[str, Tensor], grads: Dict[str, Optional[np.ndarray]], state: AdamState) -> AdamState:
    """
    Apply one bias-corrected Adam update in place.

    Args:
        params: name -> parameter tensor
        grads: name -> gradient array (None counts as zero)
        state: moments keyed by parameter name

    Returns:
        The same state with ``step`` incremented by one.
    """
    for name, param in params.items():
        grad = grads.get(name)
        if grad is not None:
            if grad.shape != param.shape:
                raise ShapeError(f"adam_step: incompatible shapes {param.shape} and {grad.shape} for {name}")
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"adam_step: non-finite gradient for {name}")

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for name, param in params.items():
        grad = grads.get(name)
        g = np.zeros(param.shape) if grad is None else grad.astype(np.float64)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros(param.shape)
            v = np.zeros(param.shape)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.data = (param.data.astype(np.float64) - update).astype(param.data.dtype)
    return state


class Adam:
    """Adam over a module's named parameters."""

    def __init__(self, named_params: Dict[str, Tensor], learning_rate: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(named_params)
        self.state = AdamState(learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps)

    def step(self):
        adam_step(self.params, {name: p.grad for name, p in self.params.items()}, self.state)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


class StepDecay:
    """Multiply the learning rate by ``factor`` every ``period`` optimizer steps."""

    def __init__(self, optimizer: Adam, period: int, factor: float = 0.5):
        if period <= 0:
            raise ValueError(f"decay period must be positive, got {period}")
        self.optimizer = optimizer
        self.period = period
        self.factor = factor
        self.base_lr = optimizer.state.learning_rate

    def step(self):
        decays = self.optimizer.state.step // self.period
        lr = self.base_lr * self.factor ** decays
        if lr != self.optimizer.state.learning_rate:
            logger.debug(f"Learning rate decayed to {lr:g} at step {self.optimizer.state.step}")
        self.optimizer.state.learning_rate = lr
