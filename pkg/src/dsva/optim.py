"""SGD and Adam optimizers over diffcore parameters."""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .diffcore import Tensor
from .errors import ContractError


@dataclass
class OptimizerState:
    """Hyperparameters and per-parameter moment buffers of one optimizer."""
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    first_moments: Dict[int, np.ndarray] = field(default_factory=dict)
    second_moments: Dict[int, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("sgd", "adam"):
            raise ContractError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate < 0:
            raise ContractError(f"learning rate must be >= 0, got {self.learning_rate}")


def optimizer_step(state: OptimizerState, params: Sequence[Tensor]) -> None:
    """
    Apply one update to every parameter and clear its gradient.

    Moment buffers are keyed by the parameter's position in params, so callers
    must pass the same parameters in the same order on every step.

    Args:
        state: Optimizer state (mutated)
        params: Parameters with populated .grad

    Raises:
        ContractError: If a parameter has no gradient
    """
    for index, p in enumerate(params):
        if p.grad is None:
            raise ContractError(f"parameter {index} (shape {p.shape}) has no gradient")

    state.step_count += 1
    t = state.step_count
    for index, p in enumerate(params):
        g = p.grad
        assert g is not None
        if state.kind == "sgd":
            p.data = p.data - state.learning_rate * g
        else:
            m = state.first_moments.get(index)
            v = state.second_moments.get(index)
            if m is None or m.shape != g.shape:
                m = np.zeros_like(g)
                v = np.zeros_like(g)
            assert v is not None
            m = state.beta1 * m + (1.0 - state.beta1) * g
            v = state.beta2 * v + (1.0 - state.beta2) * g * g
            state.first_moments[index] = m
            state.second_moments[index] = v
            m_hat = m / (1.0 - state.beta1 ** t)
            v_hat = v / (1.0 - state.beta2 ** t)
            p.data = p.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        p.grad = None


class Optimizer:
    """Binds an OptimizerState to a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], state: OptimizerState):
        self.params: List[Tensor] = list(params)
        self.state = state

    def step(self) -> None:
        optimizer_step(self.state, self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def trainable(self) -> List[Tensor]:
        return [p for p in self.params if p.requires_grad]


def SGD(params: Sequence[Tensor], lr: float = 1e-2) -> Optimizer:
    return Optimizer(params, OptimizerState(kind="sgd", learning_rate=lr))


def Adam(
    params: Sequence[Tensor],
    lr: float = 1e-3,
    betas: tuple = (0.9, 0.999),
    eps: float = 1e-8,
) -> Optimizer:
    return Optimizer(
        params,
        OptimizerState(kind="adam", learning_rate=lr, beta1=betas[0], beta2=betas[1], epsilon=eps),
    )
