"""
Optimizer Module

Adam with decoupled weight decay. The decay shrinks the weights directly
before the bias-corrected moment update; it never enters the moments.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from daspl.autodiff import Tensor
from daspl.config import OptimConfig
from daspl.errors import ShapeError

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    lr: float = 0.0004
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)

    @classmethod
    def from_config(cls, cfg: OptimConfig, params: Sequence[Tensor]) -> "OptimizerState":
        return cls(
            lr=cfg.lr,
            weight_decay=cfg.weight_decay,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[Optional[np.ndarray]], state: OptimizerState) -> OptimizerState:
    """
    Update ``params`` in place and advance ``state``.

    Args:
        params: Leaf tensors.
        grads: One gradient per parameter; None counts as zero.
        state (OptimizerState): Moments and hyperparameters; moments are
                                created on first use.

    Returns:
        OptimizerState: The same object, with ``step`` incremented.

    Raises:
        ShapeError: A gradient or moment does not match its parameter.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError(f"optimizer holds {len(state.m)} moment arrays for {len(params)} parameters")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            name = p.name or f"param[{i}]"
            raise ShapeError(f"{name}: parameter {p.shape}, gradient {g.shape}, moment {state.m[i].shape}")
        if state.weight_decay:
            p.data = p.data - state.lr * state.weight_decay * p.data
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return state


class Adam:
    """Stateful wrapper that reads ``.grad`` from each parameter."""

    def __init__(self, params: Sequence[Tensor], cfg: OptimConfig):
        self.params = list(params)
        self.state = OptimizerState.from_config(cfg, self.params)
        logger.info("optimizer ready: %d tensors, lr %g, weight decay %g", len(self.params), cfg.lr, cfg.weight_decay)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
