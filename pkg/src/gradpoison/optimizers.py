"""Parameter update rules (SGD, Adam) on flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    kind: str = "sgd"  # "sgd" | "adam"
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")


def step(state: OptimizerState, theta: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Return updated parameters; Adam moments and step count are updated in place."""
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if g.shape != theta.shape:
        raise ValueError(f"gradient dim {g.shape} does not match parameter dim {theta.shape}")
    if state.kind == "sgd":
        return theta - state.lr * g
    if state.m is None:
        state.m = np.zeros_like(theta)
        state.v = np.zeros_like(theta)
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    return theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
