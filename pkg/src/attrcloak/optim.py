"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, index: tuple[int, ...], value: float, name: str | None = None):
        self.index = index
        self.value = value
        self.name = name
        where = f" in {name}" if name else ""
        super().__init__(f"non-finite gradient {value!r} at index {index}{where}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0

    @classmethod
    def like(cls, variable: np.ndarray, lr: float = 0.001, **hyper) -> "AdamState":
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        shape = np.shape(variable)
        return cls(np.zeros(shape), np.zeros(shape), lr=lr, **hyper)


def adam_step(state: AdamState, variable: np.ndarray, gradient: np.ndarray,
              name: str | None = None) -> tuple[np.ndarray, AdamState]:
    """One Adam update. Returns the new variable; ``state`` is advanced in place."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != state.m.shape or np.shape(variable) != state.m.shape:
        raise ValueError(f"adam_step: shape mismatch variable={np.shape(variable)} "
                         f"gradient={g.shape} state={state.m.shape}")
    if state.lr <= 0:
        raise ValueError(f"learning rate must be positive, got {state.lr}")
    bad = ~np.isfinite(g)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NonFiniteGradientError(idx, float(g[idx]), name)

    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (g * g)
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return variable - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), state


@dataclass
class Adam:
    """Adam over a dict of named parameter arrays."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: dict[str, AdamState] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, value in params.items():
            st = self.states.get(name)
            if st is None:
                st = self.states[name] = AdamState.like(value, self.lr, beta1=self.beta1,
                                                        beta2=self.beta2, eps=self.eps)
            params[name], _ = adam_step(st, value, grads[name], name=name)
