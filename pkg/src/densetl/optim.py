"""SGD with momentum, RMSprop and bias-corrected Adam.

Parameters are passed as ``(name, Tensor)`` pairs so optimizer buffers can be
saved and restored by name. Updates are applied in place to ``Tensor.data``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import Gradients, ShapeError, Tensor

DEFAULT_LR = {"adam": 1e-3, "sgd": 1e-2, "rmsprop": 1e-3}
KINDS = tuple(DEFAULT_LR)


@dataclass(frozen=True)
class OptimizerHyper:
    kind: str = "adam"
    learning_rate: Optional[float] = None  # None -> per-kind default
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    rho: float = 0.9
    epsilon: float = 1e-7

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.learning_rate is None:
            object.__setattr__(self, "learning_rate", DEFAULT_LR[self.kind])
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"sgd momentum must lie in [0, 1), got {self.momentum}")
        if not 0 < self.rho < 1:
            raise ValueError(f"rmsprop rho must lie in (0, 1), got {self.rho}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


_BUFFERS = {"adam": ("m", "v"), "sgd": ("velocity",), "rmsprop": ("square_avg",)}


@dataclass
class OptimizerState:
    kind: str
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    t: int = 0


def init_state(params: Sequence[tuple[str, Tensor]], hyper: OptimizerHyper) -> OptimizerState:
    if not params:
        raise ValueError("optimizer needs at least one parameter")
    state = OptimizerState(hyper.kind)
    for buf in _BUFFERS[hyper.kind]:
        state.buffers[buf] = {name: np.zeros_like(p.data) for name, p in params}
    return state


def step(state: OptimizerState, params: Sequence[tuple[str, Tensor]], grads, hyper: OptimizerHyper) -> None:
    """Apply one update to every parameter in ``params``.

    ``grads`` maps parameter tensors to gradient tensors (a :class:`Gradients`
    from ``backward``) or is a sequence aligned with ``params``.
    """
    if isinstance(grads, Gradients):
        garrs = [grads[p].data for _, p in params]
    else:
        garrs = [g.data if isinstance(g, Tensor) else np.asarray(g) for g in grads]
    state.t += 1
    t = state.t
    lr = hyper.learning_rate
    for (name, p), g in zip(params, garrs):
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        g = g.astype(p.data.dtype, copy=False)
        if hyper.kind == "sgd":
            v = state.buffers["velocity"][name]
            v *= hyper.momentum
            v += g
            p.data -= lr * v
        elif hyper.kind == "rmsprop":
            s = state.buffers["square_avg"][name]
            s *= hyper.rho
            s += (1 - hyper.rho) * g * g
            p.data -= lr * g / (np.sqrt(s) + hyper.epsilon)
        else:
            m = state.buffers["m"][name]
            v = state.buffers["v"][name]
            m *= hyper.beta1
            m += (1 - hyper.beta1) * g
            v *= hyper.beta2
            v += (1 - hyper.beta2) * g * g
            m_hat = m / (1 - hyper.beta1 ** t)
            v_hat = v / (1 - hyper.beta2 ** t)
            p.data -= lr * m_hat / (np.sqrt(v_hat) + hyper.epsilon)


class Optimizer:
    """Bundles parameters, hyperparameters and state for a training loop."""

    def __init__(self, params: Sequence[tuple[str, Tensor]], hyper: OptimizerHyper):
        self.params = list(params)
        self.hyper = hyper
        self.state = init_state(self.params, hyper)

    def step(self, grads) -> None:
        step(self.state, self.params, grads, self.hyper)
