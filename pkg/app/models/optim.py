from dataclasses import dataclass
from typing import Optional

import numpy as np

from app.core.errors import ContractError, DimensionError
from app.models.network import Network, ParamVector, to_vector


@dataclass(eq=False)
class SgdState:
    """SGD with momentum and coupled L2 weight decay."""

    learning_rate: float
    momentum: float
    weight_decay: float
    velocity: ParamVector

    def __post_init__(self):
        for name in ("learning_rate", "momentum", "weight_decay"):
            if not np.isfinite(getattr(self, name)):
                raise ContractError(f"SGD {name} must be finite")
        if self.learning_rate < 0:
            raise ContractError("SGD learning_rate must be non-negative")

    @classmethod
    def for_network(cls, net: Network, learning_rate: float, momentum: float = 0.0, weight_decay: float = 0.0) -> "SgdState":
        return cls(learning_rate, momentum, weight_decay, ParamVector.zeros_like(to_vector(net)))


def gradient_vector(net: Network) -> ParamVector:
    grads = []
    for p in net.parameters():
        if p.grad is None:
            raise ContractError("sgd_step called before backward populated every parameter gradient")
        grads.append(p.grad.reshape(-1))
    return ParamVector(np.concatenate(grads), net.arch)


def sgd_step(net: Network, state: SgdState, correction: Optional[ParamVector] = None) -> None:
    """One in-place update of every parameter.

    g' = g + correction + weight_decay * p; v = momentum * v + g'; p = p - lr * v.
    `correction` is SCAFFOLD's (c - c_i) term.
    """
    g = gradient_vector(net).values
    if correction is not None:
        if len(correction) != g.shape[0]:
            raise DimensionError("sgd_step correction", (len(correction),), g.shape)
        g = g + correction.values
    p = to_vector(net).values
    if len(state.velocity) != p.shape[0]:
        raise DimensionError("sgd_step velocity", (len(state.velocity),), p.shape)
    if state.weight_decay != 0.0:
        g = g + state.weight_decay * p
    v = state.momentum * state.velocity.values + g
    state.velocity = ParamVector(v, net.arch)
    updated = p - state.learning_rate * v

    offset = 0
    for param in net.parameters():
        n = param.values.size
        param.values = updated[offset:offset + n].reshape(param.shape)
        offset += n
