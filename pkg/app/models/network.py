"""
Dense network with a base encoder, a projection head and an output layer.

`forward_repr` returns the representation R_w(x) (projection head output, or
the encoder output when the head is disabled); `forward_full` returns the
logits F_w(x) = output_layer(R_w(x)).
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from app.core import tensor as T
from app.core.errors import DimensionError
from app.core.seeding import make_rng
from app.core.tensor import Tensor
from app.schemas.config import Activation, NetworkArch


@dataclass
class DenseLayer:
    W: Tensor
    b: Tensor
    activation: Activation = "none"

    def __post_init__(self):
        if self.W.values.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DimensionError("DenseLayer", self.W.shape, self.b.shape)

    def __call__(self, x: Tensor) -> Tensor:
        if x.values.ndim != 2 or x.shape[1] != self.W.shape[1]:
            raise DimensionError("dense layer input", x.shape, self.W.shape)
        ones = Tensor(np.ones((x.shape[0], 1)))
        affine = x @ T.transpose(self.W) + ones @ T.reshape(self.b, (1, self.b.shape[0]))
        return T.relu(affine) if self.activation == "relu" else affine

    def parameters(self) -> List[Tensor]:
        return [self.W, self.b]


@dataclass
class Network:
    arch: NetworkArch
    encoder: List[DenseLayer]
    projection: List[DenseLayer]
    output_layer: DenseLayer

    @property
    def projection_dim(self) -> int:
        return self.arch.projection_dim

    @property
    def layers(self) -> List[DenseLayer]:
        return [*self.encoder, *self.projection, self.output_layer]

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def parameter_tensor(self) -> Tensor:
        """All parameters as one differentiable flat tensor in canonical order."""
        return T.concat([T.reshape(p, (-1,)) for p in self.parameters()])

    def representation(self, x: Tensor) -> Tensor:
        h = x
        for layer in self.encoder:
            h = layer(h)
        for layer in self.projection:
            h = layer(h)
        return h

    def __call__(self, x: Tensor) -> Tensor:
        return self.output_layer(self.representation(x))


@dataclass(eq=False)
class ParamVector:
    """Flattened model weights in the canonical layer order of `arch`."""

    values: np.ndarray
    arch: Optional[NetworkArch] = field(default=None)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)

    @classmethod
    def zeros_like(cls, other: "ParamVector") -> "ParamVector":
        return cls(np.zeros_like(other.values), other.arch)

    def __len__(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.arch)

    def _check(self, other: "ParamVector", op: str) -> None:
        if len(self) != len(other):
            raise DimensionError(op, (len(self),), (len(other),))

    def __add__(self, other: "ParamVector") -> "ParamVector":
        self._check(other, "add")
        return ParamVector(self.values + other.values, self.arch)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        self._check(other, "sub")
        return ParamVector(self.values - other.values, self.arch)

    def scaled(self, alpha: float) -> "ParamVector":
        return ParamVector(alpha * self.values, self.arch)

    def identical_to(self, other: "ParamVector") -> bool:
        return len(self) == len(other) and bool(np.array_equal(self.values, other.values))


def forward_full(net: Network, x: Tensor) -> Tensor:
    return net(x)


def forward_repr(net: Network, x: Tensor) -> Tensor:
    return net.representation(x)


def to_vector(net: Network) -> ParamVector:
    return ParamVector(np.concatenate([p.values.reshape(-1) for p in net.parameters()]), net.arch)


def from_vector(arch: NetworkArch, v: ParamVector, trainable: bool = True) -> Network:
    """Build an independent network whose parameters are copied from `v`."""
    expected = arch.parameter_count()
    if len(v) != expected:
        raise DimensionError("from_vector", (len(v),), (expected,))
    offset = 0
    built = {"encoder": [], "projection": [], "output": []}
    for stage, out, fan_in, activation in arch.layer_specs():
        w_end = offset + out * fan_in
        W = Tensor(v.values[offset:w_end].reshape(out, fan_in), requires_grad=trainable)
        b = Tensor(v.values[w_end:w_end + out], requires_grad=trainable)
        offset = w_end + out
        built[stage].append(DenseLayer(W, b, activation))
    return Network(arch=arch, encoder=built["encoder"], projection=built["projection"], output_layer=built["output"][0])


def init(arch: NetworkArch, seed: int) -> Network:
    """He-initialised network: W ~ N(0, 2/fan_in), b = 0."""
    rng = make_rng(seed)
    chunks = []
    for _, out, fan_in, _ in arch.layer_specs():
        chunks.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=out * fan_in))
        chunks.append(np.zeros(out))
    return from_vector(arch, ParamVector(np.concatenate(chunks), arch))


def axpy(alpha: float, a: ParamVector, b: Optional[ParamVector] = None) -> ParamVector:
    """alpha * a + b (b defaults to the zero vector)."""
    if b is None:
        return ParamVector(alpha * a.values, a.arch)
    a._check(b, "axpy")
    return ParamVector(alpha * a.values + b.values, a.arch or b.arch)


def l2_distance(a: ParamVector, b: ParamVector) -> float:
    a._check(b, "l2_distance")
    return float(np.linalg.norm(a.values - b.values))


def l2_norm_sq(a: ParamVector) -> float:
    return float(np.dot(a.values, a.values))
