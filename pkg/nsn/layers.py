"""
NSN layers, dense layers and models.

An NSN layer stores factors A (R x d_in) and B (d_out x R) and evaluates at any
rank r in 1..R using the first r rows of A and the first r columns of B:
W_r = B_r A_r, computed as B_r (A_r x) without materializing W_r.
"""
import copy
import enum
from dataclasses import dataclass, field
from typing import List, Sequence, Union

import numpy as np
from scipy.special import ndtr

from .exceptions import DimensionError, RankError
from .linalg import Matrix, RandomStream, matmul


class Full(enum.Enum):
    """Symbolic rank resolving to each layer's own maximum rank."""

    FULL = 'full'

    def __repr__(self):
        return 'FULL'


FULL = Full.FULL

RankSpec = Union[int, Full]


def parse_rank(value) -> RankSpec:
    """Read a RankSpec from config: a positive integer or the string ``"full"``."""
    if isinstance(value, Full):
        return value
    if isinstance(value, str):
        if value.strip().lower() == 'full':
            return FULL
        value = int(value)
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise RankError(value, None, f'rank must be a positive integer or "full", got {value!r}')
    return int(value)


class Activation(str, enum.Enum):
    RELU = 'relu'
    GELU = 'gelu'
    IDENTITY = 'identity'

    def apply(self, y: Matrix) -> Matrix:
        if self is Activation.RELU:
            return np.maximum(y, 0.0)
        if self is Activation.GELU:
            return y * ndtr(y)
        return y

    def derivative(self, y: Matrix) -> Matrix:
        if self is Activation.RELU:
            return (y > 0).astype(np.float64)
        if self is Activation.GELU:
            return ndtr(y) + y * np.exp(-0.5 * y * y) / np.sqrt(2.0 * np.pi)
        return np.ones_like(y)


@dataclass
class NsnLayer:
    a: Matrix
    b: Matrix
    bias: np.ndarray

    kind = 'nsn'

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2 or self.a.shape[0] != self.b.shape[1]:
            raise DimensionError(
                f'factor shapes do not chain: A {self.a.shape}, B {self.b.shape}'
            )
        if self.a.shape[0] < 1:
            raise RankError(0, 0, 'an NSN layer needs max rank >= 1')
        if self.bias.shape != (self.b.shape[0],):
            raise DimensionError(f'bias shape {self.bias.shape} does not match d_out {self.b.shape[0]}')

    @property
    def max_rank(self) -> int:
        return self.a.shape[0]

    @property
    def d_in(self) -> int:
        return self.a.shape[1]

    @property
    def d_out(self) -> int:
        return self.b.shape[0]

    def resolve(self, r: RankSpec, clamp: bool = False) -> int:
        """Concrete rank for this layer; ``clamp`` caps a global r at R."""
        if r is FULL:
            return self.max_rank
        if r < 1 or (r > self.max_rank and not clamp):
            raise RankError(r, self.max_rank)
        return min(r, self.max_rank)

    def params(self) -> dict:
        return {'a': self.a, 'b': self.b, 'bias': self.bias}

    def __eq__(self, other):
        return (
            isinstance(other, NsnLayer)
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.b, other.b)
            and np.array_equal(self.bias, other.bias)
        )


@dataclass
class DenseLayer:
    w: Matrix
    bias: np.ndarray

    kind = 'dense'

    def __post_init__(self):
        if self.w.ndim != 2 or self.bias.shape != (self.w.shape[0],):
            raise DimensionError(f'dense shapes inconsistent: W {self.w.shape}, bias {self.bias.shape}')

    @property
    def d_in(self) -> int:
        return self.w.shape[1]

    @property
    def d_out(self) -> int:
        return self.w.shape[0]

    def params(self) -> dict:
        return {'w': self.w, 'bias': self.bias}

    def __eq__(self, other):
        return (
            isinstance(other, DenseLayer)
            and np.array_equal(self.w, other.w)
            and np.array_equal(self.bias, other.bias)
        )


Layer = Union[NsnLayer, DenseLayer]


@dataclass
class Block:
    layer: Layer
    activation: Activation = Activation.IDENTITY


@dataclass
class Model:
    """Ordered stack of layers; the last block emits logits."""

    blocks: List[Block] = field(default_factory=list)

    def __post_init__(self):
        if not self.blocks:
            raise DimensionError('a model needs at least one layer')
        for i, (prev, nxt) in enumerate(zip(self.blocks, self.blocks[1:])):
            if prev.layer.d_out != nxt.layer.d_in:
                raise DimensionError(
                    f'layer {i} outputs {prev.layer.d_out} features but layer {i + 1} expects {nxt.layer.d_in}'
                )
        if self.blocks[-1].activation is not Activation.IDENTITY:
            raise DimensionError('the last layer must use the identity activation (logits)')

    @property
    def layers(self) -> List[Layer]:
        return [block.layer for block in self.blocks]

    @property
    def input_dim(self) -> int:
        return self.blocks[0].layer.d_in

    @property
    def output_dim(self) -> int:
        return self.blocks[-1].layer.d_out

    def nsn_indices(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if isinstance(layer, NsnLayer)]

    @property
    def max_rank(self) -> int:
        """Largest R among NSN layers (0 for an all-dense model)."""
        return max((self.layers[i].max_rank for i in self.nsn_indices()), default=0)

    def copy(self) -> 'Model':
        return copy.deepcopy(self)

    def __eq__(self, other):
        return (
            isinstance(other, Model)
            and len(self.blocks) == len(other.blocks)
            and all(
                a.layer == b.layer and a.activation is b.activation
                for a, b in zip(self.blocks, other.blocks)
            )
        )


def effective_weight(layer: NsnLayer, r: RankSpec) -> Matrix:
    """W_r = B_r A_r, the sum of the first r rank-1 outer products."""
    r = layer.resolve(r)
    return matmul(layer.b[:, :r], layer.a[:r])


def layer_forward(layer: Layer, x: Matrix, r: RankSpec):
    """Affine map of one layer; returns (output, rank-r code or None)."""
    if x.ndim != 2 or x.shape[1] != layer.d_in:
        raise DimensionError(f'input shape {x.shape} does not match layer d_in {layer.d_in}')
    if isinstance(layer, DenseLayer):
        return x @ layer.w.T + layer.bias, None
    r = layer.resolve(r, clamp=True)
    code = x @ layer.a[:r].T
    return code @ layer.b[:, :r].T + layer.bias, code


def forward(model: Model, x: Matrix, r: RankSpec = FULL) -> Matrix:
    """Logits for a batch; every NSN layer runs at r clamped to its own R."""
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise DimensionError(f'input shape {x.shape} does not match model input dim {model.input_dim}')
    h = x
    for block in model.blocks:
        y, _ = layer_forward(block.layer, h, r)
        h = block.activation.apply(y)
    return h


def flops_linear(d_in: int, d_out: int, r: RankSpec) -> int:
    """2r(d_in + d_out) for the factored form, 2 d_in d_out for the dense one."""
    if d_in < 1 or d_out < 1:
        raise DimensionError(f'dimensions must be positive, got {d_in} x {d_out}')
    if r is FULL:
        return 2 * d_in * d_out
    return 2 * int(r) * (d_in + d_out)


def break_even_rank(d_in: int, d_out: int) -> int:
    if d_in < 1 or d_out < 1:
        raise DimensionError(f'dimensions must be positive, got {d_in} x {d_out}')
    return (d_in * d_out) // (d_in + d_out)


def layer_flops(layer: Layer, r: RankSpec) -> int:
    if isinstance(layer, DenseLayer):
        return flops_linear(layer.d_in, layer.d_out, FULL)
    return flops_linear(layer.d_in, layer.d_out, layer.resolve(r, clamp=True))


def model_flops(model: Model, r: RankSpec = FULL) -> int:
    """Linear-layer FLOPs per example; activations and biases are not counted."""
    return sum(layer_flops(layer, r) for layer in model.layers)


def truncate(layer: NsnLayer, r: int) -> NsnLayer:
    r = layer.resolve(r)
    return NsnLayer(
        a=layer.a[:r].copy(),
        b=layer.b[:, :r].copy(),
        bias=layer.bias.copy(),
    )


def truncate_model(model: Model, r: int) -> Model:
    """Every NSN layer truncated to min(r, R); dense layers copied."""
    blocks = []
    for block in model.blocks:
        layer = block.layer
        if isinstance(layer, NsnLayer):
            layer = truncate(layer, layer.resolve(r, clamp=True))
        else:
            layer = copy.deepcopy(layer)
        blocks.append(Block(layer, block.activation))
    return Model(blocks)


def init_nsn_layer(rng: RandomStream, d_in: int, d_out: int, max_rank: int) -> NsnLayer:
    if max_rank < 1:
        raise RankError(max_rank, None, f'max rank must be >= 1, got {max_rank}')
    return NsnLayer(
        a=rng.standard_normal((max_rank, d_in)) / np.sqrt(d_in),
        b=rng.standard_normal((d_out, max_rank)) / np.sqrt(max_rank),
        bias=np.zeros(d_out),
    )


def init_dense_layer(rng: RandomStream, d_in: int, d_out: int) -> DenseLayer:
    return DenseLayer(w=rng.standard_normal((d_out, d_in)) / np.sqrt(d_in), bias=np.zeros(d_out))


def build_mlp(
    rng: RandomStream,
    dims: Sequence[int],
    kind: str = 'nsn',
    max_rank: int = 32,
    activation: Activation = Activation.RELU,
) -> Model:
    """MLP over ``dims`` (input, hidden..., classes) with NSN or dense layers."""
    if len(dims) < 2:
        raise DimensionError(f'an MLP needs at least input and output dims, got {list(dims)}')
    activation = Activation(activation)
    blocks = []
    for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
        if kind == 'nsn':
            layer = init_nsn_layer(rng, d_in, d_out, max_rank)
        elif kind == 'dense':
            layer = init_dense_layer(rng, d_in, d_out)
        else:
            raise ValueError(f'unknown layer kind {kind!r}')
        last = i == len(dims) - 2
        blocks.append(Block(layer, Activation.IDENTITY if last else activation))
    return Model(blocks)
