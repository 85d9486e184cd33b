import logging

import numpy as np

from .tensor import (
    DEFAULT_DTYPE,
    ShapeError,
    Tensor,
    add,
    dropout,
    layer_norm,
    matmul,
    relu,
    scaled_dot_product_attention,
)

logger = logging.getLogger(__name__)

INIT_STD = 0.02


class Parameter(Tensor):

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """
    Container of parameters and sub-modules.

    Attributes are walked in assignment order, so parameter names and their
    order are a pure function of how the module was built. A parameter reached
    twice (shared storage) is reported once, under its first name.
    """

    training = True

    def _children(self):
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for index, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{index}", item

    def named_parameters(self, prefix="", _seen=None):
        seen = set() if _seen is None else _seen
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                if id(value) in seen:
                    continue
                seen.add(id(value))
                yield full, value
            else:
                yield from value.named_parameters(prefix=f"{full}.", _seen=seen)

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode=True):
        for module in self.modules():
            module.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = [name for name in own if name not in state]
        unexpected = [name for name in state if name not in own]
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:3]} unexpected={unexpected[:3]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"parameter {name}: expected shape {p.shape}, got {value.shape}")
            p.data[...] = value.astype(p.dtype)

    def count_parameters(self):
        return sum(p.size for p in self.parameters())


def normal_init(rng, shape, dtype, std=INIT_STD):
    return Parameter(rng.normal(0.0, std, size=shape), dtype=dtype)


class Linear(Module):

    def __init__(self, d_in, d_out, rng, dtype=DEFAULT_DTYPE):
        self.weight = normal_init(rng, (d_in, d_out), dtype)
        self.bias = Parameter(np.zeros(d_out), dtype=dtype)

    def __call__(self, x):
        return add(matmul(x, self.weight), self.bias)


class LayerNorm(Module):

    def __init__(self, d, dtype=DEFAULT_DTYPE):
        self.gain = Parameter(np.ones(d), dtype=dtype)
        self.bias = Parameter(np.zeros(d), dtype=dtype)

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias)


class Dropout(Module):
    # rng is shared by every dropout site of a model so its state can be checkpointed
    def __init__(self, p, rng):
        self.p = p
        self.rng = rng

    def __call__(self, x):
        return dropout(x, self.p, self.rng, self.training)


class FeedForward(Module):

    def __init__(self, d, d_ff, rng, dtype=DEFAULT_DTYPE):
        self.up = Linear(d, d_ff, rng, dtype)
        self.down = Linear(d_ff, d, rng, dtype)

    def __call__(self, x):
        return self.down(relu(self.up(x)))


class MultiHeadAttention(Module):

    def __init__(self, d, n_heads, rng, dtype=DEFAULT_DTYPE):
        if d % n_heads:
            raise ShapeError(f"width {d} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.query = Linear(d, d, rng, dtype)
        self.key = Linear(d, d, rng, dtype)
        self.value = Linear(d, d, rng, dtype)
        self.output = Linear(d, d, rng, dtype)

    def __call__(self, x, context, allowed):
        attended = scaled_dot_product_attention(
            self.query(x), self.key(context), self.value(context), allowed, self.n_heads
        )
        return self.output(attended)
