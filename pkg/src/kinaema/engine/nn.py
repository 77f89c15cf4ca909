"""Layer library on top of :mod:`kinaema.engine.tensor`.

Weight layout is (in, out) everywhere.  Linear weights and biases start at
uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)); learned embeddings and tokens at
normal(0, 0.02).
"""
from __future__ import annotations

import math
from collections.abc import Iterator

import numpy as np

from kinaema.engine import tensor as T
from kinaema.engine.tensor import Tensor
from kinaema.errors import ConfigError, DimensionError


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data):
        super().__init__(np.array(data, dtype=np.float32), requires_grad=True)


class Module:
    """Container with named-parameter discovery over attributes.

    Attribute order is registration order; lists of modules are expanded
    with their index as a path component.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (used for 64-bit gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def normal_init(rng: np.random.Generator, shape, std: float = 0.02) -> Parameter:
    return Parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(_uniform(rng, (d_in, d_out), d_in))
        self.bias = Parameter(_uniform(rng, (d_out,), d_in)) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias, self.eps)


class MLP(Module):
    """Linear -> GELU -> ... -> Linear."""

    def __init__(self, sizes: list[int], rng: np.random.Generator):
        if len(sizes) < 2:
            raise ConfigError("MLP needs at least input and output sizes")
        self.layers = [Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.gelu(x)
        return x


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., L, d) -> (..., heads, L, d/heads)"""
    *lead, length, d = x.shape
    x = x.reshape(*lead, length, heads, d // heads)
    return x.swapaxes(-2, -3)


def merge_heads(x: Tensor) -> Tensor:
    *lead, heads, length, dh = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, length, heads * dh)


def scaled_dot_product(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = T.matmul(q, k.swapaxes(-1, -2)) * scale
    probs = T.softmax(scores, axis=-1)
    return T.matmul(probs, v), probs


class MultiHeadAttention(Module):
    """Multi-head attention with separate key/value input width.

    Queries have width ``dim``; keys and values may come from tokens of
    width ``kv_dim`` (defaults to ``dim``).  Output width is ``dim``.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, kv_dim: int | None = None):
        if heads < 1 or dim % heads:
            raise ConfigError(f"attention width {dim} is not divisible by {heads} heads")
        kv_dim = dim if kv_dim is None else kv_dim
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng)
        self.k_proj = Linear(kv_dim, dim, rng)
        self.v_proj = Linear(kv_dim, dim, rng)
        self.out_proj = Linear(dim, dim, rng)
        self.last_probs: np.ndarray | None = None
        self.keep_probs = False

    def forward(self, q: Tensor, kv: Tensor) -> Tensor:
        qh = split_heads(self.q_proj(q), self.heads)
        kh = split_heads(self.k_proj(kv), self.heads)
        vh = split_heads(self.v_proj(kv), self.heads)
        out, probs = scaled_dot_product(qh, kh, vh)
        if self.keep_probs:
            self.last_probs = probs.data
        return self.out_proj(merge_heads(out))


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, params: MultiHeadAttention) -> Tensor:
    """Functional form: multi-head attention with the projections in ``params``."""
    d = q.shape[-1]
    if d % heads:
        raise ConfigError(f"attention width {d} is not divisible by {heads} heads")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"keys {k.shape} and values {v.shape} differ in length")
    qh = split_heads(params.q_proj(q), heads)
    kh = split_heads(params.k_proj(k), heads)
    vh = split_heads(params.v_proj(v), heads)
    out, _ = scaled_dot_product(qh, kh, vh)
    return params.out_proj(merge_heads(out))


class SelfAttentionBlock(Module):
    """Pre-norm transformer block: x + SA(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_factor: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP([dim, dim * mlp_factor, dim], rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h)
        return x + self.mlp(self.norm2(x))


class GRUCell(Module):
    """Gated recurrent unit with the keep-memory-at-zero convention.

    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    c = tanh(x W_c + b_c + r * (h U_c + b_hc))
    h' = (1 - z) * h + z * c

    so an update gate of 0 returns ``h`` untouched.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        fan = hidden_size
        self.w_z = Parameter(_uniform(rng, (input_size, hidden_size), fan))
        self.u_z = Parameter(_uniform(rng, (hidden_size, hidden_size), fan))
        self.b_z = Parameter(_uniform(rng, (hidden_size,), fan))
        self.w_r = Parameter(_uniform(rng, (input_size, hidden_size), fan))
        self.u_r = Parameter(_uniform(rng, (hidden_size, hidden_size), fan))
        self.b_r = Parameter(_uniform(rng, (hidden_size,), fan))
        self.w_c = Parameter(_uniform(rng, (input_size, hidden_size), fan))
        self.u_c = Parameter(_uniform(rng, (hidden_size, hidden_size), fan))
        self.b_c = Parameter(_uniform(rng, (hidden_size,), fan))
        self.b_hc = Parameter(_uniform(rng, (hidden_size,), fan))
        self.input_size, self.hidden_size = input_size, hidden_size

    def forward(self, h: Tensor, x: Tensor) -> Tensor:
        if h.shape[-1] != self.hidden_size or x.shape[-1] != self.input_size:
            raise DimensionError(
                f"gru_cell expects state (..., {self.hidden_size}) and input (..., {self.input_size}),"
                f" got {h.shape} and {x.shape}")
        z = T.sigmoid(T.linear(x, self.w_z, self.b_z) + T.linear(h, self.u_z))
        r = T.sigmoid(T.linear(x, self.w_r, self.b_r) + T.linear(h, self.u_r))
        c = T.tanh(T.linear(x, self.w_c, self.b_c) + r * T.linear(h, self.u_c, self.b_hc))
        return h + z * (c - h)


def gru_cell(h: Tensor, x: Tensor, params: GRUCell) -> Tensor:
    return params(h, x)
