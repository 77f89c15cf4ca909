"""Sequence memories sharing one contract: ``update(state, x, u)`` folds one
encoded observation into the state, ``read(state)`` turns the state into a
set of tokens for the decoders.

Families:

* ``kinaema`` -- N embeddings of width E, corrected by the observation,
  contextualized by a transformer and gated per embedding by a GRU stack whose
  weights are shared across embeddings.  Read-out is a reshape.
* ``gru`` -- stacked GRU layers over the concatenated inputs, read out by N'
  independent MLPs.
* ``ema`` -- ``m = sigmoid(lambda_raw) * m + U [x; u]`` with a trainable decay
  vector, read out by reshape.
* ``trunc_hist`` -- the last ``t_trunc`` encoded observations, left-padded by
  repeating the oldest kept one.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from kinaema.engine import tensor as T
from kinaema.engine.nn import (
    GRUCell, LayerNorm, Linear, MLP, Module, Parameter, SelfAttentionBlock, _uniform, normal_init,
)
from kinaema.engine.tensor import Tensor
from kinaema.errors import ConfigError, DimensionError

FAMILIES = ("kinaema", "gru", "ema", "trunc_hist")
ODOMETRY_DIM = 4
ODOMETRY_EMBED = 64


@dataclass
class ModelSpec:
    family: str = "kinaema"
    # memory shape and read-out shape (kinaema, ema)
    n_mem: int = 8
    mem_dim: int = 64
    n_read: int = 32
    read_dim: int = 16
    # observation encoders
    retina_dim: int = 128
    vis_dim: int = 64
    vis_hidden: int = 128
    # kinaema update
    update_layers: int = 2
    update_heads: int = 24
    mlp_factor: int = 4
    gating_layers: int = 2
    use_transformer: bool = True
    use_gating: bool = True
    learned_init: bool = True
    # baselines
    gru_hidden: int = 256
    gru_layers: int = 2
    gru_read_hidden: int = 32
    ema_size: int = 512
    t_trunc: int = 40
    # decoders
    decoder: str = "auto"
    query_chunks: int = 8
    decoder_heads: int = 2
    decoder_blocks: int = 4
    decoder_chains: int = 3
    chained_mlp_factor: int = 2
    head_hidden: int = 64
    use_mim: bool = True
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def full_scale(cls, **kw) -> "ModelSpec":
        """Full-scale memory and read-out shape (20 x 3072 memory, 160 x 384 tokens); used for shape tests."""
        base = dict(n_mem=20, mem_dim=3072, n_read=160, read_dim=384, update_layers=3,
                    update_heads=24, gating_layers=3)
        base.update(kw)
        return cls(**base)

    @property
    def heads(self) -> int:
        return max(1, min(self.update_heads, self.mem_dim // 16))

    @property
    def decoder_kind(self) -> str:
        if self.decoder != "auto":
            return self.decoder
        return "single" if self.family == "kinaema" else "chained"

    @property
    def token_dim(self) -> int:
        """Width of the tokens the read-out hands to the decoders."""
        if self.family == "trunc_hist":
            return self.vis_dim + ODOMETRY_EMBED
        return self.read_dim

    @property
    def memory_elements(self) -> int:
        return {
            "kinaema": self.n_mem * self.mem_dim,
            "gru": self.gru_layers * self.gru_hidden,
            "ema": self.ema_size,
            "trunc_hist": self.t_trunc * (self.vis_dim + ODOMETRY_EMBED),
        }[self.family]

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        if self.family == "kinaema":
            if self.n_mem * self.mem_dim != self.n_read * self.read_dim:
                raise ConfigError(
                    f"read-out reshape {self.n_mem}x{self.mem_dim} -> {self.n_read}x{self.read_dim}"
                    " changes the element count")
            if self.mem_dim % self.heads:
                raise ConfigError(f"memory width {self.mem_dim} not divisible by {self.heads} heads")
        if self.family == "ema" and self.ema_size != self.n_read * self.read_dim:
            raise ConfigError(f"ema_size {self.ema_size} != n_read*read_dim {self.n_read * self.read_dim}")
        if self.family == "trunc_hist" and self.t_trunc < 1:
            raise ConfigError("t_trunc must be >= 1")
        if self.retina_dim % self.query_chunks:
            raise ConfigError(f"retina_dim {self.retina_dim} not divisible into {self.query_chunks} chunks")
        if self.read_dim % self.decoder_heads:
            raise ConfigError(f"read_dim {self.read_dim} not divisible by {self.decoder_heads} decoder heads")
        if self.decoder_kind not in ("single", "chained"):
            raise ConfigError(f"unknown decoder {self.decoder!r}")


@dataclass
class MemoryState:
    value: Tensor | list[Tensor]
    step_count: int = 0

    @property
    def nbytes(self) -> int:
        if isinstance(self.value, list):
            return sum(v.data.nbytes for v in self.value)
        return self.value.data.nbytes


class ObservationEncoder(Module):
    """2-layer MLP for the retina, single linear layer (width 64) for odometry."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.retina_dim = spec.retina_dim
        self.visual = MLP([spec.retina_dim, spec.vis_hidden, spec.vis_dim], rng)
        self.odometry = Linear(ODOMETRY_DIM, ODOMETRY_EMBED, rng)

    def encode_obs(self, retina: Tensor) -> Tensor:
        if retina.shape[-1] != self.retina_dim:
            raise ConfigError(f"retina width {retina.shape[-1]} does not match encoder input {self.retina_dim}")
        return self.visual(retina)

    def encode_odo(self, odometry: Tensor) -> Tensor:
        if odometry.shape[-1] != ODOMETRY_DIM:
            raise ConfigError(f"odometry width {odometry.shape[-1]} != {ODOMETRY_DIM}")
        return self.odometry(odometry)


class KinaemaMemory(Module):
    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        n, e = spec.n_mem, spec.mem_dim
        self.spec = spec
        self.pos_embed = normal_init(rng, (n, e))
        self.init_memory = normal_init(rng, (n, e)) if spec.learned_init else None
        self.correction = Linear(e + spec.vis_dim + ODOMETRY_EMBED, e, rng)
        if spec.use_transformer:
            self.transformer = [SelfAttentionBlock(e, spec.heads, spec.mlp_factor, rng)
                                for _ in range(spec.update_layers)]
            self.transformer_norm = LayerNorm(e)
        else:
            self.transformer, self.transformer_norm = [], None
        self.gating = [GRUCell(e, e, rng) for _ in range(spec.gating_layers)] if spec.use_gating else []

    def init_state(self, batch: int) -> MemoryState:
        n, e = self.spec.n_mem, self.spec.mem_dim
        if self.init_memory is None:
            return MemoryState(Tensor(np.zeros((batch, n, e), dtype=T.default_dtype())))
        m0 = T.broadcast_to(self.init_memory.reshape(1, n, e), (batch, n, e))
        return MemoryState(m0)

    def correct(self, m: Tensor, x: Tensor, u: Tensor) -> Tensor:
        b, n, _ = m.shape
        ctx = T.concat([x, u], -1)
        ctx = T.broadcast_to(ctx.reshape(b, 1, ctx.shape[-1]), (b, n, ctx.shape[-1]))
        return self.correction(T.concat([m + self.pos_embed, ctx], -1))

    def contextualize(self, m_corr: Tensor) -> Tensor:
        h = m_corr
        for block in self.transformer:
            h = block(h)
        return self.transformer_norm(h) if self.transformer_norm is not None else h

    def gate(self, m: Tensor, candidate: Tensor) -> Tensor:
        # every layer sees the previous memory as its hidden state; the
        # candidate is refined through the stack
        out = candidate
        for cell in self.gating:
            out = cell(m, out)
        return out

    def update(self, state: MemoryState, x: Tensor, u: Tensor) -> MemoryState:
        m = state.value
        if m.ndim != 3 or m.shape[1:] != (self.spec.n_mem, self.spec.mem_dim):
            raise DimensionError(f"kinaema memory has shape {m.shape}")
        candidate = self.contextualize(self.correct(m, x, u))
        new = self.gate(m, candidate) if self.gating else candidate
        assert new.shape == m.shape, "memory shape drifted"
        return MemoryState(new, state.step_count + 1)

    def read(self, state: MemoryState) -> Tensor:
        b = state.value.shape[0]
        return state.value.reshape(b, self.spec.n_read, self.spec.read_dim)


class ParallelMLP(Module):
    """N' independent one-hidden-layer MLPs applied to the same input vector."""

    def __init__(self, count: int, d_in: int, hidden: int, d_out: int, rng: np.random.Generator):
        self.w1 = Parameter(_uniform(rng, (count, d_in, hidden), d_in))
        self.b1 = Parameter(_uniform(rng, (count, 1, hidden), d_in))
        self.w2 = Parameter(_uniform(rng, (count, hidden, d_out), hidden))
        self.b2 = Parameter(_uniform(rng, (count, 1, d_out), hidden))
        self.count, self.d_out = count, d_out

    def forward(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        h = T.gelu(T.matmul(x.reshape(b, 1, 1, x.shape[-1]), self.w1) + self.b1)
        out = T.matmul(h, self.w2) + self.b2
        return out.reshape(b, self.count, self.d_out)


class GRUMemory(Module):
    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        d_in = spec.vis_dim + ODOMETRY_EMBED
        self.cells = [GRUCell(d_in if i == 0 else spec.gru_hidden, spec.gru_hidden, rng)
                      for i in range(spec.gru_layers)]
        self.readout = ParallelMLP(spec.n_read, spec.gru_layers * spec.gru_hidden,
                                   spec.gru_read_hidden, spec.read_dim, rng)

    def init_state(self, batch: int) -> MemoryState:
        shape = (batch, self.spec.gru_layers, self.spec.gru_hidden)
        return MemoryState(Tensor(np.zeros(shape, dtype=T.default_dtype())))

    def update(self, state: MemoryState, x: Tensor, u: Tensor) -> MemoryState:
        h = state.value
        inp = T.concat([x, u], -1)
        layers = []
        for i, cell in enumerate(self.cells):
            inp = cell(h[:, i], inp)
            layers.append(inp)
        return MemoryState(T.stack(layers, axis=1), state.step_count + 1)

    def read(self, state: MemoryState) -> Tensor:
        h = state.value
        return self.readout(h.reshape(h.shape[0], -1))


class EMAMemory(Module):
    def __init__(self, spec: ModelSpec, rng: np.random.Generator):
        self.spec = spec
        self.proj = Linear(spec.vis_dim + ODOMETRY_EMBED, spec.ema_size, rng)
        # spread of time constants, decay in roughly (0.5, 0.998)
        self.decay_logit = Parameter(rng.uniform(0.0, 6.0, spec.ema_size))

    @property
    def decay(self) -> Tensor:
        return T.sigmoid(self.decay_logit)

    def init_state(self, batch: int) -> MemoryState:
        return MemoryState(Tensor(np.zeros((batch, self.spec.ema_size), dtype=T.default_dtype())))

    def update(self, state: MemoryState, x: Tensor, u: Tensor) -> MemoryState:
        drive = self.proj(T.concat([x, u], -1))
        return MemoryState(self.decay * state.value + drive, state.step_count + 1)

    def read(self, state: MemoryState) -> Tensor:
        return state.value.reshape(state.value.shape[0], self.spec.n_read, self.spec.read_dim)


class TruncatedHistory(Module):
    """No parameters: keeps the last ``t_trunc`` encoded observations."""

    def __init__(self, spec: ModelSpec, rng: np.random.Generator | None = None):
        self.spec = spec

    def init_state(self, batch: int) -> MemoryState:
        return MemoryState([])

    def update(self, state: MemoryState, x: Tensor, u: Tensor) -> MemoryState:
        buf = state.value + [T.concat([x, u], -1)]
        return MemoryState(buf[-self.spec.t_trunc:], state.step_count + 1)

    def read(self, state: MemoryState) -> Tensor:
        buf = state.value
        if not buf:
            raise DimensionError("truncated history is empty; update at least once before reading")
        pad = [buf[0]] * (self.spec.t_trunc - len(buf))
        return T.stack(pad + buf, axis=1)


MEMORY_CLASSES = {
    "kinaema": KinaemaMemory,
    "gru": GRUMemory,
    "ema": EMAMemory,
    "trunc_hist": TruncatedHistory,
}


def build_memory(spec: ModelSpec, rng: np.random.Generator) -> Module:
    spec.validate()
    return MEMORY_CLASSES[spec.family](spec, rng)


def detach_state(state: MemoryState) -> MemoryState:
    if isinstance(state.value, list):
        return MemoryState([v.detach() for v in state.value], state.step_count)
    return MemoryState(state.value.detach(), state.step_count)


def clamp_update_gates(module: Module, bias: float = -40.0) -> None:
    """Drive every GRU update gate in ``module`` to 0 (keep) or 1 (replace)."""
    for name, p in module.named_parameters():
        if name.endswith("b_z"):
            p.data[...] = bias
