"""Decoders that query a memory read-out, plus the two training losses.

Query retinas are cut into contiguous chunks ("pseudo-patches"), each chunk
linearly projected to the token width and tagged with a learned position
embedding.  Decoders never see positional information on the memory side,
so their output is invariant to the order of read-out tokens.
"""
from __future__ import annotations

import numpy as np

from kinaema.engine import tensor as T
from kinaema.engine.nn import (
    LayerNorm, Linear, MLP, Module, MultiHeadAttention, SelfAttentionBlock, normal_init,
)
from kinaema.engine.tensor import Tensor
from kinaema.errors import ConfigError, DimensionError, InputError
from kinaema.world import EpisodeRecord, Pose, relpose

POSE_OUTPUTS = 5  # distance, cos/sin bearing, cos/sin rotation


class QueryEncoder(Module):
    def __init__(self, retina_dim: int, chunks: int, dim: int, rng: np.random.Generator):
        if retina_dim % chunks:
            raise ConfigError(f"retina width {retina_dim} does not split into {chunks} chunks")
        self.chunks, self.chunk_size = chunks, retina_dim // chunks
        self.proj = Linear(self.chunk_size, dim, rng)
        self.pos_embed = normal_init(rng, (chunks, dim))
        self.mask_token = normal_init(rng, (dim,))

    def split(self, retina) -> np.ndarray | Tensor:
        shape = retina.shape[:-1] + (self.chunks, self.chunk_size)
        return retina.reshape(shape)

    def forward(self, retina: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """Tokens of shape (..., chunks, dim); masked chunks become the mask token."""
        tokens = self.proj(self.split(retina))
        if mask is not None:
            tokens = T.where(np.asarray(mask)[..., None], self.mask_token, tokens)
        return tokens + self.pos_embed


class CrossAttention(Module):
    """Pre-norm cross-attention from query tokens into memory tokens."""

    def __init__(self, dim: int, kv_dim: int, heads: int, rng: np.random.Generator):
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(kv_dim)
        self.attn = MultiHeadAttention(dim, heads, rng, kv_dim=kv_dim)

    def forward(self, q: Tensor, kv: Tensor) -> Tensor:
        return self.attn(self.norm_q(q), self.norm_kv(kv))


class AttentionOnly(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        self.norm = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)

    def forward(self, x: Tensor) -> Tensor:
        h = self.norm(x)
        return self.attn(h, h)


class FeedForward(Module):
    def __init__(self, dim: int, factor: int, rng: np.random.Generator):
        self.norm = LayerNorm(dim)
        self.mlp = MLP([dim, dim * factor, dim], rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.mlp(self.norm(x))


def _broadcast_memory(y: Tensor, query_tokens: Tensor) -> Tensor:
    """Give y (B, N', E) the query batch rank so attention broadcasts over queries."""
    extra = query_tokens.ndim - y.ndim
    if extra < 0:
        raise DimensionError(f"query tokens {query_tokens.shape} have lower rank than memory {y.shape}")
    return y.reshape(y.shape[:1] + (1,) * extra + y.shape[1:])


def _with_cls(cls_token: Tensor, tokens: Tensor) -> Tensor:
    lead = tokens.shape[:-2]
    cls = T.broadcast_to(cls_token.reshape((1,) * len(lead) + (1, -1)), lead + (1, tokens.shape[-1]))
    return T.concat([cls, tokens], -2)


class RPEDecoder(Module):
    """CA (no residual) -> prepend CLS -> self-attention blocks -> MLP head on CLS."""

    def __init__(self, dim: int, kv_dim: int, heads: int, blocks: int, rng: np.random.Generator,
                 head_hidden: int = 64, mlp_factor: int = 4):
        self.dim, self.kv_dim = dim, kv_dim
        self.cross = CrossAttention(dim, kv_dim, heads, rng)
        self.cls_token = normal_init(rng, (dim,))
        self.blocks = [SelfAttentionBlock(dim, heads, mlp_factor, rng) for _ in range(blocks)]
        self.norm = LayerNorm(dim)
        self.head = MLP([dim, head_hidden, POSE_OUTPUTS], rng)

    def forward(self, y: Tensor, query_tokens: Tensor) -> Tensor:
        _check_dims(y, query_tokens, self.dim, self.kv_dim)
        x = self.cross(query_tokens, _broadcast_memory(y, query_tokens))
        x = _with_cls(self.cls_token, x)
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x)[..., 0, :])

    def cross_attention_modules(self) -> list[MultiHeadAttention]:
        return [self.cross.attn]


class Chain(Module):
    def __init__(self, dim, kv_dim, heads, mlp_factor, rng, residual_ca: bool):
        self.residual_ca = residual_ca
        self.cross = CrossAttention(dim, kv_dim, heads, rng)
        self.ff1 = FeedForward(dim, mlp_factor, rng)
        self.self_attn = AttentionOnly(dim, heads, rng)
        self.ff2 = FeedForward(dim, mlp_factor, rng)

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        ca = self.cross(x, y)
        x = x + ca if self.residual_ca else ca
        x = x + self.ff1(x)
        x = x + self.self_attn(x)
        return x + self.ff2(x)


class ChainedRPEDecoder(Module):
    """CLS + query tokens through chains of CA-MLP-SA-MLP; the first CA has no residual."""

    def __init__(self, dim: int, kv_dim: int, heads: int, chains: int, rng: np.random.Generator,
                 head_hidden: int = 64, mlp_factor: int = 2):
        self.dim, self.kv_dim = dim, kv_dim
        self.cls_token = normal_init(rng, (dim,))
        self.chains = [Chain(dim, kv_dim, heads, mlp_factor, rng, residual_ca=i > 0) for i in range(chains)]
        self.norm = LayerNorm(dim)
        self.head = MLP([dim, head_hidden, POSE_OUTPUTS], rng)

    def forward(self, y: Tensor, query_tokens: Tensor) -> Tensor:
        _check_dims(y, query_tokens, self.dim, self.kv_dim)
        y = _broadcast_memory(y, query_tokens)
        x = _with_cls(self.cls_token, query_tokens)
        for chain in self.chains:
            x = chain(x, y)
        return self.head(self.norm(x)[..., 0, :])

    def cross_attention_modules(self) -> list[MultiHeadAttention]:
        return [c.cross.attn for c in self.chains]


class MIMDecoder(Module):
    """Reconstructs masked query chunks from the memory read-out.

    ``kind="single"``: CA (no residual) then self-attention blocks.
    ``kind="chained"``: chains of CA-MLP-SA-MLP as in the baseline decoder.
    A linear head maps each token back to its chunk values.
    """

    def __init__(self, kind: str, dim: int, kv_dim: int, heads: int, depth: int, chunk_size: int,
                 rng: np.random.Generator, mlp_factor: int = 4):
        self.kind, self.dim, self.kv_dim = kind, dim, kv_dim
        if kind == "single":
            self.cross = CrossAttention(dim, kv_dim, heads, rng)
            self.blocks = [SelfAttentionBlock(dim, heads, mlp_factor, rng) for _ in range(depth)]
        elif kind == "chained":
            self.chains = [Chain(dim, kv_dim, heads, mlp_factor, rng, residual_ca=i > 0) for i in range(depth)]
        else:
            raise ConfigError(f"unknown MIM decoder kind {kind!r}")
        self.norm = LayerNorm(dim)
        self.head = Linear(dim, chunk_size, rng)

    def forward(self, y: Tensor, masked_tokens: Tensor, mask: np.ndarray) -> Tensor:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != masked_tokens.shape[:-1]:
            raise DimensionError(f"mask {mask.shape} does not match tokens {masked_tokens.shape[:-1]}")
        if not mask.any(axis=-1).all():
            raise InputError("every query needs at least one masked chunk")
        _check_dims(y, masked_tokens, self.dim, self.kv_dim)
        y = _broadcast_memory(y, masked_tokens)
        if self.kind == "single":
            x = self.cross(masked_tokens, y)
            for block in self.blocks:
                x = block(x)
        else:
            x = masked_tokens
            for chain in self.chains:
                x = chain(x, y)
        return self.head(self.norm(x))


def _check_dims(y: Tensor, q: Tensor, dim: int, kv_dim: int) -> None:
    if q.shape[-1] != dim:
        raise ConfigError(f"query tokens have width {q.shape[-1]}, decoder expects {dim}")
    if y.shape[-1] != kv_dim:
        raise ConfigError(f"memory tokens have width {y.shape[-1]}, decoder expects {kv_dim}")


def rpe_decode(y: Tensor, query_tokens: Tensor, params: RPEDecoder) -> Tensor:
    return params(y, query_tokens)


def rpe_decode_chained(y: Tensor, query_tokens: Tensor, params: ChainedRPEDecoder) -> Tensor:
    return params(y, query_tokens)


def mim_decode(y: Tensor, masked_tokens: Tensor, mask: np.ndarray, params: MIMDecoder) -> Tensor:
    return params(y, masked_tokens, mask)


# -- losses -------------------------------------------------------------------

def loss_rpe(preds: Tensor, targets) -> Tensor:
    """Mean over queries of the L1 error summed over the five pose numbers."""
    targets = np.asarray(targets)
    if preds.shape != targets.shape:
        raise InputError(f"{preds.shape[:-1]} predictions vs {targets.shape[:-1]} targets")
    if preds.shape[-1] != POSE_OUTPUTS or preds.size == 0:
        raise InputError(f"pose predictions need {POSE_OUTPUTS} components and at least one query")
    per_query = T.absolute(preds - targets.astype(preds.dtype)).sum(axis=-1)
    return per_query.mean()


def loss_mim(recon: Tensor, target, mask) -> Tensor:
    """Mean squared error over the entries of masked chunks only."""
    target = np.asarray(target)
    mask = np.asarray(mask, dtype=bool)
    if recon.shape != target.shape or mask.shape != recon.shape[:-1]:
        raise InputError(f"recon {recon.shape}, target {target.shape} and mask {mask.shape} disagree")
    count = mask.sum() * recon.shape[-1]
    if count == 0:
        raise InputError("loss_mim needs at least one masked chunk")
    weights = mask[..., None].astype(recon.dtype)
    diff = recon - target.astype(recon.dtype)
    return (diff * diff * weights).sum() * (1.0 / count)


def sample_mim_mask(rng: np.random.Generator, shape: tuple[int, ...], chunks: int,
                    ratio: float = 0.5) -> np.ndarray:
    """Per query, mask ``round(ratio * chunks)`` chunks (at least one) chosen uniformly."""
    k = min(chunks, max(1, int(round(ratio * chunks))))
    scores = rng.random(shape + (chunks,))
    order = np.argsort(scores, axis=-1)
    mask = np.zeros(shape + (chunks,), dtype=bool)
    np.put_along_axis(mask, order[..., :k], True, axis=-1)
    return mask


# -- queries ------------------------------------------------------------------

def make_training_queries(episode: EpisodeRecord, length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Retinas and relative-pose targets for 2T queries against the final pose.

    The first T queries are the observed retinas, the last T the alternative
    ones; targets are ``relpose(pose_T, query_pose)`` as 5-vectors.
    """
    t = episode.length if length is None else length
    if t < 1 or t > episode.length:
        raise InputError(f"cannot build {t} queries from an episode of length {episode.length}")
    agent = Pose(*episode.poses[t])
    poses = np.concatenate([episode.poses[1:t + 1], episode.alt_poses[:t]])
    retinas = np.concatenate([episode.retinas[:t], episode.alt_retinas[:t]])
    targets = np.array([relpose(agent, Pose(*p)).as_vector() for p in poses])
    return retinas, targets
