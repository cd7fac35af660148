"""Multi-head attention, pooling attention and the pooling-attention block (PAB).

Token matrices are (n, C); spatial maps are (h, w, C). Multiply-adds are
tagged so that callers can separate the cost-model terms:

* ``"mha"``  - query and key projections plus the two attention products,
  exactly the terms of :func:`flops_mha`;
* ``"pool"`` - the key/value pooling pass;
* ``"proj"`` - value and output projections;
* ``"mlp"``  - the feed-forward layers of a PAB.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import LinearParams, NormParams, xavier, zeros
from .tensor import Tensor, op_tag

SCALE_MODES = ("per_head", "full_dim")
POOL_TYPES = ("avg", "max")


@dataclass
class MhaParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int

    @property
    def channels(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.channels // self.heads

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, heads: int) -> "MhaParams":
        if channels % heads:
            raise ShapeError(f"channels {channels} not divisible by heads {heads}")
        mats = [xavier(rng, (channels, channels), channels, channels) for _ in range(4)]
        return cls(*mats, heads=heads)


@dataclass
class PosEncoding:
    """Additive learned position table, zero at init."""

    table: Tensor

    @classmethod
    def zeros(cls, tokens: int, channels: int) -> "PosEncoding":
        return cls(zeros((tokens, channels)))


@dataclass
class MlpParams:
    fc1: LinearParams
    fc2: LinearParams

    @property
    def hidden(self) -> int:
        return self.fc1.w.shape[1]

    @classmethod
    def init(cls, rng, channels: int, hidden: int) -> "MlpParams":
        return cls(LinearParams.init(rng, channels, hidden), LinearParams.init(rng, hidden, channels))


@dataclass
class PabParams:
    attn: MhaParams
    mlp: MlpParams
    norm1: NormParams
    norm2: NormParams
    ratio: int = 1
    pool: str = "avg"

    @classmethod
    def init(cls, rng, channels: int, heads: int, ratio: int, mlp_ratio: float = 2.0, pool: str = "avg") -> "PabParams":
        if ratio < 1:
            raise ValueError(f"pooling ratio must be >= 1, got {ratio}")
        if pool not in POOL_TYPES:
            raise ValueError(f"pool must be one of {POOL_TYPES}")
        return cls(
            MhaParams.init(rng, channels, heads),
            MlpParams.init(rng, channels, int(round(mlp_ratio * channels))),
            NormParams.init(channels),
            NormParams.init(channels),
            ratio=ratio,
            pool=pool,
        )


def attention_scale(channels: int, heads: int, mode: str = "per_head") -> float:
    if mode == "per_head":
        return 1.0 / math.sqrt(channels // heads)
    if mode == "full_dim":
        return 1.0 / math.sqrt(channels)
    raise ValueError(f"attn_scale must be one of {SCALE_MODES}, got {mode!r}")


def _with_pos(x: Tensor, pos: PosEncoding | None) -> Tensor:
    if pos is None:
        return x
    if pos.table.shape != x.shape:
        raise ShapeError(f"positional table {pos.table.shape} does not match tokens {x.shape}")
    return T.add(x, pos.table)


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    pos: PosEncoding | None = None,
    scale: float | None = None,
    return_weights: bool = False,
):
    """softmax((q+pos)(k+pos)^T * scale) v; ``scale`` defaults to 1/sqrt(C)."""
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}")
    scale = 1.0 / math.sqrt(q.shape[1]) if scale is None else scale
    with op_tag("mha"):
        scores = T.scale(T.matmul(_with_pos(q, pos), T.transpose(_with_pos(k, pos))), scale)
        weights = T.softmax(scores, axis=-1)
        out = T.matmul(weights, v)
    return (out, weights.data) if return_weights else out


def multi_head(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    params: MhaParams,
    pos: PosEncoding | None = None,
    scale_mode: str = "per_head",
    return_weights: bool = False,
):
    """Concat(head_1..head_N) W_O with head_i = Attention(q W_Q^i, k W_K^i, v W_V^i).

    ``pos`` (self-attention only) is added to the query and key inputs
    before projection. With ``return_weights`` the (N, n_q, n_kv) attention
    weights are returned alongside the output.
    """
    c, n = params.channels, params.heads
    if c % n:
        raise ShapeError(f"channels {c} not divisible by heads {n}")
    if q.shape[1] != c or k.shape[1] != c or v.shape[1] != c or k.shape[0] != v.shape[0]:
        raise ShapeError(f"multi_head shape mismatch: q {q.shape}, k {k.shape}, v {v.shape}, C={c}")
    d = c // n
    nq, nkv = q.shape[0], k.shape[0]
    scale = attention_scale(c, n, scale_mode)
    with op_tag("mha"):
        qp = T.matmul(_with_pos(q, pos), params.w_q)
        kp = T.matmul(_with_pos(k, pos), params.w_k)
    with op_tag("proj"):
        vp = T.matmul(v, params.w_v)
    qh = T.transpose(T.reshape(qp, (nq, n, d)), (1, 0, 2))
    kh = T.transpose(T.reshape(kp, (nkv, n, d)), (1, 2, 0))
    vh = T.transpose(T.reshape(vp, (nkv, n, d)), (1, 0, 2))
    with op_tag("mha"):
        weights = T.softmax(T.scale(T.matmul(qh, kh), scale), axis=-1)
        heads = T.matmul(weights, vh)
    merged = T.reshape(T.transpose(heads, (1, 0, 2)), (nq, c))
    with op_tag("proj"):
        out = T.matmul(merged, params.w_o)
    return (out, weights.data) if return_weights else out


def pool_map(x: Tensor, ratio: int, pool: str = "avg") -> Tensor:
    with op_tag("pool"):
        if pool == "avg":
            return T.avg_pool2d(x, ratio)
        if pool == "max":
            return T.max_pool2d(x, ratio)
    raise ValueError(f"pool must be one of {POOL_TYPES}, got {pool!r}")


def pooling_attention(
    q: Tensor,
    kmap: Tensor,
    vmap: Tensor,
    params: MhaParams,
    ratio: int,
    pool: str = "avg",
    scale_mode: str = "per_head",
    return_weights: bool = False,
):
    """Multi-head attention over keys/values pooled by ``ratio``; no positional encoding.

    When ``vmap is kmap`` the map is pooled once and shared.
    """
    if kmap.ndim != 3 or kmap.shape != vmap.shape:
        raise ShapeError(f"key/value maps must share an (h, w, C) shape, got {kmap.shape} and {vmap.shape}")
    kp = pool_map(kmap, ratio, pool)
    vp = kp if vmap is kmap else pool_map(vmap, ratio, pool)
    return multi_head(q, T.flatten(kp), T.flatten(vp), params, None, scale_mode, return_weights)


def mlp(x: Tensor, params: MlpParams) -> Tensor:
    with op_tag("mlp"):
        h = T.relu(T.linear(x, params.fc1.w, params.fc1.b))
        return T.linear(h, params.fc2.w, params.fc2.b)


def pab(q: Tensor, kmap: Tensor, vmap: Tensor, params: PabParams, scale_mode: str = "per_head", return_weights: bool = False):
    """out = Norm2(F + MLP(F)) with F = Norm1(q + PA_R(q, kmap, vmap)); output shape == q shape."""
    res = pooling_attention(q, kmap, vmap, params.attn, params.ratio, params.pool, scale_mode, return_weights)
    attn, weights = res if return_weights else (res, None)
    f = T.layer_norm(T.add(q, attn), params.norm1.gamma, params.norm1.beta)
    out = T.layer_norm(T.add(f, mlp(f, params.mlp)), params.norm2.gamma, params.norm2.beta)
    return (out, weights) if return_weights else out


def encoder_layer(x: Tensor, params: PabParams, pos: PosEncoding | None, scale_mode: str = "per_head") -> Tensor:
    """Plain transformer encoder layer (full self-attention with positional encoding)."""
    a = multi_head(x, x, x, params.attn, pos, scale_mode)
    f = T.layer_norm(T.add(x, a), params.norm1.gamma, params.norm1.beta)
    return T.layer_norm(T.add(f, mlp(f, params.mlp)), params.norm2.gamma, params.norm2.beta)


# ---------------------------------------------------------------- cost model


def pooled_tokens(h: int, w: int, ratio: int) -> int:
    return (-(-h // ratio)) * (-(-w // ratio))


def flops_mha(n_q: int, n_kv: int, channels: int) -> int:
    """2 n_q n_kv C + n_q C^2 + n_kv C^2."""
    return 2 * n_q * n_kv * channels + n_q * channels**2 + n_kv * channels**2


def flops_pa(n_q: int, h: int, w: int, channels: int, ratio: int) -> int:
    """Attention over the pooled map plus one pooling pass over the h*w*C key map."""
    return flops_mha(n_q, pooled_tokens(h, w, ratio), channels) + h * w * channels


def flops_pab(n_q: int, h: int, w: int, channels: int, ratio: int, hidden: int) -> int:
    """Everything a PAB multiplies: flops_pa + value/output projections + MLP."""
    n_kv = pooled_tokens(h, w, ratio)
    return flops_pa(n_q, h, w, channels, ratio) + (n_kv + n_q) * channels**2 + 2 * n_q * channels * hidden
