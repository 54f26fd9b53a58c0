"""Single-head global attention mixer with max-relative fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as T
from .layers import Conv, ConvBlock, Norm
from .tensor import Tensor


@dataclass
class AttentionParams:
    wq: Conv
    wk: Conv
    wv: Conv
    q_norm: Norm
    k_norm: Norm
    proj: ConvBlock

    @classmethod
    def init(cls, rng, c: int) -> "AttentionParams":
        return cls(
            wq=Conv.init(rng, c, c),
            wk=Conv.init(rng, c, c),
            wv=Conv.init(rng, c, c),
            q_norm=Norm.init(c, "per_token_channel"),
            # a key shift adds a per-row constant to the logits, which softmax cancels
            k_norm=Norm.init(c, "per_token_channel", shift=False),
            proj=ConvBlock.init(rng, 2 * c, c),
        )

    @property
    def d_k(self) -> int:
        return self.wk.weight.shape[0]


def qkv_project(x: Tensor, p: AttentionParams) -> tuple[Tensor, Tensor, Tensor]:
    """1x1 projections flattened to (n, h*w, c') token matrices."""
    return T.to_tokens(p.wq(x)), T.to_tokens(p.wk(x)), T.to_tokens(p.wv(x))


def attend(q: Tensor, k: Tensor, v: Tensor, d_k: int, q_norm: Norm | None = None, k_norm: Norm | None = None) -> Tensor:
    """softmax(norm(Q) norm(K)^T / sqrt(d_k)) V on (n, N, c') token matrices."""
    if q.shape != k.shape or q.shape[:2] != v.shape[:2]:
        raise ValueError(f"incompatible token matrices {q.shape}, {k.shape}, {v.shape}")
    qn = q_norm(q) if q_norm else T.normalize(q, "per_token_channel")
    kn = k_norm(k) if k_norm else T.normalize(k, "per_token_channel")
    scores = T.matmul(qn, T.transpose(kn, (0, 2, 1))) * (1.0 / math.sqrt(d_k))
    return T.matmul(T.softmax_lastaxis(scores), v)


def attention_weights(q: Tensor, k: Tensor, d_k: int) -> Tensor:
    qn = T.normalize(q, "per_token_channel")
    kn = T.normalize(k, "per_token_channel")
    return T.softmax_lastaxis(T.matmul(qn, T.transpose(kn, (0, 2, 1))) * (1.0 / math.sqrt(d_k)))


def attention_mix(x: Tensor, p: AttentionParams) -> Tensor:
    T.check_nchw(x)
    n, c, h, w = x.shape
    if p.proj.conv.weight.shape[:2] != (c, 2 * c):
        raise ValueError(f"projection must map {2 * c} -> {c} channels, has weight {p.proj.conv.weight.shape}")
    q, k, v = qkv_project(x, p)
    x_attn = T.from_tokens(attend(q, k, v, p.d_k, p.q_norm, p.k_norm), h, w)
    xj = T.maximum(T.zeros_like(x), x_attn - x)
    return p.proj(T.concat_channels(x, xj))
