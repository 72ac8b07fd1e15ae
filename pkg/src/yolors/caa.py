"""Contextual anchor attention.

Global average pooling supplies a per-channel context vector that gates
every spatial token; the gated tokens go through single-head scaled
dot-product attention. Output has the input's shape.

All functions accept either one feature map ``d x H x W`` or a batch
``B x d x H x W``; token matrices are then ``N x d`` or ``B x N x d``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    RandomSource,
    ShapeError,
    Tensor,
    as_tensor,
    global_avg_pool,
    he_normal,
    matmul,
    mul,
    parameter,
    reshape,
    scale,
    sigmoid,
    softmax,
    transpose,
)


@dataclass(frozen=True)
class CaaConfig:
    d: int
    d_a: int
    N: int

    def __post_init__(self):
        if min(self.d, self.d_a, self.N) < 1:
            raise ValueError(f"CaaConfig dimensions must be >= 1, got {self}")

    @classmethod
    def for_map(cls, d: int, H: int, W: int, d_a: int | None = None) -> "CaaConfig":
        return cls(d, d_a if d_a is not None else default_da(d), H * W)


def default_da(d: int) -> int:
    return max(1, math.ceil(d / 2))


@dataclass
class CaaWeights:
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    gate: Tensor

    def __post_init__(self):
        d, d_a = self.W_q.shape
        if self.W_k.shape != (d, d_a) or self.W_v.shape != (d, d) or self.gate.shape != (d,):
            raise ShapeError(
                f"inconsistent CAA weights: W_q {self.W_q.shape}, W_k {self.W_k.shape}, "
                f"W_v {self.W_v.shape}, gate {self.gate.shape}"
            )

    @property
    def d(self) -> int:
        return self.W_q.shape[0]

    @property
    def d_a(self) -> int:
        return self.W_q.shape[1]

    @classmethod
    def init(cls, d: int, d_a: int | None, rng: RandomSource) -> "CaaWeights":
        d_a = default_da(d) if d_a is None else d_a
        return cls(
            W_q=he_normal(rng, (d, d_a), d, "caa.W_q"),
            W_k=he_normal(rng, (d, d_a), d, "caa.W_k"),
            W_v=he_normal(rng, (d, d), d, "caa.W_v"),
            gate=parameter(np.zeros(d), "caa.gate"),
        )

    def parameters(self) -> list[Tensor]:
        return [self.W_q, self.W_k, self.W_v, self.gate]


def extract_context(x, gate) -> Tensor:
    """Token matrix of ``x`` gated channelwise by its pooled context.

    ``A_v[i, c] = x[c, i] * sigmoid(gate[c] * mean(x[c]))``
    """
    x, gate = as_tensor(x), as_tensor(gate)
    g = global_avg_pool(x)  # (d,) or (B, d)
    if gate.shape != (x.shape[-3],):
        raise ShapeError(f"gate shape {gate.shape} does not match {x.shape[-3]} channels")
    w = sigmoid(mul(g, gate))
    n = x.shape[-1] * x.shape[-2]
    if x.ndim == 3:
        tokens = reshape(x, (x.shape[0], n))  # d x N
        return mul(transpose(tokens, (1, 0)), w)
    tokens = reshape(x, (x.shape[0], x.shape[1], n))  # B x d x N
    return mul(transpose(tokens, (0, 2, 1)), reshape(w, (x.shape[0], 1, x.shape[1])))


def project_qkv(A_v, w: CaaWeights) -> tuple[Tensor, Tensor, Tensor]:
    A_v = as_tensor(A_v)
    if A_v.shape[-1] != w.d:
        raise ShapeError(f"token width {A_v.shape[-1]} does not match d={w.d}")
    return matmul(A_v, w.W_q), matmul(A_v, w.W_k), matmul(A_v, w.W_v)


def attention_weights(Q, K) -> Tensor:
    """Row-stochastic ``softmax(Q K^T / sqrt(d_a))``."""
    Q, K = as_tensor(Q), as_tensor(K)
    d_a = Q.shape[-1]
    if d_a == 0:
        raise ShapeError("d_a must be positive")
    if K.shape[-1] != d_a:
        raise ShapeError(f"query/key width mismatch: {Q.shape} vs {K.shape}")
    axes = tuple(range(K.ndim - 2)) + (K.ndim - 1, K.ndim - 2)
    logits = scale(matmul(Q, transpose(K, axes)), 1.0 / math.sqrt(d_a))
    return softmax(logits, axis=-1)


def attend(F, V) -> Tensor:
    F, V = as_tensor(F), as_tensor(V)
    rows = F.data.sum(axis=-1)
    if not np.allclose(rows, 1.0, atol=1e-6):
        raise ValueError("attention rows must sum to 1")
    if F.shape[-1] != V.shape[-2]:
        raise ShapeError(f"attend shape mismatch: F {F.shape}, V {V.shape}")
    return matmul(F, V)


def caa_forward(x, w: CaaWeights, self_attention: bool = True) -> Tensor:
    """Full CAA block, ``d x H x W -> d x H x W`` (batched input allowed).

    With ``self_attention=False`` the attention matrix is replaced by the
    identity, leaving context gating plus the value projection.
    """
    x = as_tensor(x)
    A_v = extract_context(x, w.gate)
    if self_attention:
        Q, K, V = project_qkv(A_v, w)
        B_sa = attend(attention_weights(Q, K), V)
    else:
        B_sa = matmul(A_v, w.W_v)
    if x.ndim == 3:
        return reshape(transpose(B_sa, (1, 0)), x.shape)
    return reshape(transpose(B_sa, (0, 2, 1)), x.shape)
