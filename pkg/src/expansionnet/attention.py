"""Scaled dot-product and multi-head attention."""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .layers import Module, uniform_fan_in
from .tensor import Tensor, add, as_tensor, matmul, reshape, scale, softmax, transpose

# additive bias for disallowed keys; exp(-1e9) underflows to exactly 0 in float64
MASK_BIAS = -1e9


def mask_bias(mask, dtype=np.float64) -> np.ndarray:
    """Boolean allow-mask -> additive bias (0 where allowed, MASK_BIAS elsewhere)."""
    mask = np.asarray(mask, dtype=bool)
    if not np.all(mask.any(axis=-1)):
        raise ContractError("attention mask leaves a query row with no visible key")
    return np.where(mask, 0.0, MASK_BIAS).astype(dtype)


def scaled_dot_attention(Q, K, V, mask=None) -> Tensor:
    """softmax(Q K^T / sqrt(dh)) V over the last two axes.

    ``mask[..., i, j]`` is True where query ``i`` may attend key ``j``.
    """
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"query width {Q.shape[-1]} != key width {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"keys {K.shape} and values {V.shape} differ in length")
    scores = scale(matmul(Q, transpose(K)), 1.0 / math.sqrt(Q.shape[-1]))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != scores.shape[-2:] and mask.shape[-2:] != (1, scores.shape[-1]):
            raise DimensionError(f"mask shape {mask.shape} does not match scores {scores.shape}")
        scores = add(scores, mask_bias(mask, scores.dtype))
    return matmul(softmax(scores, axis=-1), V)


class AttentionParams(Module):
    """Query/key/value/output projections of one multi-head attention block."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator):
        if n_heads < 1 or d_model % n_heads:
            raise ConfigurationError(f"n_heads={n_heads} must divide d_model={d_model}")
        self.n_heads = n_heads

        def proj() -> Tensor:
            return Tensor(uniform_fan_in(rng, d_model, (d_model, d_model)), requires_grad=True)

        self.W_Q = proj()
        self.W_K = proj()
        self.W_V = proj()
        self.W_out = proj()

    @property
    def d_model(self) -> int:
        return self.W_Q.shape[0]


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = reshape(x, (*lead, n, n_heads, d // n_heads))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return reshape(transpose(x, axes), (*lead, n, h * dh))


def multi_head_attention(x_q, x_kv, params: AttentionParams, mask=None) -> Tensor:
    """Project, attend per head, concatenate heads, apply W_out.

    ``mask`` broadcasts against (..., m, n); it is shared by all heads.
    """
    x_q, x_kv = as_tensor(x_q), as_tensor(x_kv)
    d = params.d_model
    if x_q.shape[-1] != d or x_kv.shape[-1] != d:
        raise DimensionError(f"attention inputs {x_q.shape}, {x_kv.shape} must have width {d}")
    h = params.n_heads
    Q = _split_heads(matmul(x_q, params.W_Q), h)
    K = _split_heads(matmul(x_kv, params.W_K), h)
    V = _split_heads(matmul(x_kv, params.W_V), h)
    if mask is not None:
        # insert the head axis
        mask = np.expand_dims(np.asarray(mask, dtype=bool), -3)
    heads = scaled_dot_attention(Q, K, V, mask)
    return matmul(_merge_heads(heads), params.W_out)
