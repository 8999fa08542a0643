"""Expansion layer: forward expansion, backward expansion and selection.

A length-T input is projected into conditionings C, keys K, values V1/V2 and
selectors S. Expansion queries/biases E_Q, E_B are either learned banks
(static, L = N_E rows) or the conditionings shifted by the banks (dynamic,
L = T * N_E rows). A shared length-transformation matrix Z = E_Q K^T / sqrt(d)
maps the sequence to length L and, transposed, back to length T. Positive and
negative parts of Z are normalised separately and the two resulting paths are
merged by a sigmoid gate.

Expanded rows use an origin-major layout: row ``i * N_E + j`` comes from input
position ``i`` and bank vector ``j``.
"""

from __future__ import annotations

import enum
import math

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError
from .layers import Module, uniform_fan_in
from .tensor import (
    Tensor,
    add,
    as_tensor,
    div,
    is_debug,
    matmul,
    mul,
    neg,
    relu,
    reshape,
    scale,
    sigmoid,
    sub,
    sum_,
    transpose,
)

DEFAULT_EPSILON = 1e-9


class ExpansionMode(enum.Enum):
    STATIC = "static"
    DYNAMIC_CAUSAL = "dynamic_causal"
    DYNAMIC_BIDIRECTIONAL = "dynamic_bidirectional"

    @property
    def is_dynamic(self) -> bool:
        return self is not ExpansionMode.STATIC


class ExpansionParams(Module):
    """Learned state of one expansion layer.

    Static layers carry four projections (K, V1, V2, S); dynamic layers add
    the conditioning projection C.
    """

    def __init__(
        self,
        d_model: int,
        n_e: int,
        mode: ExpansionMode,
        rng: np.random.Generator,
        epsilon: float = DEFAULT_EPSILON,
    ):
        if n_e < 1:
            raise ConfigurationError(f"expansion coefficient must be positive, got {n_e}")
        if not epsilon > 0:
            raise ConfigurationError(f"epsilon must be positive, got {epsilon}")
        self.mode = ExpansionMode(mode)
        self.epsilon = float(epsilon)
        self.q_bank = Tensor(rng.normal(0.0, 0.02, size=(n_e, d_model)), requires_grad=True)
        self.b_bank = Tensor(rng.normal(0.0, 0.02, size=(n_e, d_model)), requires_grad=True)

        def proj() -> Tensor:
            return Tensor(uniform_fan_in(rng, d_model, (d_model, d_model)), requires_grad=True)

        self.W_C = proj() if self.mode.is_dynamic else None
        self.W_K = proj()
        self.W_V1 = proj()
        self.W_V2 = proj()
        self.W_S = proj()

    @property
    def n_e(self) -> int:
        return self.q_bank.shape[0]

    @property
    def d_model(self) -> int:
        return self.q_bank.shape[1]

    @property
    def projections(self) -> list[Tensor]:
        mats = [self.W_K, self.W_V1, self.W_V2, self.W_S]
        return [self.W_C, *mats] if self.W_C is not None else mats


def row_normalize(x, epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """Divide each row by (its sum + epsilon); input must be nonnegative."""
    x = as_tensor(x)
    if not epsilon > 0:
        raise ContractError(f"epsilon must be positive, got {epsilon}")
    if is_debug() and np.any(x.data < 0):
        raise ContractError("row_normalize expects nonnegative entries")
    return div(x, add(sum_(x, axis=-1, keepdims=True), epsilon))


def build_static_expansion(params: ExpansionParams) -> tuple[Tensor, Tensor]:
    if params.mode is not ExpansionMode.STATIC:
        raise ContractError(f"static expansion requested on a {params.mode.value} layer")
    return params.q_bank, params.b_bank


def build_dynamic_expansion(C, params: ExpansionParams) -> tuple[Tensor, Tensor, np.ndarray]:
    """Expand each conditioning row into N_E query and bias rows.

    Returns ``(E_Q, E_B, origin)`` where ``origin[r]`` is the input position
    that expanded row ``r`` was built from.
    """
    C = as_tensor(C)
    n_e, d = params.q_bank.shape
    if C.shape[-1] != d:
        raise DimensionError(f"conditioning width {C.shape[-1]} != d_model {d} (shape {C.shape})")
    *lead, T, _ = C.shape
    spread = reshape(C, (*lead, T, 1, d))
    E_Q = reshape(add(spread, params.q_bank), (*lead, T * n_e, d))
    E_B = reshape(add(spread, params.b_bank), (*lead, T * n_e, d))
    return E_Q, E_B, np.repeat(np.arange(T), n_e)


def _check_mask(mask, shape: tuple[int, ...], what: str) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    try:
        ok = mask.ndim >= 2 and np.broadcast_shapes(mask.shape, shape) == tuple(shape)
    except ValueError:
        ok = False
    if not ok:
        raise DimensionError(f"{what} mask shape {mask.shape} does not broadcast to {tuple(shape)}")
    return mask


def _split_normalize(Z: Tensor, mask: np.ndarray | None, epsilon: float) -> tuple[Tensor, Tensor]:
    pos, negative = relu(Z), relu(neg(Z))
    if mask is not None:
        keep = mask.astype(Z.dtype)
        pos, negative = mul(pos, keep), mul(negative, keep)
    return row_normalize(pos, epsilon), row_normalize(negative, epsilon)


def forward_expansion(E_Q, K, V1, V2, E_B, mask=None, epsilon: float = DEFAULT_EPSILON):
    """Distribute the length-T sequence over the L expanded rows.

    ``mask[..., r, t]`` is True where expanded row ``r`` may see key ``t``;
    disallowed pairs get zero mass in both sign paths. Returns ``(F1, F2, Z)``.
    """
    E_Q, K, V1, V2, E_B = map(as_tensor, (E_Q, K, V1, V2, E_B))
    if K.shape[-2] != V1.shape[-2] or K.shape[-2] != V2.shape[-2]:
        raise DimensionError(f"K {K.shape}, V1 {V1.shape}, V2 {V2.shape} must share sequence length")
    if E_Q.shape[-2:] != E_B.shape[-2:]:
        raise DimensionError(f"E_Q {E_Q.shape} and E_B {E_B.shape} must share expanded length")
    d = K.shape[-1]
    Z = scale(matmul(E_Q, transpose(K)), 1.0 / math.sqrt(d))
    mask = _check_mask(mask, Z.shape, "forward")
    R1, R2 = _split_normalize(Z, mask, epsilon)
    F1 = add(matmul(R1, V1), E_B)
    F2 = add(matmul(R2, V2), E_B)
    return F1, F2, Z


def backward_expansion(Z, F1, F2, mask=None, epsilon: float = DEFAULT_EPSILON):
    """Gather the expanded rows back to the original length using Z^T.

    ``mask[..., t, r]`` is True where output position ``t`` may gather
    expanded row ``r``. Returns ``(B1, B2)``.
    """
    Z, F1, F2 = map(as_tensor, (Z, F1, F2))
    if F1.shape[-2] != Z.shape[-2] or F2.shape[-2] != Z.shape[-2]:
        raise DimensionError(f"Z {Z.shape} does not match F1 {F1.shape} / F2 {F2.shape} in expanded length")
    Zt = transpose(Z)
    mask = _check_mask(mask, Zt.shape, "backward")
    R1, R2 = _split_normalize(Zt, mask, epsilon)
    return matmul(R1, F1), matmul(R2, F2)


def select(S, B1, B2) -> Tensor:
    """Sigmoid-gated convex combination: sigma(S) * B1 + (1 - sigma(S)) * B2."""
    S, B1, B2 = as_tensor(S), as_tensor(B1), as_tensor(B2)
    if not (S.shape == B1.shape == B2.shape):
        raise DimensionError(f"select: shapes {S.shape}, {B1.shape}, {B2.shape} differ")
    # written as B2 + g*(B1-B2) so that B1 == B2 returns B1 exactly
    return add(B2, mul(sigmoid(S), sub(B1, B2)))


def causal_masks(T: int, n_e: int) -> tuple[np.ndarray, np.ndarray]:
    """(forward L x T, backward T x L) masks for autoregressive expansion."""
    origin = np.repeat(np.arange(T), n_e)
    positions = np.arange(T)
    forward = positions[None, :] <= origin[:, None]
    backward = origin[None, :] <= positions[:, None]
    return forward, backward


def _layer_masks(params: ExpansionParams, T: int, key_valid: np.ndarray | None):
    n_e = params.n_e
    mode = params.mode
    if mode is ExpansionMode.DYNAMIC_CAUSAL:
        fwd, bwd = causal_masks(T, n_e)
    else:
        fwd = bwd = None
    if key_valid is None:
        return fwd, bwd
    valid = np.asarray(key_valid, dtype=bool)
    if valid.shape[-1] != T:
        raise DimensionError(f"key_valid shape {valid.shape} does not match sequence length {T}")
    if mode is ExpansionMode.STATIC:
        pad_fwd = valid[..., None, :]
        pad_bwd = valid[..., :, None]
    else:
        row_valid = np.repeat(valid, n_e, axis=-1)
        pad_fwd = row_valid[..., :, None] & valid[..., None, :]
        pad_bwd = valid[..., :, None] & row_valid[..., None, :]
    fwd = pad_fwd if fwd is None else fwd & pad_fwd
    bwd = pad_bwd if bwd is None else bwd & pad_bwd
    return fwd, bwd


def expansion_layer(X, params: ExpansionParams, key_valid=None, autoregressive: bool = False) -> Tensor:
    """Run forward expansion, backward expansion and selection on X (..., T, d).

    ``key_valid`` (..., T) marks real (non-padding) positions. Set
    ``autoregressive`` for decoder placement; only DynamicCausal is legal there.
    """
    X = as_tensor(X)
    if autoregressive and params.mode is not ExpansionMode.DYNAMIC_CAUSAL:
        raise ConfigurationError(f"{params.mode.value} expansion cannot be used in an autoregressive layer")
    if X.shape[-1] != params.d_model:
        raise DimensionError(f"expansion input width {X.shape[-1]} != d_model {params.d_model}")
    T = X.shape[-2]
    K = matmul(X, params.W_K)
    V1 = matmul(X, params.W_V1)
    V2 = matmul(X, params.W_V2)
    S = matmul(X, params.W_S)
    if params.mode is ExpansionMode.STATIC:
        E_Q, E_B = build_static_expansion(params)
    else:
        E_Q, E_B, _ = build_dynamic_expansion(matmul(X, params.W_C), params)
    fwd_mask, bwd_mask = _layer_masks(params, T, key_valid)
    F1, F2, Z = forward_expansion(E_Q, K, V1, V2, E_B, fwd_mask, params.epsilon)
    B1, B2 = backward_expansion(Z, F1, F2, bwd_mask, params.epsilon)
    return select(S, B1, B2)


def expansion_step(x_t, params: ExpansionParams, cache: dict) -> Tensor:
    """Incremental DynamicCausal expansion for one new position.

    ``x_t`` is (..., 1, d). ``cache`` keeps the keys, values, expansion queries
    and forward-expanded rows of earlier positions and is extended in place.
    Earlier expanded rows never change because they only see keys up to their
    origin, so the result equals the last output row of :func:`expansion_layer`
    on the full prefix (up to summation order).
    """
    if params.mode is not ExpansionMode.DYNAMIC_CAUSAL:
        raise ConfigurationError(f"incremental decoding needs dynamic_causal expansion, got {params.mode.value}")
    x_t = as_tensor(x_t)
    if x_t.shape[-2] != 1:
        raise DimensionError(f"expansion_step takes one position at a time, got shape {x_t.shape}")

    def grow(key: str, new: Tensor) -> np.ndarray:
        cache[key] = new.data if key not in cache else np.concatenate([cache[key], new.data], axis=-2)
        return cache[key]

    K = grow("K", matmul(x_t, params.W_K))
    V1 = grow("V1", matmul(x_t, params.W_V1))
    V2 = grow("V2", matmul(x_t, params.W_V2))
    E_Q_new, E_B_new, _ = build_dynamic_expansion(matmul(x_t, params.W_C), params)
    E_Q = grow("E_Q", E_Q_new)
    F1_new, F2_new, _ = forward_expansion(E_Q_new, K, V1, V2, E_B_new, None, params.epsilon)
    F1 = grow("F1", F1_new)
    F2 = grow("F2", F2_new)
    # similarity of every expanded row so far with the newest key only
    z = scale(matmul(E_Q, transpose(K[..., -1:, :])), 1.0 / math.sqrt(K.shape[-1]))
    B1, B2 = backward_expansion(z, F1, F2, None, params.epsilon)
    return select(matmul(x_t, params.W_S), B1, B2)
