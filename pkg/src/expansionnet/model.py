"""Expansion encoder-decoder captioning network."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from .attention import AttentionParams, multi_head_attention
from .checkpoint import load_tensors, save_tensors
from .errors import ConfigurationError, ContractError, DimensionError, LengthError
from .expansion import DEFAULT_EPSILON, ExpansionMode, ExpansionParams, expansion_layer, expansion_step
from .layers import Embedding, FeedForward, LayerNorm, Linear, Module
from .tensor import Tensor, add, as_tensor, concat, embedding, no_grad, relu, reshape
from .vocab import SOS

LAYER_KINDS = ("expansion", "attention")


@dataclass
class ModelConfig:
    d_model: int = 64
    d_ff: int = 128
    n_enc_layers: int = 3
    n_dec_layers: int = 3
    enc_mode: str = "static"
    enc_n_e: int = 16
    dec_mode: str = "dynamic_causal"
    dec_n_e: int = 4
    n_heads: int = 4
    vocab_size: int = 32
    max_seq_len: int = 20
    d_feature: int = 32
    enc_layer_kind: str = "expansion"
    dec_layer_kind: str = "expansion"
    epsilon: float = DEFAULT_EPSILON
    init_seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d_model", "d_ff", "n_heads", "vocab_size", "d_feature", "enc_n_e", "dec_n_e"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_enc_layers < 0 or self.n_dec_layers < 0:
            raise ConfigurationError("layer counts must be nonnegative")
        if self.max_seq_len < 2:
            raise ConfigurationError(f"max_seq_len must be at least 2 (sos + eos), got {self.max_seq_len}")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")
        try:
            enc_mode = ExpansionMode(self.enc_mode)
            dec_mode = ExpansionMode(self.dec_mode)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None
        if enc_mode is ExpansionMode.DYNAMIC_CAUSAL:
            raise ConfigurationError("encoder expansion must be bidirectional (static or dynamic_bidirectional)")
        if dec_mode is not ExpansionMode.DYNAMIC_CAUSAL:
            raise ConfigurationError(f"decoder expansion must be dynamic_causal, got {self.dec_mode}")
        for name in ("enc_layer_kind", "dec_layer_kind"):
            if getattr(self, name) not in LAYER_KINDS:
                raise ConfigurationError(f"{name} must be one of {LAYER_KINDS}, got {getattr(self, name)!r}")
        if not self.epsilon > 0:
            raise ConfigurationError("epsilon must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {unknown}")
        return cls(**doc)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Smallest config used by the gradient suite."""
        base = dict(
            d_model=8, d_ff=16, n_enc_layers=1, n_dec_layers=1, enc_n_e=2, dec_n_e=2,
            n_heads=2, vocab_size=7, max_seq_len=6, d_feature=5,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def full_scale(cls, vocab_size: int = 10000, **overrides) -> "ModelConfig":
        base = dict(
            d_model=512, d_ff=2048, n_enc_layers=6, n_dec_layers=6, enc_n_e=64, dec_n_e=16,
            n_heads=8, vocab_size=vocab_size, max_seq_len=20, d_feature=2048,
        )
        base.update(overrides)
        return cls(**base)


class EncoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.norm_mix = LayerNorm(cfg.d_model)
        if cfg.enc_layer_kind == "expansion":
            self.mixer = ExpansionParams(cfg.d_model, cfg.enc_n_e, ExpansionMode(cfg.enc_mode), rng, cfg.epsilon)
        else:
            self.mixer = AttentionParams(cfg.d_model, cfg.n_heads, rng)
        self.norm_ff = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, rng)

    def __call__(self, x: Tensor, valid: np.ndarray | None) -> Tensor:
        h = self.norm_mix(x)
        if isinstance(self.mixer, ExpansionParams):
            mixed = expansion_layer(h, self.mixer, key_valid=valid)
        else:
            mask = None if valid is None else valid[..., None, :]
            mixed = multi_head_attention(h, h, self.mixer, mask)
        y = add(x, mixed)
        return add(y, self.ff(self.norm_ff(y)))


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.norm_mix = LayerNorm(cfg.d_model)
        if cfg.dec_layer_kind == "expansion":
            self.mixer = ExpansionParams(cfg.d_model, cfg.dec_n_e, ExpansionMode.DYNAMIC_CAUSAL, rng, cfg.epsilon)
        else:
            self.mixer = AttentionParams(cfg.d_model, cfg.n_heads, rng)
        self.norm_cross = LayerNorm(cfg.d_model)
        self.cross = AttentionParams(cfg.d_model, cfg.n_heads, rng)
        self.norm_ff = LayerNorm(cfg.d_model)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, rng)

    def __call__(self, y: Tensor, memory: Tensor, memory_valid: np.ndarray | None) -> Tensor:
        h = self.norm_mix(y)
        if isinstance(self.mixer, ExpansionParams):
            mixed = expansion_layer(h, self.mixer, autoregressive=True)
        else:
            T = y.shape[-2]
            mixed = multi_head_attention(h, h, self.mixer, np.tril(np.ones((T, T), dtype=bool)))
        return self._cross_and_ff(add(y, mixed), memory, memory_valid)

    def step(self, y_t: Tensor, memory, memory_valid: np.ndarray | None, cache: dict) -> Tensor:
        """One new position (..., 1, d) given the cached earlier positions."""
        h = self.norm_mix(y_t)
        if isinstance(self.mixer, ExpansionParams):
            mixed = expansion_step(h, self.mixer, cache)
        else:
            cache["h"] = h.data if "h" not in cache else np.concatenate([cache["h"], h.data], axis=-2)
            mixed = multi_head_attention(h, cache["h"], self.mixer)
        return self._cross_and_ff(add(y_t, mixed), memory, memory_valid)

    def _cross_and_ff(self, z: Tensor, memory, memory_valid: np.ndarray | None) -> Tensor:
        cross_mask = None if memory_valid is None else memory_valid[..., None, :]
        w = add(z, multi_head_attention(self.norm_cross(z), memory, self.cross, cross_mask))
        return add(w, self.ff(self.norm_ff(w)))


@dataclass
class DecodeState:
    """Per-layer caches of one batch of partial decodes (inference only)."""

    memory: np.ndarray  # n x N x d_model
    memory_valid: np.ndarray | None
    caches: list
    length: int = 0

    def reorder(self, index) -> None:
        """Keep rows ``index`` (e.g. surviving beam hypotheses), in that order."""
        index = np.asarray(index, dtype=np.int64)
        self.memory = self.memory[index]
        if self.memory_valid is not None:
            self.memory_valid = self.memory_valid[index]
        for cache in self.caches:
            for key in cache:
                cache[key] = cache[key][index]


class Captioner(Module):
    """Feature-set encoder + autoregressive caption decoder.

    Inputs may be single examples (features ``N x d_feature``, tokens ``T``)
    or batches (``B x N x d_feature``, ``B x T``) with optional boolean
    validity masks for padded feature rows.
    """

    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.init_seed)
        d = config.d_model
        self.input_proj = Linear(config.d_feature, d, rng)
        self.enc_layers = [EncoderLayer(config, rng) for _ in range(config.n_enc_layers)]
        self.tok_emb = Embedding(config.vocab_size, d, rng)
        self.pos_emb = Embedding(config.max_seq_len, d, rng)
        self.dec_layers = [DecoderLayer(config, rng) for _ in range(config.n_dec_layers)]
        self.final_norm = LayerNorm(d)
        self.out_proj = Linear(d, config.vocab_size, rng)

    # -- forward ----------------------------------------------------------

    def encode(self, features, feature_valid=None) -> Tensor:
        features = as_tensor(features)
        if features.shape[-1] != self.config.d_feature:
            raise DimensionError(
                f"feature width {features.shape[-1]} != d_feature {self.config.d_feature} (shape {features.shape})"
            )
        if features.shape[-2] < 1:
            raise ContractError("a scene needs at least one feature vector")
        x = relu(self.input_proj(features))
        valid = None if feature_valid is None else np.asarray(feature_valid, dtype=bool)
        for layer in self.enc_layers:
            x = layer(x, valid)
        return x

    def decode_logits(self, tokens, memory, memory_valid=None) -> Tensor:
        """Teacher-forced logits; row t depends on tokens[..., :t+1] and all memory."""
        ids = np.asarray(tokens, dtype=np.int64)
        T = ids.shape[-1]
        if T > self.config.max_seq_len:
            raise LengthError(f"sequence length {T} exceeds max_seq_len {self.config.max_seq_len}")
        if T == 0 or np.any(ids[..., 0] != SOS):
            raise ContractError("token sequences must start with <sos>")
        memory = as_tensor(memory)
        y = add(self.tok_emb(ids), self.pos_emb(np.arange(T)))
        valid = None if memory_valid is None else np.asarray(memory_valid, dtype=bool)
        for layer in self.dec_layers:
            y = layer(y, memory, valid)
        return self.out_proj(self.final_norm(y))

    def __call__(self, features, tokens, feature_valid=None) -> Tensor:
        memory = self.encode(features, feature_valid)
        return self.decode_logits(tokens, memory, feature_valid)

    # -- incremental decoding -----------------------------------------------

    def start_decode(self, memory, memory_valid=None) -> DecodeState:
        """Empty decode state for a batch of encoded scenes (n x N x d)."""
        memory = np.asarray(getattr(memory, "data", memory))
        if memory.ndim != 3:
            raise DimensionError(f"start_decode expects batched memory (n, N, d), got shape {memory.shape}")
        valid = None if memory_valid is None else np.asarray(memory_valid, dtype=bool)
        return DecodeState(memory, valid, [{} for _ in self.dec_layers])

    def decode_step(self, state: DecodeState, tokens) -> np.ndarray:
        """Feed one token per row; returns next-token logits (n x V).

        Matches the last row of :meth:`decode_logits` on the full prefix.
        """
        ids = np.asarray(tokens, dtype=np.int64).reshape(-1, 1)
        t = state.length
        if t >= self.config.max_seq_len:
            raise LengthError(f"sequence length {t + 1} exceeds max_seq_len {self.config.max_seq_len}")
        if t == 0 and np.any(ids != SOS):
            raise ContractError("token sequences must start with <sos>")
        if ids.shape[0] != state.memory.shape[0]:
            raise DimensionError(f"{ids.shape[0]} tokens for {state.memory.shape[0]} decode rows")
        with no_grad():
            y = add(self.tok_emb(ids), self.pos_emb(np.array([t])))
            for layer, cache in zip(self.dec_layers, state.caches):
                y = layer.step(y, state.memory, state.memory_valid, cache)
            logits = self.out_proj(self.final_norm(y))
        state.length += 1
        return logits.data[:, 0, :]

    # -- persistence ------------------------------------------------------

    def save(self, path: str | os.PathLike, extra: dict | None = None) -> None:
        """Write parameters (binary) plus a ``.json`` sidecar with the config."""
        save_tensors(path, self.state_dict())
        doc = {"model": self.config.to_dict()}
        if extra:
            doc.update(extra)
        with open(sidecar_path(path), "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Captioner":
        with open(sidecar_path(path), encoding="utf-8") as fh:
            doc = json.load(fh)
        model = cls(ModelConfig.from_dict(doc["model"]))
        # training checkpoints also carry optimiser moments
        tensors = load_tensors(path)
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
        return model


def sidecar_path(path: str | os.PathLike) -> str:
    return f"{os.fspath(path)}.json"


def repeat_rows(x: Tensor, index: np.ndarray) -> Tensor:
    """Differentiable ``x[index]`` along the leading (batch) axis."""
    x = as_tensor(x)
    flat = reshape(x, (x.shape[0], -1))
    return reshape(embedding(flat, index), (len(index), *x.shape[1:]))
