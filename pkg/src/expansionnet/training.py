"""Cross-entropy and self-critical (CIDEr-D) training.

The self-critical baseline for sample i is the sum of the other K-1 rewards
divided by K (not K-1). This biases the baseline low, so equal rewards still
leave a small positive advantage r/K on every sample.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .data import SceneSample, encode_refs, pad_features, pad_sequences
from .decoding import beam_search_steps, greedy_search, memory_step_fn, model_step_fn, sample_search
from .errors import ConfigurationError, ContractError, DimensionError
from .metrics import NGramStats, build_idf, cider_d, corpus_bleu
from .model import Captioner, ModelConfig, repeat_rows, sidecar_path
from .tensor import Tensor, as_tensor, log_softmax, mul, no_grad, pick, scale, sum_
from .vocab import PAD, Vocabulary, normalize_caption

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 16
    peak_lr: float = 1e-3
    warmup_steps: int = 200
    anneal_factor: float = 0.8
    anneal_every_epochs: int = 2
    epochs: int = 20
    scst_k: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    grad_clip: float = 1.0
    patience: int | None = 3
    fine_tune: bool = False
    fine_tune_batch_size: int = 10
    fine_tune_lr: float = 2.5e-5
    eval_batch_size: int = 128

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.scst_k < 2:
            raise ConfigurationError(f"scst_k must be at least 2, got {self.scst_k}")
        if self.warmup_steps < 1:
            raise ConfigurationError(f"warmup_steps must be at least 1, got {self.warmup_steps}")
        if self.batch_size < 1 or self.epochs < 0 or self.anneal_every_epochs < 1:
            raise ConfigurationError("batch_size, epochs and anneal_every_epochs must be positive")
        if self.peak_lr <= 0:
            raise ConfigurationError("peak_lr must be positive")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigurationError(f"unknown training config keys: {unknown}")
        return cls(**doc)


def default_scst_config(**overrides) -> TrainConfig:
    base = dict(peak_lr=1e-4, epochs=10, patience=None)
    base.update(overrides)
    return TrainConfig(**base)


# -- objectives ---------------------------------------------------------------


def xe_loss(logits, targets, weights=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-pad positions.

    ``logits`` is (..., T, V) and ``targets`` (..., T). Optional per-sequence
    ``weights`` count repeated sequences.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != logits.shape[:-1]:
        raise DimensionError(f"targets {targets.shape} do not match logits {logits.shape}")
    tok_w = (targets != PAD).astype(logits.dtype)
    if weights is not None:
        tok_w = tok_w * np.asarray(weights, dtype=logits.dtype).reshape(*targets.shape[:-1], 1)
    denom = tok_w.sum()
    if denom == 0:
        raise ContractError("xe_loss needs at least one non-pad target")
    nll = pick(log_softmax(logits), np.where(targets == PAD, 0, targets))
    return scale(sum_(mul(nll, tok_w)), -1.0 / denom)


def token_accuracy(logits: np.ndarray, targets: np.ndarray, weights=None) -> tuple[float, float]:
    """(weighted correct count, weighted token count) of argmax predictions."""
    targets = np.asarray(targets)
    w = (targets != PAD).astype(float)
    if weights is not None:
        w = w * np.asarray(weights, dtype=float).reshape(*targets.shape[:-1], 1)
    hit = np.argmax(logits, axis=-1) == targets
    return float((hit * w).sum()), float(w.sum())


def scst_baseline(rewards: Sequence[float], i: int) -> float:
    """Sum of the other rewards divided by K."""
    K = len(rewards)
    if K < 2:
        raise ConfigurationError(f"the self-critical baseline needs K >= 2 samples, got {K}")
    others = 0.0
    for j, r in enumerate(rewards):
        if j != i:
            others += r
    return others / K


def scst_advantages(rewards: Sequence[float]) -> np.ndarray:
    return np.array([r - scst_baseline(rewards, i) for i, r in enumerate(rewards)])


def scst_loss(seq_logprobs, rewards: Sequence[float]) -> Tensor:
    """-(1/K) sum_i (r_i - b_i) * log p(sample_i) for one scene's K samples.

    ``seq_logprobs`` holds the summed token log-probs of each sample; it may
    also be (B, K) for a batch of scenes, in which case the mean over scenes
    is returned.
    """
    seq_logprobs = as_tensor(seq_logprobs)
    rewards = np.asarray(rewards, dtype=float)
    if rewards.shape != seq_logprobs.shape:
        raise DimensionError(f"{seq_logprobs.shape} sample log-probs but rewards have shape {rewards.shape}")
    flat = rewards.reshape(-1, rewards.shape[-1])
    adv = np.stack([scst_advantages(r) for r in flat]).reshape(rewards.shape)
    return scale(sum_(mul(seq_logprobs, adv)), -1.0 / adv.size)


def lr_at(step: int, epoch: int, config: TrainConfig) -> float:
    """Linear warm-up to the (annealed) peak, then step decay every few epochs."""
    annealed = config.peak_lr * config.anneal_factor ** (epoch // config.anneal_every_epochs)
    return annealed * min(step / config.warmup_steps, 1.0)


# -- optimiser -----------------------------------------------------------------


class Adam:
    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float, grad_clip: float | None = None) -> float:
        """Apply one update; returns the pre-clipping global gradient norm."""
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        factor = grad_clip / norm if grad_clip is not None and norm > grad_clip else 1.0
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = grads[k] * factor if factor != 1.0 else grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
        return norm

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"adam.m.{k}"] = self.m[k]
            out[f"adam.v.{k}"] = self.v[k]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            self.m[k] = np.array(tensors[f"adam.m.{k}"])
            self.v[k] = np.array(tensors[f"adam.v.{k}"])
        self.t = t


# -- batches -------------------------------------------------------------------


@dataclass
class CaptionBatch:
    features: np.ndarray  # B x N x d
    valid: np.ndarray  # B x N
    tokens: np.ndarray  # M x T, M unique (scene, caption) pairs
    rows: np.ndarray  # M, scene index of each caption
    weights: np.ndarray  # M, multiplicity of each caption


def make_batch(samples: Sequence[SceneSample], vocab: Vocabulary, max_len: int) -> CaptionBatch:
    """Collate scenes with their references; identical references are merged and weighted."""
    feats, valid = pad_features([s.features for s in samples])
    seqs, rows, weights = [], [], []
    for i, refs in enumerate(encode_refs(samples, vocab, max_len)):
        for ids, count in Counter(tuple(r) for r in refs).items():
            seqs.append(list(ids))
            rows.append(i)
            weights.append(count)
    return CaptionBatch(feats, valid, pad_sequences(seqs), np.asarray(rows), np.asarray(weights, dtype=float))


def batch_xe_loss(model: Captioner, batch: CaptionBatch) -> tuple[Tensor, np.ndarray]:
    memory = model.encode(batch.features, batch.valid)
    logits = model.decode_logits(batch.tokens[:, :-1], repeat_rows(memory, batch.rows), batch.valid[batch.rows])
    return xe_loss(logits, batch.tokens[:, 1:], batch.weights), logits.data


# -- evaluation -----------------------------------------------------------------


def ref_words(samples: Sequence[SceneSample]) -> list[list[list[str]]]:
    return [[normalize_caption(r) for r in s.refs] for s in samples]


def generate_captions(
    model: Captioner, samples: Sequence[SceneSample], beam: int = 1, batch_size: int = 128
) -> list[list[int]]:
    if beam < 1:
        raise ConfigurationError(f"beam width must be at least 1, got {beam}")
    out: list[list[int]] = []
    cfg = model.config
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        if beam == 1:
            feats, valid = pad_features([s.features for s in chunk])
            out.extend(greedy_search(model_step_fn(model, feats, valid), len(chunk), cfg.max_seq_len))
        else:
            for s in chunk:
                step = model_step_fn(model, s.features)
                out.append(beam_search_steps(step, beam, cfg.max_seq_len, cfg.vocab_size))
    return out


def evaluate(
    model: Captioner,
    samples: Sequence[SceneSample],
    vocab: Vocabulary,
    beam: int = 1,
    stats: NGramStats | None = None,
    batch_size: int = 128,
    with_captions: bool = True,
) -> dict:
    """Teacher-forced loss/accuracy plus caption metrics (CIDEr-D reported x100)."""
    loss_sum = weight_sum = hits = count = 0.0
    with no_grad():
        for start in range(0, len(samples), batch_size):
            batch = make_batch(samples[start : start + batch_size], vocab, model.config.max_seq_len)
            loss, logits = batch_xe_loss(model, batch)
            targets = batch.tokens[:, 1:]
            tok = float(((targets != PAD) * batch.weights[:, None]).sum())
            loss_sum += loss.item() * tok
            weight_sum += tok
            h, c = token_accuracy(logits, targets, batch.weights)
            hits += h
            count += c
    result = {"loss": loss_sum / weight_sum, "accuracy": hits / count}
    if with_captions:
        caps = [vocab.decode_ids(c) for c in generate_captions(model, samples, beam, batch_size)]
        refs = ref_words(samples)
        mean_cider, _ = _corpus_cider(caps, refs, stats)
        result.update(
            cider_d=100.0 * mean_cider,
            bleu1=corpus_bleu(caps, refs, 1),
            bleu4=corpus_bleu(caps, refs, 4),
        )
    return result


def _corpus_cider(caps, refs, stats):
    stats = stats or build_idf(refs)
    scores = [cider_d(c, r, stats) for c, r in zip(caps, refs)]
    return float(np.mean(scores)), scores


# -- training loops -----------------------------------------------------------------


@dataclass
class TrainState:
    """Everything needed to continue a run bit-identically."""

    model: Captioner
    optimizer: Adam
    rng: np.random.Generator
    step: int = 0
    epoch: int = 0
    stage: str = "xe"
    best: float | None = None
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)  # copied into the sidecar (e.g. the vocabulary)

    @classmethod
    def fresh(cls, model: Captioner, config: TrainConfig, stage: str = "xe") -> "TrainState":
        opt = Adam(model.named_parameters(), config.beta1, config.beta2, config.eps_opt)
        return cls(model, opt, np.random.default_rng(config.seed), stage=stage)

    def save(self, path: str | os.PathLike) -> None:
        tensors = dict(self.model.state_dict())
        tensors.update(self.optimizer.state_tensors())
        save_tensors(path, tensors)
        doc = {
            "model": self.model.config.to_dict(),
            "train": {
                "step": self.step,
                "epoch": self.epoch,
                "stage": self.stage,
                "best": self.best,
                "adam_t": self.optimizer.t,
                "rng": self.rng.bit_generator.state,
            },
            "meta": self.meta,
        }
        with open(sidecar_path(path), "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike, config: TrainConfig) -> "TrainState":
        with open(sidecar_path(path), encoding="utf-8") as fh:
            doc = json.load(fh)
        tensors = load_tensors(path)
        model = Captioner(ModelConfig.from_dict(doc["model"]))
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
        state = cls.fresh(model, config)
        state.meta = doc.get("meta", {})
        train = doc.get("train")
        if train is not None:
            state.optimizer.load_state_tensors(tensors, train["adam_t"])
            state.rng.bit_generator.state = train["rng"]
            state.step, state.epoch, state.stage, state.best = (
                train["step"], train["epoch"], train["stage"], train["best"],
            )
        return state


def _log_epoch(log_path, record: dict) -> None:
    logger.info(json.dumps(record))
    if log_path is not None:
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def xe_step(state: TrainState, samples: Sequence[SceneSample], vocab: Vocabulary, lr: float, clip) -> float:
    batch = make_batch(samples, vocab, state.model.config.max_seq_len)
    state.model.zero_grad()
    loss, _ = batch_xe_loss(state.model, batch)
    loss.backward()
    state.optimizer.step(lr, clip)
    state.step += 1
    return loss.item()


def _improved(value: float, best: float | None, higher_is_better: bool) -> bool:
    if best is None:
        return True
    return value > best if higher_is_better else value < best


def train_xe(
    state: TrainState,
    train: Sequence[SceneSample],
    val: Sequence[SceneSample],
    vocab: Vocabulary,
    config: TrainConfig,
    log_path=None,
    ckpt_path=None,
    eval_captions: bool = True,
    last_path=None,
) -> TrainState:
    """Teacher-forced training; keeps the lowest-validation-loss checkpoint.

    ``last_path``, if given, receives the full state after every epoch so an
    interrupted run can be resumed.
    """
    if not train:
        raise ConfigurationError("training split is empty")
    state.stage = "xe"
    bad_epochs = 0
    while state.epoch < config.epochs:
        t0 = time.time()
        losses = []
        lr = 0.0
        for idx in _batches(len(train), config.batch_size, state.rng):
            lr = lr_at(state.step + 1, state.epoch, config)
            losses.append(xe_step(state, [train[i] for i in idx], vocab, lr, config.grad_clip))
        state.epoch += 1
        metrics = evaluate(state.model, val, vocab, batch_size=config.eval_batch_size, with_captions=eval_captions)
        record = {"epoch": state.epoch, "split": "val", "train_loss": float(np.mean(losses)), **metrics, "lr": lr}
        record["wall_seconds"] = time.time() - t0
        state.history.append(record)
        _log_epoch(log_path, record)
        if _improved(metrics["loss"], state.best, higher_is_better=False):
            state.best = metrics["loss"]
            bad_epochs = 0
            if ckpt_path is not None:
                state.save(ckpt_path)
        else:
            bad_epochs += 1
        if last_path is not None:
            state.save(last_path)
        if config.patience is not None and bad_epochs >= config.patience:
            logger.info("validation loss deteriorated for %d epochs; stopping", bad_epochs)
            break
    return state


def fine_tune_epoch(
    state: TrainState,
    train: Sequence[SceneSample],
    val: Sequence[SceneSample],
    vocab: Vocabulary,
    config: TrainConfig,
    log_path=None,
    ckpt_path=None,
) -> TrainState:
    """One extra epoch at a small fixed learning rate and small batch."""
    t0 = time.time()
    losses = []
    for idx in _batches(len(train), config.fine_tune_batch_size, state.rng):
        losses.append(xe_step(state, [train[i] for i in idx], vocab, config.fine_tune_lr, config.grad_clip))
    state.epoch += 1
    metrics = evaluate(state.model, val, vocab, batch_size=config.eval_batch_size)
    record = {"epoch": state.epoch, "split": "val", "train_loss": float(np.mean(losses)), **metrics}
    record.update(lr=config.fine_tune_lr, wall_seconds=time.time() - t0, fine_tune=True)
    state.history.append(record)
    _log_epoch(log_path, record)
    if _improved(metrics["loss"], state.best, higher_is_better=False):
        state.best = metrics["loss"]
        if ckpt_path is not None:
            state.save(ckpt_path)
    return state


RewardFn = Callable[[list[str], list[list[str]]], float]


def scst_step(
    state: TrainState,
    samples: Sequence[SceneSample],
    vocab: Vocabulary,
    reward_fn: RewardFn,
    config: TrainConfig,
    lr: float,
) -> tuple[float, float]:
    """Sample K captions per scene, score them, take one policy-gradient step.

    Returns (loss, mean reward).
    """
    model = state.model
    K = config.scst_k
    feats, valid = pad_features([s.features for s in samples])
    model.zero_grad()
    memory = model.encode(feats, valid)
    rows = np.repeat(np.arange(len(samples)), K)
    step = memory_step_fn(model, memory.data, valid, rows)
    sampled = sample_search(step, len(rows), model.config.max_seq_len, state.rng)
    refs = ref_words(samples)
    rewards = np.array([reward_fn(vocab.decode_ids(s.tokens), refs[r]) for s, r in zip(sampled, rows)])
    tokens = pad_sequences([s.tokens for s in sampled])
    logits = model.decode_logits(tokens[:, :-1], repeat_rows(memory, rows), valid[rows])
    seq_lp = sequence_logprobs(logits, tokens[:, 1:])
    loss = scst_loss(seq_lp.reshape(len(samples), K), rewards.reshape(len(samples), K))
    loss.backward()
    state.optimizer.step(lr, config.grad_clip)
    state.step += 1
    return loss.item(), float(rewards.mean())


def sequence_logprobs(logits, targets) -> Tensor:
    """Summed log p of each target sequence (pad positions excluded)."""
    targets = np.asarray(targets, dtype=np.int64)
    keep = (targets != PAD).astype(float)
    lp = pick(log_softmax(logits), np.where(targets == PAD, 0, targets))
    return sum_(mul(lp, keep), axis=-1)


def cider_reward(stats: NGramStats) -> RewardFn:
    return lambda cand, refs: cider_d(cand, refs, stats)


def train_scst(
    state: TrainState,
    train: Sequence[SceneSample],
    val: Sequence[SceneSample],
    vocab: Vocabulary,
    config: TrainConfig,
    stats: NGramStats | None,
    log_path=None,
    ckpt_path=None,
    reward_fn: RewardFn | None = None,
    last_path=None,
) -> TrainState:
    """Self-critical CIDEr-D optimisation; keeps the best-validation-CIDEr-D checkpoint.

    ``stats`` is the idf table over the training references.
    """
    if stats is None and reward_fn is None:
        raise ConfigurationError("self-critical training needs an idf table over the training references")
    if not train:
        raise ConfigurationError("training split is empty")
    reward_fn = reward_fn or cider_reward(stats)
    if state.stage != "scst":
        # fresh optimiser and schedule for the second stage
        meta = state.meta
        state = TrainState.fresh(state.model, config, stage="scst")
        state.meta = meta
        state.best = evaluate(state.model, val, vocab, batch_size=config.eval_batch_size)["cider_d"]
        # the starting point is the best so far; a run that never improves still leaves a checkpoint
        if ckpt_path is not None:
            state.save(ckpt_path)
    bad_epochs = 0
    while state.epoch < config.epochs:
        t0 = time.time()
        losses, rewards = [], []
        lr = 0.0
        for idx in _batches(len(train), config.batch_size, state.rng):
            lr = lr_at(state.step + 1, state.epoch, config)
            loss, reward = scst_step(state, [train[i] for i in idx], vocab, reward_fn, config, lr)
            losses.append(loss)
            rewards.append(reward)
        state.epoch += 1
        metrics = evaluate(state.model, val, vocab, batch_size=config.eval_batch_size)
        record = {"epoch": state.epoch, "split": "val", "train_loss": float(np.mean(losses)), **metrics}
        record.update(train_reward=float(np.mean(rewards)), lr=lr, wall_seconds=time.time() - t0)
        state.history.append(record)
        _log_epoch(log_path, record)
        if _improved(metrics["cider_d"], state.best, higher_is_better=True):
            state.best = metrics["cider_d"]
            bad_epochs = 0
            if ckpt_path is not None:
                state.save(ckpt_path)
        else:
            bad_epochs += 1
        if last_path is not None:
            state.save(last_path)
        if config.patience is not None and bad_epochs >= config.patience:
            break
    return state
