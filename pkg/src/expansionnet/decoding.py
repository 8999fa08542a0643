"""Greedy, beam and sampling decoders.

All decoders drive a *step function* ``step(prefixes, parents)``: given a
batch of equal-length prefixes (``n x t`` int array, each starting with
``<sos>``) it returns next-token log-probabilities (``n x V``). ``parents[i]``
names the row of the previous call that ``prefixes[i, :-1]`` extends, or is
``None`` when rows keep their positions. Cached step functions use it to
reorder their state; stateless ones ignore it.

:func:`model_step_fn` builds one from a :class:`~expansionnet.model.Captioner`
and a set of image features; tests can plug in hand-written step functions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigurationError, ContractError
from .tensor import log_softmax, no_grad
from .vocab import EOS, PAD, SOS

StepFn = Callable[..., np.ndarray]

# never generated: pad marks "finished", sos only opens a sequence
_BANNED = (PAD, SOS)


def _allowed(logp: np.ndarray) -> np.ndarray:
    out = np.array(logp, dtype=float)
    out[..., list(_BANNED)] = -np.inf
    return out


def model_step_fn(
    model, features, feature_valid=None, rows: np.ndarray | None = None, cached: bool = True
) -> StepFn:
    """Encode once, then score prefixes against the encoded memory.

    ``features`` is a single scene (N x d) or a batch (B x N x d). With a
    batch, ``rows`` maps each prefix to its scene; by default prefix i uses
    scene i. ``cached=False`` re-decodes the whole prefix on every call.
    """
    with no_grad():
        memory = model.encode(features, feature_valid).data
    valid = None if feature_valid is None else np.asarray(feature_valid, dtype=bool)
    if memory.ndim == 2:
        memory = memory[None]
        valid = None if valid is None else valid[None]
        rows = None
        single = True
    else:
        single = False
    return memory_step_fn(model, memory, valid, rows, cached, single)


def memory_step_fn(model, memory, valid=None, rows=None, cached: bool = True, single: bool = False) -> StepFn:
    """Step function over an already-encoded batch ``memory`` (B x N x d)."""
    memory = np.asarray(getattr(memory, "data", memory))

    def scene_index(n: int) -> np.ndarray:
        if single:
            return np.zeros(n, dtype=np.int64)
        return np.arange(n) if rows is None else np.asarray(rows)

    if not cached:

        def full_step(prefixes: np.ndarray, parents=None) -> np.ndarray:
            idx = scene_index(prefixes.shape[0])
            with no_grad():
                logits = model.decode_logits(prefixes, memory[idx], None if valid is None else valid[idx])
                return log_softmax(logits[:, -1, :]).data

        return full_step

    state = None

    def step(prefixes: np.ndarray, parents=None) -> np.ndarray:
        nonlocal state
        n, t = prefixes.shape
        if t == 1:
            idx = scene_index(n)
            state = model.start_decode(memory[idx], None if valid is None else valid[idx])
        else:
            if state is None or state.length != t - 1:
                raise ContractError("a cached step function must see prefixes that grow by one token per call")
            if parents is not None:
                state.reorder(parents)
        logits = model.decode_step(state, prefixes[:, -1])
        with no_grad():
            return log_softmax(logits).data

    return step


def greedy_search(step: StepFn, n: int, max_len: int) -> list[list[int]]:
    """Argmax decoding of ``n`` sequences in lockstep until eos or ``max_len``."""
    seqs = np.full((n, 1), SOS, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    while seqs.shape[1] < max_len and not done.all():
        nxt = np.argmax(_allowed(step(seqs)), axis=-1)
        nxt[done] = PAD
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        done |= nxt == EOS
    return [_trim(row) for row in seqs]


def _trim(row: np.ndarray) -> list[int]:
    out = []
    for tok in row:
        tok = int(tok)
        if tok == PAD:
            break
        out.append(tok)
        if tok == EOS:
            break
    return out


def greedy_decode(model, features, feature_valid=None) -> list[int] | list[list[int]]:
    """Greedy caption(s): ``[sos, ..., eos]`` (eos absent if max length hit)."""
    features = np.asarray(getattr(features, "data", features))
    step = model_step_fn(model, features, feature_valid)
    if features.ndim == 2:
        return greedy_search(step, 1, model.config.max_seq_len)[0]
    return greedy_search(step, features.shape[0], model.config.max_seq_len)


def beam_search_steps(step: StepFn, width: int, max_len: int, vocab_size: int) -> list[int]:
    """Beam search with eos retirement and mean-log-prob final ranking.

    Live hypotheses all share one length, so ranking them by summed log-prob
    is the same as ranking by mean. The top ``width`` expansions are kept each
    step; those ending in eos retire and shrink the live beam. Width 1 is
    therefore exactly greedy decoding.
    """
    if width < 1:
        raise ConfigurationError(f"beam width must be at least 1, got {width}")
    if width > vocab_size:
        raise ConfigurationError(f"beam width {width} exceeds vocabulary size {vocab_size}")
    live = np.full((1, 1), SOS, dtype=np.int64)
    live_scores = np.zeros(1)
    parents = None
    finished: list[tuple[float, list[int]]] = []
    slots = width
    while slots > 0 and live.shape[1] < max_len:
        logp = _allowed(step(live, parents))
        V = logp.shape[-1]
        cand = (live_scores[:, None] + logp).reshape(-1)
        order = np.argsort(-cand, kind="stable")[:slots]
        order = order[np.isfinite(cand[order])]
        keep_rows, keep_scores, keep_parents = [], [], []
        for flat in order:
            beam, tok = divmod(int(flat), V)
            seq = [*live[beam].tolist(), tok]
            if tok == EOS:
                finished.append((cand[flat] / (len(seq) - 1), seq))
                slots -= 1
            else:
                keep_rows.append(seq)
                keep_scores.append(cand[flat])
                keep_parents.append(beam)
        if not keep_rows:
            break
        live = np.asarray(keep_rows, dtype=np.int64)
        live_scores = np.asarray(keep_scores)
        parents = np.asarray(keep_parents, dtype=np.int64)
    if slots > 0 and live.shape[1] >= max_len:
        for seq, score in zip(live.tolist(), live_scores):
            finished.append((score / (len(seq) - 1), seq))
    best = max(range(len(finished)), key=lambda i: (finished[i][0], -i))
    return finished[best][1]


def beam_search(model, features, width: int, feature_valid=None) -> list[int]:
    step = model_step_fn(model, np.asarray(getattr(features, "data", features)), feature_valid)
    return beam_search_steps(step, width, model.config.max_seq_len, model.config.vocab_size)


@dataclass
class SampledCaption:
    tokens: list[int]
    logprobs: np.ndarray  # log p(token_t | prefix) for every token after sos


def sample_search(
    step: StepFn, n: int, max_len: int, rng: np.random.Generator, temperature: float = 1.0
) -> list[SampledCaption]:
    """Multinomial rollouts; recorded log-probs are under the untempered model."""
    seqs = np.full((n, 1), SOS, dtype=np.int64)
    logps = np.zeros((n, 0))
    done = np.zeros(n, dtype=bool)
    while seqs.shape[1] < max_len and not done.all():
        logp = step(seqs)
        allowed = _allowed(logp)
        if temperature <= 0:
            nxt = np.argmax(allowed, axis=-1)
        else:
            scaled = allowed / temperature
            scaled -= scaled.max(axis=-1, keepdims=True)
            probs = np.exp(scaled)
            probs /= probs.sum(axis=-1, keepdims=True)
            u = rng.random(n)
            nxt = (probs.cumsum(axis=-1) <= u[:, None]).sum(axis=-1)
            nxt = np.minimum(nxt, logp.shape[-1] - 1)
        nxt[done] = PAD
        picked = np.where(done, 0.0, logp[np.arange(n), nxt])
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        logps = np.concatenate([logps, picked[:, None]], axis=1)
        done |= nxt == EOS
    out = []
    for row, lp in zip(seqs, logps):
        toks = _trim(row)
        out.append(SampledCaption(toks, lp[: len(toks) - 1].copy()))
    return out


def sample_decode(
    model, features, k: int, temperature: float = 1.0, rng_seed: int = 0, feature_valid=None
) -> list[SampledCaption]:
    """``k`` independent rollouts for one scene, reproducible under ``rng_seed``."""
    step = model_step_fn(model, np.asarray(getattr(features, "data", features)), feature_valid)
    return sample_search(step, k, model.config.max_seq_len, np.random.default_rng(rng_seed), temperature)
