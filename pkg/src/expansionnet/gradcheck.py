"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .model import Captioner, ModelConfig
from .tensor import Tensor, no_grad
from .training import xe_loss
from .vocab import SOS

# Floor on the relative-error denominator so entries whose true gradient is
# ~0 are judged by absolute error (FD round-off is ~1e-11 at h=1e-5).
ABS_FLOOR = 1e-7


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    n_entries: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(loss_fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().item()
            flat[i] = orig - h
            down = loss_fn().item()
            flat[i] = orig
            out[i] = (up - down) / (2 * h)
    return grad


def check_gradients(
    loss_fn: Callable[[], Tensor],
    named_params: Iterable[tuple[str, Tensor]],
    h: float = 1e-5,
) -> list[GradCheckResult]:
    """Compare backprop gradients with central differences for every parameter."""
    named_params = list(named_params)
    for _, p in named_params:
        p.grad = None
    loss_fn().backward()
    results = []
    for name, p in named_params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_gradient(loss_fn, p, h)
        err = relative_error(analytic, numeric)
        results.append(GradCheckResult(name, float(err.max()) if err.size else 0.0, p.size))
    return results


def model_gradient_check(config=None, seed: int = 0, n_features: int = 2, seq_len: int = 3, h: float = 1e-5):
    """Check every parameter of a captioner under the teacher-forced loss.

    Defaults to the tiny configuration with ``n_features`` regions and a
    ``seq_len``-token decoder input (``<sos>`` plus random tokens).
    """
    config = config or ModelConfig.tiny()
    model = Captioner(config)
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(n_features, config.d_feature))
    tokens = np.concatenate([[SOS], rng.integers(3, config.vocab_size, size=seq_len)])
    return check_gradients(lambda: xe_loss(model(feats, tokens[:-1]), tokens[1:]), model.named_parameters(), h)
