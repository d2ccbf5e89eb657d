"""Three-way categorical policy head (Wait, GuessPos, GuessNeg)."""

from __future__ import annotations

import numpy as np

from .autodiff import NumericError


def softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def entropy(logits: np.ndarray) -> np.ndarray:
    logp = log_softmax(logits)
    return -(np.exp(logp) * logp).sum(axis=-1)


def sample_from_uniform(logits: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling; `u` holds one U[0,1) draw per row."""
    cdf = np.cumsum(softmax(logits), axis=-1)
    idx = (np.asarray(u)[..., None] >= cdf[..., :-1]).sum(axis=-1)
    return idx.astype(np.int64)


def categorical_head(logits, rng: np.random.Generator) -> tuple[int, float, float]:
    """Sample one action; return (action, log_prob, entropy)."""
    logits = np.asarray(logits, dtype=np.float64)
    a = int(sample_from_uniform(logits, rng.random()))
    logp = log_softmax(logits)
    return a, float(logp[a]), float(entropy(logits))
