"""Finite probability vectors and the information quantities built on them.

All quantities are in nats. A "simplex" is a plain 1-D ``numpy`` array of
non-negative entries summing to one; :func:`simplex` validates and
normalizes raw input, everything else assumes validated arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "AbsoluteContinuityViolation",
    "ResourceParams",
    "simplex",
    "is_simplex",
    "clamp_simplex",
    "entropy",
    "kl",
    "rate",
    "gibbs_posterior",
    "ema_update",
    "sample",
]

SIMPLEX_ATOL = 1e-9
PROB_FLOOR = 1e-12


class AbsoluteContinuityViolation(ValueError):
    """Raised by :func:`kl` when p puts mass where q has none."""


@dataclass(frozen=True)
class ResourceParams:
    """Resource parameters shared by all learners.

    beta1: selector inverse temperature (1/nats), > 0.
    beta2: expert inverse temperature, > 0.
    lambda1: EMA momentum for the per-expert output priors, in [0, 1].
    lambda2: EMA momentum for the expert-selection prior, in [0, 1].
    gamma: discount factor for sequential problems, in [0, 1].
    """

    beta1: float
    beta2: float
    lambda1: float = 0.99
    lambda2: float = 0.99
    gamma: float = 0.99

    def __post_init__(self):
        if not (self.beta1 > 0 and self.beta2 > 0):
            raise ValueError(f"beta1 and beta2 must be positive, got {self.beta1}, {self.beta2}")
        for name in ("lambda1", "lambda2", "gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def simplex(probs) -> np.ndarray:
    """Validate a probability vector; returns a float64 copy."""
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size < 1:
        raise ValueError(f"simplex must be a 1-D vector with at least one entry, got shape {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("simplex entries must be finite and non-negative")
    if abs(p.sum() - 1.0) > SIMPLEX_ATOL:
        raise ValueError(f"simplex entries must sum to 1 within {SIMPLEX_ATOL}, got {p.sum()!r}")
    return p.copy()


def is_simplex(p: np.ndarray, atol: float = SIMPLEX_ATOL) -> bool:
    p = np.asarray(p, dtype=float)
    return (
        p.ndim == 1
        and p.size >= 1
        and bool(np.all(np.isfinite(p)))
        and bool(np.all(p >= 0))
        and abs(float(p.sum()) - 1.0) <= atol
    )


def clamp_simplex(p: np.ndarray, floor: float = PROB_FLOOR) -> np.ndarray:
    """Lift entries below ``floor`` and renormalize.

    Applied to running priors before they appear as the second argument of
    a KL so that underflowed entries cannot poison learning; :func:`kl`
    itself never clamps.
    """
    q = np.maximum(np.asarray(p, dtype=float), floor)
    return q / q.sum()


def entropy(p: np.ndarray) -> float:
    """Shannon entropy -sum p ln p in nats, with 0 ln 0 := 0."""
    p = np.asarray(p, dtype=float)
    nz = p > 0
    return float(-np.sum(p[nz] * np.log(p[nz])))


def kl(p: np.ndarray, q: np.ndarray) -> float:
    """Kullback-Leibler divergence sum p ln(p/q) in nats.

    Requires absolute continuity: any entry with q == 0 must have p == 0.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(q[support] == 0):
        raise AbsoluteContinuityViolation("p has mass where q is zero")
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def rate(posteriors, weights: np.ndarray, prior: np.ndarray) -> float:
    """Average information cost sum_x w(x) KL(posterior_x || prior).

    Equals the mutual information of the induced joint when ``prior`` is
    the exact weighted marginal of the posteriors.
    """
    weights = np.asarray(weights, dtype=float)
    prior = np.asarray(prior, dtype=float)
    if len(posteriors) != weights.size:
        raise ValueError(f"{len(posteriors)} posteriors but {weights.size} weights")
    total = 0.0
    for w, post in zip(weights, posteriors):
        post = np.asarray(post, dtype=float)
        if post.shape != prior.shape:
            raise ValueError(f"dimension mismatch: posterior {post.shape} vs prior {prior.shape}")
        if w > 0:
            total += w * kl(post, prior)
    return float(total)


def gibbs_posterior(prior: np.ndarray, scores: np.ndarray, beta: float) -> np.ndarray:
    """Tilt ``prior`` by ``exp(beta * scores)`` and renormalize.

    Computed in log space with max-score subtraction, so arbitrarily large
    beta cannot overflow; beta = 0 returns the prior unchanged.
    """
    prior = np.asarray(prior, dtype=float)
    scores = np.asarray(scores, dtype=float)
    if prior.shape != scores.shape:
        raise ValueError(f"dimension mismatch: prior {prior.shape} vs scores {scores.shape}")
    if beta < 0:
        raise ValueError(f"beta must be non-negative, got {beta}")
    with np.errstate(divide="ignore"):
        logits = np.log(prior) + beta * scores
    logits -= logits.max()
    post = np.exp(logits)
    return post / post.sum()


def ema_update(prior: np.ndarray, posterior: np.ndarray, lam: float) -> np.ndarray:
    """Exponential running mean lam * prior + (1 - lam) * posterior."""
    prior = np.asarray(prior, dtype=float)
    posterior = np.asarray(posterior, dtype=float)
    if prior.shape != posterior.shape:
        raise ValueError(f"dimension mismatch: {prior.shape} vs {posterior.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam must lie in [0, 1], got {lam}")
    return lam * prior + (1.0 - lam) * posterior


def sample(p: np.ndarray, rng: np.random.Generator) -> int:
    """Draw an index i with probability p[i] by inverse-CDF lookup."""
    p = np.asarray(p, dtype=float)
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), p.size - 1))


def sample_rows(rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorized :func:`sample` over the rows of a (B, K) matrix."""
    rows = np.asarray(rows, dtype=float)
    cdf = np.cumsum(rows, axis=1)
    u = rng.random(rows.shape[0]) * cdf[:, -1]
    idx = (u[:, None] >= cdf).sum(axis=1)
    return np.minimum(idx, rows.shape[1] - 1)
