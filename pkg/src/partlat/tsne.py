"""Exact (dense) t-SNE projection of latent vectors to 2D.

Small-M implementation for the feature-space scatter view: full pairwise
affinities, per-point precision found by bisection on the entropy target,
early exaggeration, and momentum gradient descent with per-coordinate gains.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LatentField

ENTROPY_TOL = 1e-5
BISECT_STEPS = 50
EXAGGERATION = 12.0
EXAG_CUTOFF = 250
MOMENTUM_EARLY = 0.5
MOMENTUM_LATE = 0.8
MOMENTUM_SWITCH = 250
MIN_GAIN = 0.01
P_FLOOR = 1e-12


@dataclass
class Projection2D:
    indices: np.ndarray   # particle indices the rows correspond to
    points: np.ndarray    # (M, 2) float64, zero-centered
    perplexity: float
    iterations: int
    seed: int

    @property
    def n(self) -> int:
        return self.points.shape[0]


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    s = np.einsum("ij,ij->i", x, x)
    d2 = s[:, None] + s[None, :] - 2.0 * (x @ x.T)
    np.maximum(d2, 0.0, out=d2)
    np.fill_diagonal(d2, 0.0)
    return d2


def _conditional_probs(d2: np.ndarray, perplexity: float) -> np.ndarray:
    """Row-stochastic conditional affinities with per-row precision chosen by
    bisection so each row's entropy matches log(perplexity)."""
    m = d2.shape[0]
    target = np.log(perplexity)
    p = np.zeros((m, m))
    for i in range(m):
        row = np.delete(d2[i], i)
        beta = 1.0
        beta_lo, beta_hi = -np.inf, np.inf
        probs = np.exp(-row * beta)
        for _ in range(BISECT_STEPS):
            total = probs.sum()
            if total <= 0.0:
                entropy = 0.0
            else:
                entropy = np.log(total) + beta * float((row * probs).sum()) / total
            diff = entropy - target
            if abs(diff) < ENTROPY_TOL:
                break
            if diff > 0:
                beta_lo = beta
                beta = beta * 2.0 if beta_hi == np.inf else (beta + beta_hi) / 2.0
            else:
                beta_hi = beta
                beta = beta / 2.0 if beta_lo == -np.inf else (beta + beta_lo) / 2.0
            probs = np.exp(-row * beta)
        total = probs.sum()
        if total > 0.0:
            probs = probs / total
        else:
            probs = np.full(m - 1, 1.0 / (m - 1))  # all distances identical/huge
        p[i, :i] = probs[:i]
        p[i, i + 1:] = probs[i:]
    return p


def project_tsne(latents, sample_indices=None, perplexity: float = 30.0,
                 iterations: int = 500, seed: int = 0) -> Projection2D:
    """Project latent rows to 2D.

    ``latents`` is a LatentField or an (N, v) array; ``sample_indices``
    restricts the projection to those rows (the returned ``indices``).
    Requires M >= 3 * perplexity rows.
    """
    if isinstance(latents, LatentField):
        x = np.asarray(latents.latents, dtype=np.float64)
    else:
        x = np.asarray(latents, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected (N,v) latents, got shape {x.shape}")
    if sample_indices is not None:
        indices = np.asarray(sample_indices, dtype=np.int64)
        x = x[indices]
    else:
        indices = np.arange(x.shape[0], dtype=np.int64)
    m = x.shape[0]
    if perplexity <= 0:
        raise ValueError(f"perplexity must be > 0, got {perplexity}")
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    if m < 3 * perplexity:
        raise ValueError(
            f"{m} rows is too few for perplexity {perplexity}; need at least "
            f"{int(np.ceil(3 * perplexity))}")

    d2 = _pairwise_sq_dists(x)
    p = _conditional_probs(d2, perplexity)
    p = p + p.T
    p /= p.sum()
    np.maximum(p, P_FLOOR, out=p)

    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, 1e-4, size=(m, 2))
    vel = np.zeros_like(y)
    gains = np.ones_like(y)
    eta = max(m / 12.0, 50.0)
    exag_steps = min(EXAG_CUTOFF, iterations)
    p_exag = p * EXAGGERATION

    for it in range(iterations):
        p_eff = p_exag if it < exag_steps else p
        momentum = MOMENTUM_EARLY if it < MOMENTUM_SWITCH else MOMENTUM_LATE
        s = np.einsum("ij,ij->i", y, y)
        num = s[:, None] + s[None, :] - 2.0 * (y @ y.T)
        np.maximum(num, 0.0, out=num)
        num = 1.0 / (1.0 + num)
        np.fill_diagonal(num, 0.0)
        q = num / num.sum()
        np.maximum(q, P_FLOOR, out=q)
        pq = (p_eff - q) * num
        grad = 4.0 * (pq.sum(axis=1)[:, None] * y - pq @ y)
        flipped = np.sign(grad) != np.sign(vel)
        gains = np.where(flipped, gains + 0.2, gains * 0.8)
        np.maximum(gains, MIN_GAIN, out=gains)
        vel = momentum * vel - eta * (gains * grad)
        y = y + vel
        y = y - y.mean(axis=0)

    if not np.all(np.isfinite(y)):
        raise FloatingPointError("t-SNE diverged to non-finite coordinates")
    return Projection2D(indices=indices, points=y, perplexity=float(perplexity),
                        iterations=int(iterations), seed=int(seed))
