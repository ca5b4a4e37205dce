"""Principal component analysis on small dense matrices.

One implementation shared by patch shape descriptors, latent-histogram
tracking, and any ad-hoc dimensionality reduction. Deterministic: the
eigendecomposition of the covariance matrix is used directly and each
component's sign is fixed so its largest-magnitude entry is positive.
"""
from __future__ import annotations

import numpy as np

from .errors import InsufficientDataError


def pca(vectors: np.ndarray, out_dim: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project ``vectors`` (M, v) onto their top ``out_dim`` principal axes.

    Returns ``(basis, mean, projected)`` where ``basis`` is (out_dim, v)
    with rows ordered by descending explained variance, ``mean`` is the
    column mean (v,), and ``projected`` is (M, out_dim).

    Raises InsufficientDataError for fewer than two rows and ValueError
    for an out_dim outside [1, min(M, v)].
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {x.shape}")
    m, v = x.shape
    if m < 2:
        raise InsufficientDataError(f"PCA needs at least 2 rows, got {m}")
    if not 1 <= out_dim <= min(m, v):
        raise ValueError(f"out_dim={out_dim} not in [1, {min(m, v)}]")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (m - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    # eigh returns ascending order; take the top out_dim, largest first
    order = np.argsort(eigvals, kind="stable")[::-1][:out_dim]
    basis = eigvecs[:, order].T.copy()
    for row in basis:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    projected = centered @ basis.T
    return basis, mean, projected
