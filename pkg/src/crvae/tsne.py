"""Exact O(N^2) t-SNE for small latent sets."""

from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import pdist, squareform
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_latents

MAX_POINTS = 5000


class TSNEResult(NamedTuple):
    embedding: np.ndarray
    kl_initial: float
    kl_final: float


def _conditional_affinities(sq_dist, perplexity, tol=1e-5, max_iter=100):
    """Row-wise Gaussian affinities whose entropy matches log(perplexity)."""
    n = sq_dist.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    for i in range(n):
        d = np.delete(sq_dist[i], i)
        beta, lo, hi = 1.0, 0.0, np.inf
        for _ in range(max_iter):
            w = np.exp(-(d - d.min()) * beta)
            s = w.sum()
            p = w / s
            entropy = beta * np.sum(p * (d - d.min())) + np.log(s)
            diff = entropy - target
            if abs(diff) < tol:
                break
            if diff > 0:
                lo = beta
                beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
            else:
                hi = beta
                beta = (beta + lo) / 2.0
        P[i, np.arange(n) != i] = p
    return P


def joint_probabilities(X, perplexity):
    """Symmetrised, normalised input affinities P."""
    P = _conditional_affinities(squareform(pdist(X, "sqeuclidean")), perplexity)
    P = (P + P.T) / (2.0 * P.shape[0])
    return np.maximum(P, 1e-12)


def _student_q(Y):
    num = 1.0 / (1.0 + squareform(pdist(Y, "sqeuclidean")))
    np.fill_diagonal(num, 0.0)
    return num, np.maximum(num / num.sum(), 1e-12)


def kl_divergence(P, Y):
    """KL(P || Q) for embedding ``Y``, diagonal excluded."""
    _, Q = _student_q(Y)
    mask = ~np.eye(len(P), dtype=bool)
    return float(np.sum(P[mask] * np.log(P[mask] / Q[mask])))


def tsne_2d(latents, perplexity=30.0, iterations=1000, rng=None, early_exaggeration=12.0,
            exaggeration_iters=250, learning_rate=None):
    """Embed ``latents`` in two dimensions with exact t-SNE.

    Gradient descent uses momentum 0.5 then 0.8 (switching when early
    exaggeration ends) and per-coordinate adaptive gains. Returns the final
    coordinates with KL(P || Q) at initialisation and at the end.
    """
    X = check_latents(latents)
    n = X.shape[0]
    if n > MAX_POINTS:
        raise ValueError(
            f"exact t-SNE is limited to {MAX_POINTS} points, got {n}; subsample first"
        )
    if not 0 < perplexity < n / 3:
        raise ValueError(f"perplexity must lie in (0, N/3) = (0, {n / 3:.1f}), got {perplexity}")
    rng = np.random.default_rng(rng)
    lr = max(n / 12.0, 50.0) if learning_rate is None else learning_rate
    P = joint_probabilities(X, perplexity)
    Y = 1e-4 * rng.standard_normal((n, 2))
    kl_initial = kl_divergence(P, Y)
    update = np.zeros_like(Y)
    gains = np.ones_like(Y)
    for it in range(iterations):
        exaggerate = it < exaggeration_iters
        momentum = 0.5 if exaggerate else 0.8
        PP = P * early_exaggeration if exaggerate else P
        num, Q = _student_q(Y)
        W = (PP - Q) * num
        grad = 4.0 * (np.diag(W.sum(axis=1)) - W) @ Y
        same_sign = np.sign(grad) == np.sign(update)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2).clip(0.01, None)
        update = momentum * update - lr * gains * grad
        Y = Y + update
        Y -= Y.mean(axis=0)
    return TSNEResult(Y, kl_initial, kl_divergence(P, Y))


class ExactTSNE(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`tsne_2d` (fit_transform only)."""

    def __init__(self, perplexity=30.0, n_iter=1000, early_exaggeration=12.0,
                 exaggeration_iters=250, learning_rate=None, random_state=None):
        self.perplexity = perplexity
        self.n_iter = n_iter
        self.early_exaggeration = early_exaggeration
        self.exaggeration_iters = exaggeration_iters
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y=None):
        self.fit_transform(X)
        return self

    def fit_transform(self, X, y=None):
        result = tsne_2d(X, self.perplexity, self.n_iter, self.random_state,
                         self.early_exaggeration, self.exaggeration_iters, self.learning_rate)
        self.embedding_ = result.embedding
        self.initial_kl_divergence_ = result.kl_initial
        self.kl_divergence_ = result.kl_final
        return self.embedding_
