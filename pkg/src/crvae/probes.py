"""Frozen-representation probes: a linear softmax classifier and cosine KNN."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_labels, check_latents

KNN_EPS = 1e-8


@dataclass
class ProbeResult:
    top1_accuracy: float
    kind: str
    n_train: int
    n_eval: int
    params: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


class LinearProbe(ClassifierMixin, BaseEstimator):
    """Affine map + softmax trained with cross entropy by mini-batch SGD with momentum.

    Parameters
    ----------
    epochs : int
        Passes over the training set.
    learning_rate : float
    momentum : float
    batch_size : int
    random_state : int
        Seeds the per-epoch shuffle. Weights start at zero.
    """

    def __init__(self, epochs=200, learning_rate=1e-3, momentum=0.9, batch_size=256,
                 random_state=0):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X = check_latents(X, name="X")
        y = check_labels(y, X.shape[0], name="y")
        self.classes_, y_index = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("linear probe needs at least two classes in the training set")
        n, d = X.shape
        k = len(self.classes_)
        rng = np.random.default_rng(self.random_state)
        # Zero start: the objective is convex, and a symmetric start keeps the
        # probe exactly equivariant to permutations of the feature axes.
        W = np.zeros((d, k))
        b = np.zeros(k)
        vW = np.zeros_like(W)
        vb = np.zeros_like(b)
        onehot = np.eye(k)[y_index]
        self.loss_curve_ = []
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                xb = X[idx]
                err = (softmax(xb @ W + b, axis=1) - onehot[idx]) / len(idx)
                vW = self.momentum * vW + xb.T @ err
                vb = self.momentum * vb + err.sum(axis=0)
                W -= self.learning_rate * vW
                b -= self.learning_rate * vb
            logp = log_softmax(X @ W + b, axis=1)
            self.loss_curve_.append(float(-np.mean(logp[np.arange(n), y_index])))
        self.coef_ = W
        self.intercept_ = b
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_latents(X, name="X")
        return X @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


def _unit(X):
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    return X / np.maximum(norms, 1e-12)


class CosineKNNClassifier(ClassifierMixin, BaseEstimator):
    """k-nearest neighbours under cosine similarity with inverse-distance votes.

    Each of the ``n_neighbors`` most similar training points votes for its
    label with weight ``1 / (1 - cos + 1e-8)``. Ties in the vote go to the
    smallest label.
    """

    def __init__(self, n_neighbors=200, chunk_size=1024):
        self.n_neighbors = n_neighbors
        self.chunk_size = chunk_size

    def fit(self, X, y):
        X = check_latents(X, name="X")
        y = check_labels(y, X.shape[0], name="y")
        self.classes_, self._y_index = np.unique(y, return_inverse=True)
        self._train = _unit(X)
        return self

    def predict(self, X):
        check_is_fitted(self, "classes_")
        X = _unit(check_latents(X, name="X"))
        k = min(self.n_neighbors, self._train.shape[0])
        out = np.empty(X.shape[0], dtype=np.int64)
        for start in range(0, X.shape[0], self.chunk_size):
            sim = X[start:start + self.chunk_size] @ self._train.T
            nearest = np.argsort(-sim, axis=1, kind="stable")[:, :k]
            s = np.take_along_axis(sim, nearest, axis=1)
            weight = 1.0 / (np.clip(1.0 - s, 0.0, None) + KNN_EPS)
            votes = np.zeros((len(s), len(self.classes_)))
            rows = np.repeat(np.arange(len(s)), k)
            np.add.at(votes, (rows, self._y_index[nearest].ravel()), weight.ravel())
            out[start:start + len(s)] = np.argmax(votes, axis=1)
        return self.classes_[out]


def linear_probe(train_latents, train_labels, eval_latents, eval_labels, epochs=200,
                 lr=1e-3, momentum=0.9, batch_size=256, random_state=0):
    """Train a linear probe on frozen latents and report eval top-1 accuracy."""
    probe = LinearProbe(epochs=epochs, learning_rate=lr, momentum=momentum,
                        batch_size=batch_size, random_state=random_state)
    probe.fit(train_latents, train_labels)
    eval_labels = check_labels(eval_labels, len(eval_latents), name="eval_labels")
    acc = float(np.mean(probe.predict(eval_latents) == eval_labels))
    return ProbeResult(acc, "linear", len(train_labels), len(eval_labels),
                       {"epochs": epochs, "lr": lr, "momentum": momentum,
                        "batch_size": batch_size})


def knn_classify(train_latents, train_labels, query_latents, k=200, query_labels=None):
    """Predict labels for ``query_latents``; also returns accuracy when labels are given.

    Returns ``(predictions, ProbeResult or None)``.
    """
    train_latents = check_latents(train_latents, name="train_latents")
    if k < 1 or k > train_latents.shape[0]:
        raise ValueError(f"k must lie in [1, {train_latents.shape[0]}], got {k}")
    clf = CosineKNNClassifier(n_neighbors=k).fit(train_latents, train_labels)
    pred = clf.predict(query_latents)
    if query_labels is None:
        return pred, None
    query_labels = check_labels(query_labels, len(pred), name="query_labels")
    acc = float(np.mean(pred == query_labels))
    return pred, ProbeResult(acc, "knn", len(train_latents), len(pred), {"k": k})
