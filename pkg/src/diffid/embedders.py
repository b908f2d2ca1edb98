"""Toy embedding models used by the filtering stage.

PixelProjectionEmbedder is a fixed seeded projection (no training);
ToyJointEmbedder puts text and images into one space the same way CLIP
would; ReidEmbedder is the standard identity-classification recipe with
the unit-normalized penultimate layer as the retrieval embedding.
"""

import hashlib
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import InvalidArgument

_NORM_EPS = 1e-12


def flatten_images(X) -> np.ndarray:
    """Stack a list/array of images into an (n, pixels) float matrix."""
    arr = np.stack([np.asarray(x, dtype=np.float64) for x in X])
    return arr.reshape(arr.shape[0], -1)


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n < _NORM_EPS:
        raise InvalidArgument("cannot normalize a zero vector")
    return v / n


class PixelProjectionEmbedder:
    """Seeded Gaussian projection of flattened pixels, L2-normalized.

    A constant feature is appended before projecting so the all-zero image
    still maps to a well-defined direction.
    """

    def __init__(self, image_shape, dim: int = 32, seed: int = 7):
        d = int(np.prod(image_shape))
        rng = np.random.default_rng(seed)
        self.image_shape = tuple(image_shape)
        self.dim = dim
        self._proj = rng.normal(0.0, 1.0 / np.sqrt(d + 1), size=(dim, d + 1))

    def embed(self, image) -> np.ndarray:
        flat = np.asarray(image, dtype=np.float64).ravel()
        aug = np.concatenate([flat, [1.0]])
        return _unit(self._proj @ aug)


class ToyJointEmbedder:
    """Deterministic text+image embedder sharing one d-dimensional space."""

    def __init__(self, image_shape, dim: int = 32, seed: int = 7):
        self.dim = dim
        self._image = PixelProjectionEmbedder(image_shape, dim=dim, seed=seed)

    def embed_text(self, text: str) -> np.ndarray:
        digest = hashlib.blake2b(b"joint-text:" + text.encode("utf-8"), digest_size=8).digest()
        rng = np.random.default_rng(int.from_bytes(digest, "little"))
        return _unit(rng.standard_normal(self.dim))

    def embed_image(self, image) -> np.ndarray:
        return self._image.embed(image)


# --- shared softmax-MLP core (one tanh hidden layer + linear head) ---

def mlp_init(rng, d_in: int, d_hidden: int, n_classes: int) -> dict:
    return {
        "W1": rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_hidden)),
        "b1": np.zeros(d_hidden),
        "W2": rng.normal(0.0, 1.0 / np.sqrt(d_hidden), size=(d_hidden, n_classes)),
        "b2": np.zeros(n_classes),
    }


def mlp_forward(params: dict, X: np.ndarray):
    """Returns (hidden activations, class probabilities)."""
    hidden = np.tanh(X @ params["W1"] + params["b1"])
    logits = hidden @ params["W2"] + params["b2"]
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return hidden, e / e.sum(axis=1, keepdims=True)


def mlp_grads(params: dict, X: np.ndarray, hidden: np.ndarray, probs: np.ndarray,
              targets: np.ndarray) -> dict:
    """Cross-entropy gradients; targets are (n, k) probability rows."""
    n = X.shape[0]
    dlogits = (probs - targets) / n
    dhidden = dlogits @ params["W2"].T * (1.0 - hidden**2)
    return {
        "W2": hidden.T @ dlogits,
        "b2": dlogits.sum(axis=0),
        "W1": X.T @ dhidden,
        "b1": dhidden.sum(axis=0),
    }


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    return float(-np.mean(np.sum(targets * np.log(probs + 1e-12), axis=1)))


class ReidEmbedder(TransformerMixin, BaseEstimator):
    """Identity-classification MLP whose penultimate layer is the embedding.

    fit(X, y) trains full-batch gradient descent with momentum on images X
    (n, C, H, W) and identity labels y; transform(X) returns unit-norm
    hidden activations. Deterministic given `seed`.
    """

    def __init__(self, hidden_dim=32, epochs=200, learning_rate=0.5,
                 momentum=0.9, seed=0):
        self.hidden_dim = hidden_dim
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.seed = seed

    def fit(self, X, y):
        X = flatten_images(X)
        y = np.asarray(y)
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise InvalidArgument("need at least two identities to train")
        self.feature_mean_ = X.mean(axis=0)
        Xc = X - self.feature_mean_
        targets = np.eye(len(self.classes_))[y_idx]

        rng = np.random.default_rng(self.seed)
        params = mlp_init(rng, Xc.shape[1], self.hidden_dim, len(self.classes_))
        velocity = {k: np.zeros_like(v) for k, v in params.items()}
        trace = []
        for _ in range(self.epochs):
            hidden, probs = mlp_forward(params, Xc)
            trace.append(cross_entropy(probs, targets))
            grads = mlp_grads(params, Xc, hidden, probs, targets)
            for k in params:
                velocity[k] = self.momentum * velocity[k] - self.learning_rate * grads[k]
                params[k] = params[k] + velocity[k]
        self.params_ = params
        self.loss_trace_ = trace
        return self

    def _hidden(self, X):
        check_is_fitted(self, "params_")
        Xc = flatten_images(X) - self.feature_mean_
        hidden, probs = mlp_forward(self.params_, Xc)
        return hidden, probs

    def transform(self, X) -> np.ndarray:
        """Unit-norm embeddings, one row per image."""
        hidden, _ = self._hidden(X)
        norms = np.linalg.norm(hidden, axis=1, keepdims=True)
        if np.any(norms < _NORM_EPS):
            raise InvalidArgument("degenerate (zero) embedding encountered")
        return hidden / norms

    def predict_proba(self, X) -> np.ndarray:
        _, probs = self._hidden(X)
        return probs


@dataclass(frozen=True)
class EmbeddingGallery:
    """Per-identity unit-norm centroid embeddings of the source images."""

    centroids: dict
    dim: int
    source: str = ""

    def __post_init__(self):
        for label, c in self.centroids.items():
            c = np.asarray(c, dtype=np.float64)
            if c.shape != (self.dim,):
                raise InvalidArgument(f"centroid for {label!r} has width {c.shape}, want {self.dim}")
            if abs(np.linalg.norm(c) - 1.0) > 1e-9:
                raise InvalidArgument(f"centroid for {label!r} is not unit-norm")

    def centroid(self, label) -> np.ndarray:
        return self.centroids[label]


def build_gallery(embeddings: np.ndarray, labels, source: str = "") -> EmbeddingGallery:
    """Normalized per-identity mean of the given embedding rows."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if embeddings.ndim != 2 or len(labels) != embeddings.shape[0]:
        raise InvalidArgument("need one label per embedding row")
    centroids = {}
    for label in np.unique(labels):
        mean = embeddings[labels == label].mean(axis=0)
        centroids[str(label)] = _unit(mean)
    return EmbeddingGallery(centroids=centroids, dim=embeddings.shape[1], source=source)
