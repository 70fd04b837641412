"""Feature aggregation: pull per-pixel features toward frozen class prototypes.

The objective is a bidirectional, distance-weighted soft-assignment loss
between features and prototypes. The first term is the expected cosine
distance from each pixel feature to the prototypes under the pixel-to-class
posterior; the second term runs the other way (class-to-pixel posterior over
every pixel in the batch) and prevents the collapse where all features crowd
a single prototype. Softmax logits use raw dot products scaled by a
temperature; distances are cosine. ``normalize_features`` optionally
L2-normalizes features before the dot product (off by default).

``FeatureAggregator`` wraps the loss in a small sklearn-style trainer for a
per-pixel affine feature extractor, enough to demonstrate the clustering
behavior on toy data.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ValidationError


def _softmax(z: np.ndarray, axis: int) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _check_inputs(features: np.ndarray, prototypes: np.ndarray, kappa: float):
    features = np.asarray(features, dtype=np.float64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if features.ndim != 3:
        raise ValidationError(f"features: expected B x N x d array, got {features.shape}")
    if prototypes.ndim != 2:
        raise ValidationError(f"prototypes: expected K x d array, got {prototypes.shape}")
    if prototypes.shape[0] < 2:
        raise ValidationError("prototypes: need at least 2 classes")
    if features.shape[2] != prototypes.shape[1]:
        raise ValidationError(
            f"feature dim {features.shape[2]} != prototype dim {prototypes.shape[1]}"
        )
    if not kappa > 0:
        raise ValidationError(f"temperature must be positive, got {kappa}")
    return features, prototypes


def ct_posteriors(features, prototypes, kappa: float = 1.0,
                  normalize_features: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Both soft-assignment posteriors for a batch of pixel features.

    Returns ``(pixel_to_class, class_to_pixel)`` where the first is B x N x K
    (softmax over classes per pixel) and the second is K x (B*N) (softmax
    over every pixel in the batch, per class). Rows of both sum to 1.
    """
    features, prototypes = _check_inputs(features, prototypes, kappa)
    batch, pixels, dim = features.shape
    flat = features.reshape(batch * pixels, dim)
    if normalize_features:
        norms = np.linalg.norm(flat, axis=1, keepdims=True)
        if (norms == 0).any():
            raise ValidationError("zero-norm feature cannot be normalized")
        flat = flat / norms
    logits = flat @ prototypes.T / kappa
    pixel_to_class = _softmax(logits, axis=1).reshape(batch, pixels, -1)
    class_to_pixel = _softmax(logits, axis=0).T
    return pixel_to_class, class_to_pixel


def cosine_distances(features_flat: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Pairwise cosine distances, (P, K); raises on zero-norm rows."""
    f_norm = np.linalg.norm(features_flat, axis=1)
    c_norm = np.linalg.norm(prototypes, axis=1)
    if (f_norm == 0).any():
        raise ValidationError("zero-norm feature: cosine distance undefined")
    if (c_norm == 0).any():
        raise ValidationError("zero-norm prototype: cosine distance undefined")
    sims = (features_flat @ prototypes.T) / np.outer(f_norm, c_norm)
    return 1.0 - sims


def nearest_prototype_distance(features, prototypes) -> np.ndarray:
    """Per-pixel cosine distance to the closest prototype; flat (P,) array."""
    features = np.asarray(features, dtype=np.float64)
    flat = features.reshape(-1, features.shape[-1])
    return cosine_distances(flat, np.asarray(prototypes, dtype=np.float64)).min(axis=1)


def ct_loss(features, prototypes, kappa: float = 1.0,
            normalize_features: bool = False) -> tuple[float, np.ndarray]:
    """Aggregation loss and its analytic gradient w.r.t. the features.

    The loss is::

        mean_pixels sum_k d(c_k, f) * p(k | f)
        + mean_classes sum_pixels d(c_k, f) * p(pixel | c_k)

    with cosine distance d and the two posteriors of :func:`ct_posteriors`.
    Returns ``(loss, grad)`` with ``grad`` shaped like ``features``.
    """
    features, prototypes = _check_inputs(features, prototypes, kappa)
    batch, pixels, dim = features.shape
    num_classes = prototypes.shape[0]
    raw = features.reshape(batch * pixels, dim)

    f_norm = np.linalg.norm(raw, axis=1)
    if (f_norm == 0).any():
        raise ValidationError("zero-norm feature: cosine distance undefined")
    if normalize_features:
        flat = raw / f_norm[:, None]
    else:
        flat = raw

    total = flat.shape[0]
    dist = cosine_distances(flat, prototypes)
    logits = flat @ prototypes.T / kappa
    p2c = _softmax(logits, axis=1)          # (P, K), rows sum to 1
    c2p = _softmax(logits, axis=0)          # (P, K), columns sum to 1

    loss = float((dist * p2c).sum() / total + (dist * c2p).sum() / num_classes)

    # d dist[m,k] / d flat[m] = -(u_k - S[m,k] * fhat[m]) / |flat[m]|
    unit_protos = prototypes / np.linalg.norm(prototypes, axis=1, keepdims=True)
    flat_norm = np.linalg.norm(flat, axis=1)
    fhat = flat / flat_norm[:, None]
    sims = 1.0 - dist

    def distance_term(weights: np.ndarray) -> np.ndarray:
        scale = (weights * sims).sum(axis=1)
        return -(weights @ unit_protos - scale[:, None] * fhat) / flat_norm[:, None]

    # Pixel-to-class softmax coupling: (1/kappa) * A (x) (dist - row expectation).
    row_mean = (dist * p2c).sum(axis=1, keepdims=True)
    coup1 = (p2c * (dist - row_mean)) @ prototypes / kappa
    # Class-to-pixel softmax coupling: column expectations instead.
    col_mean = (dist * c2p).sum(axis=0, keepdims=True)
    coup2 = (c2p * (dist - col_mean)) @ prototypes / kappa

    grad_flat = (distance_term(p2c) + coup1) / total
    grad_flat += (distance_term(c2p) + coup2) / num_classes

    if normalize_features:
        # Chain rule through f / |f|: project out the radial component.
        radial = (grad_flat * fhat).sum(axis=1, keepdims=True)
        grad_flat = (grad_flat - radial * fhat) / f_norm[:, None]

    return loss, grad_flat.reshape(features.shape)


class LinearPixelExtractor:
    """Per-pixel affine map from raw inputs to feature space."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray):
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)

    def __call__(self, inputs: np.ndarray) -> np.ndarray:
        return inputs @ self.weights + self.bias

    def apply_gradient(self, inputs: np.ndarray, grad_features: np.ndarray,
                       learning_rate: float, weight_decay: float) -> None:
        flat_in = inputs.reshape(-1, inputs.shape[-1])
        flat_g = grad_features.reshape(-1, grad_features.shape[-1])
        grad_w = flat_in.T @ flat_g + weight_decay * self.weights
        grad_b = flat_g.sum(axis=0)
        self.weights -= learning_rate * grad_w
        self.bias -= learning_rate * grad_b

    def save(self, path) -> None:
        """Weight tensor followed by the bias tensor, one .dfgt stream."""
        from .tensor_io import write_tensor
        with open(path, "wb") as sink:
            write_tensor(self.weights.astype(np.float32), sink)
            write_tensor(self.bias.astype(np.float32), sink)

    @classmethod
    def load(cls, path) -> "LinearPixelExtractor":
        from .tensor_io import read_tensor
        with open(path, "rb") as source:
            weights = read_tensor(source)
            bias = read_tensor(source)
        return cls(weights, bias)


def write_loss_curve(losses, path) -> None:
    """CSV with one (step, loss) row per recorded gradient step."""
    import csv

    with open(path, "w", newline="") as sink:
        writer = csv.writer(sink, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(losses):
            writer.writerow([step, f"{loss:.8f}"])


class FeatureAggregator(BaseEstimator, TransformerMixin):
    """Gradient-descent trainer for the aggregation objective.

    Fits a :class:`LinearPixelExtractor` so that extracted features cluster
    around the frozen ``prototypes``. ``X`` passed to :meth:`fit` is a
    B x N x d_in array of per-pixel raw inputs; every step consumes up to
    ``batch_size`` images.

    Attributes after fit: ``extractor_``, ``loss_curve_`` (one entry per
    step, evaluated before the update), ``coef_`` and ``intercept_``.
    """

    def __init__(self, prototypes=None, kappa: float = 1.0,
                 learning_rate: float = 1e-4, weight_decay: float = 5e-4,
                 epochs: int = 5, batch_size: int = 16,
                 normalize_features: bool = False, random_state: int = 0):
        self.prototypes = prototypes
        self.kappa = kappa
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.normalize_features = normalize_features
        self.random_state = random_state

    def fit(self, X, y=None):
        if self.prototypes is None:
            raise ValidationError("prototypes are required")
        prototypes = np.asarray(self.prototypes, dtype=np.float64)
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3:
            raise ValidationError(f"X: expected B x N x d_in array, got {X.shape}")
        rng = np.random.default_rng(self.random_state)
        dim_in = X.shape[2]
        dim_f = prototypes.shape[1]
        weights = rng.normal(scale=1.0 / np.sqrt(dim_in), size=(dim_in, dim_f))
        bias = np.zeros(dim_f)
        self.extractor_ = LinearPixelExtractor(weights, bias)

        self.loss_curve_ = []
        n_images = X.shape[0]
        for _ in range(self.epochs):
            order = rng.permutation(n_images)
            for start in range(0, n_images, self.batch_size):
                batch = X[order[start:start + self.batch_size]]
                feats = self.extractor_(batch)
                loss, grad = ct_loss(feats, prototypes, self.kappa,
                                     self.normalize_features)
                if not np.isfinite(loss):
                    raise RuntimeError(f"aggregation diverged: loss={loss}")
                self.loss_curve_.append(loss)
                self.extractor_.apply_gradient(batch, grad,
                                               self.learning_rate,
                                               self.weight_decay)
        self.coef_ = self.extractor_.weights
        self.intercept_ = self.extractor_.bias
        return self

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        return self.extractor_(X)
