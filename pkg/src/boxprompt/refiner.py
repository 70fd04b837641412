"""Estimator-style interfaces: slice refinement and the toy pixel classifier.

``PseudoLabelRefiner`` carries the search hyperparameters as sklearn-style
constructor params (so ``get_params``/``set_params``/``clone`` work) and runs
the per-class box search plus post-processing on one slice at a time.

``PixelwiseDiceClassifier`` is the small trainable stand-in for a target
model: an affine map from per-pixel features to class logits, trained by
gradient descent on the soft Dice loss against (pseudo-)labels.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import ClassAbsentError, ValidationError
from .metrics import dice_loss
from .postprocess import assemble_labels, keep_largest
from .search import SearchConfig, SearchTrace, search_class
from .validation import check_probability_map


class PseudoLabelRefiner(BaseEstimator):
    """Refine one slice's pseudo-labels through box-prompted segmentation.

    Parameters mirror :class:`~boxprompt.search.SearchConfig` plus the two
    pipeline toggles: ``search_phases`` selects ``"full"`` (both feature
    spaces), ``"tbs"`` (target features only) or ``"none"`` (argmax
    baseline, no segmenter), and ``keep_largest_component`` switches the
    connectivity post-processing.
    """

    def __init__(self, p_delta: float = 0.005, tau_f: float = 0.99, r: int = 4,
                 margin_m: int = 2, tau_delta: float = 15.0,
                 tau_div: float = 2.5, tau_max: float = 0.35,
                 n_artificial: int = 3, max_iters: int = 256,
                 search_phases: str = "full",
                 keep_largest_component: bool = True, connectivity: int = 4):
        self.p_delta = p_delta
        self.tau_f = tau_f
        self.r = r
        self.margin_m = margin_m
        self.tau_delta = tau_delta
        self.tau_div = tau_div
        self.tau_max = tau_max
        self.n_artificial = n_artificial
        self.max_iters = max_iters
        self.search_phases = search_phases
        self.keep_largest_component = keep_largest_component
        self.connectivity = connectivity

    def search_config(self) -> SearchConfig:
        return SearchConfig(
            p_delta=self.p_delta, tau_f=self.tau_f, r=self.r,
            margin_m=self.margin_m, tau_delta=self.tau_delta,
            tau_div=self.tau_div, tau_max=self.tau_max,
            n_artificial=self.n_artificial, max_iters=self.max_iters,
        )

    def refine_slice(self, probs, target_feats, session=None, image_id: str = ""
                     ) -> tuple[np.ndarray, dict[int, SearchTrace]]:
        """Returns the assembled label map and one trace per searched class.

        Classes the target model never predicts are skipped. ``session`` may
        be None only for the argmax baseline.
        """
        if self.search_phases not in ("none", "tbs", "full"):
            raise ValidationError(
                f"search_phases must be none|tbs|full, got {self.search_phases!r}")
        probs = check_probability_map(probs)
        num_classes = probs.shape[2]
        traces: dict[int, SearchTrace] = {}
        masks: list[tuple[int, np.ndarray]] = []
        if self.search_phases == "none":
            argmax = probs.argmax(axis=2)
            for class_id in range(1, num_classes):
                mask = argmax == class_id
                if mask.any():
                    masks.append((class_id, mask))
        else:
            if session is None:
                raise ValidationError("a segmenter session is required unless "
                                      "search_phases='none'")
            cfg = self.search_config()
            for class_id in range(1, num_classes):
                try:
                    mask, trace = search_class(
                        probs, target_feats, session, class_id, cfg,
                        image_id=image_id,
                        use_mbs=(self.search_phases == "full"))
                except ClassAbsentError:
                    continue
                traces[class_id] = trace
                masks.append((class_id, mask))
        if self.keep_largest_component:
            masks = [(k, keep_largest(m, self.connectivity)) for k, m in masks]
        labels = assemble_labels(masks, probs)
        return labels, traces


class PixelwiseDiceClassifier(BaseEstimator):
    """Affine per-pixel classifier trained with the soft Dice loss.

    ``fit`` treats the whole sample set as one pooled region, matching how
    the Dice loss is evaluated downstream. With ``epochs=0`` the randomly
    initialized model is kept as-is.
    """

    def __init__(self, num_classes: int | None = None, learning_rate: float = 1.0,
                 epochs: int = 50, init_scale: float = 0.01, random_state: int = 0):
        self.num_classes = num_classes
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.init_scale = init_scale
        self.random_state = random_state

    def _init(self, dim: int, num_classes: int) -> None:
        rng = np.random.default_rng(self.random_state)
        self.coef_ = rng.normal(scale=self.init_scale, size=(dim, num_classes))
        self.intercept_ = np.zeros(num_classes)
        self.n_classes_ = num_classes
        self.loss_curve_: list[float] = []

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        if X.ndim != 2 or y.ndim != 1 or len(X) != len(y):
            raise ValidationError("expected X (n, d) with matching y (n,)")
        num_classes = self.num_classes or int(y.max()) + 1
        if num_classes < 2:
            raise ValidationError("need at least 2 classes")
        self._init(X.shape[1], num_classes)
        y = y.astype(np.uint8)
        for _ in range(self.epochs):
            probs = self.predict_proba(X)
            loss, grad_p = dice_loss(probs[:, None, :], y[:, None])
            if not np.isfinite(loss):
                raise RuntimeError(f"dice training diverged: loss={loss}")
            self.loss_curve_.append(loss)
            grad_p = grad_p[:, 0, :]
            # Softmax backward: dL/dz = p * (dL/dp - sum_k dL/dp_k p_k).
            inner = (grad_p * probs).sum(axis=1, keepdims=True)
            grad_logits = probs * (grad_p - inner)
            self.coef_ -= self.learning_rate * (X.T @ grad_logits)
            self.intercept_ -= self.learning_rate * grad_logits.sum(axis=0)
        return self

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        logits = X @ self.coef_ + self.intercept_
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1).astype(np.uint8)
