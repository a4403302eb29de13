"""Scikit-learn style front end for the probabilistic segmentation model."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import metrics, model
from .synthdata import AnnotatedExample, Dataset, DatasetSpec


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Validate a stack of square images; returns float64 (n, H, W)."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        side = int(round(np.sqrt(arr.shape[1])))
        if side * side != arr.shape[1]:
            raise ValueError(f"flattened images must have a square pixel count, got {arr.shape[1]}")
        arr = arr.reshape(-1, side, side)
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ValueError(f"expected images of shape (n, H, H) or (n, H*H), got {np.shape(X)}")
    if arr.shape[0] == 0:
        raise ValueError("need at least one image")
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain NaN or infinite values")
    if image_size is not None and arr.shape[1] != image_size:
        raise ValueError(f"model expects {image_size}x{image_size} images, got side {arr.shape[1]}")
    return arr


def check_masks(y, images: np.ndarray) -> np.ndarray:
    """Validate binary masks for ``images``; returns uint8 (n, A, H, W).

    A single mask per image, shape (n, H, W), is treated as one annotator.
    """
    arr = np.asarray(y)
    n, h, _ = images.shape
    if arr.ndim == 3:
        arr = arr[:, None]
    if arr.ndim != 4 or arr.shape[0] != n or arr.shape[2:] != (h, h):
        raise ValueError(f"masks must have shape ({n}, A, {h}, {h}) or ({n}, {h}, {h}), "
                         f"got {np.shape(y)}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("masks must be binary (0/1)")
    return arr.astype(np.uint8)


class ProbabilisticSegmenter(BaseEstimator):
    """Conditional VAE segmenter with an optional flow-augmented posterior.

    ``fit`` holds out ``validation_fraction`` of the images for early stopping
    and keeps the best parameters.  Sampling methods draw latents from the
    image-conditional prior.
    """

    def __init__(self, latent_dim=6, flow_type="none", flow_steps=0, hidden_width=64,
                 context_width=16, learning_rate=1e-4, batch_size=32, patience=20,
                 max_epochs=200, eval_samples=16, validation_fraction=0.1, random_state=0):
        self.latent_dim = latent_dim
        self.flow_type = flow_type
        self.flow_steps = flow_steps
        self.hidden_width = hidden_width
        self.context_width = context_width
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.patience = patience
        self.max_epochs = max_epochs
        self.eval_samples = eval_samples
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _make_config(self, image_size: int) -> model.ModelConfig:
        return model.ModelConfig(
            latent_dim=self.latent_dim, flow_type=self.flow_type, flow_steps=self.flow_steps,
            image_size=image_size, hidden_width=self.hidden_width,
            context_width=self.context_width, learning_rate=self.learning_rate,
            batch_size=self.batch_size, patience=self.patience, max_epochs=self.max_epochs,
            eval_samples=self.eval_samples, seed=self.random_state)

    def fit(self, X, y):
        X = check_images(X)
        M = check_masks(y, X)
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie strictly between 0 and 1")
        n = len(X)
        n_val = max(1, int(round(self.validation_fraction * n)))
        if n - n_val < 1:
            raise ValueError(f"need at least 2 images to fit, got {n}")
        cfg = self._make_config(X.shape[1])
        perm = np.random.default_rng(self.random_state).permutation(n)
        spec = DatasetSpec(num_examples=n, size=X.shape[1], num_annotators=M.shape[1])
        data = Dataset(spec, [AnnotatedExample(X[i].astype(np.float32), M[i]) for i in range(n)])
        result = model.train_fold(data.subset(np.sort(perm[n_val:])),
                                  data.subset(np.sort(perm[:n_val])), cfg)
        self.config_ = cfg
        self.params_ = result.params
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.n_annotators_ = M.shape[1]
        self.image_size_ = X.shape[1]
        return self

    @classmethod
    def from_checkpoint(cls, path) -> "ProbabilisticSegmenter":
        params, cfg = model.load_checkpoint(path)
        est = cls(latent_dim=cfg.latent_dim, flow_type=cfg.flow_type, flow_steps=cfg.flow_steps,
                  hidden_width=cfg.hidden_width, context_width=cfg.context_width,
                  learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                  patience=cfg.patience, max_epochs=cfg.max_epochs,
                  eval_samples=cfg.eval_samples, random_state=cfg.seed)
        est.config_, est.params_ = cfg, params
        est.history_, est.best_epoch_ = [], 0
        est.n_annotators_ = None
        est.image_size_ = cfg.image_size
        return est

    def save(self, path) -> None:
        check_is_fitted(self, "params_")
        model.save_checkpoint(path, self.params_, self.config_)

    def _images(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return check_images(X, self.image_size_)

    def sample(self, X, n_samples=None, random_state=None) -> np.ndarray:
        """Binary masks decoded from prior draws, shape (n, n_samples, H, W)."""
        X = self._images(X)
        k = self.eval_samples if n_samples is None else n_samples
        rng = np.random.default_rng(random_state)
        return np.stack([model.predict_samples(self.params_, self.config_, x, k, rng) for x in X])

    def mean_std(self, X, n_samples=None, random_state=None):
        """Per-pixel mean and std of sampled foreground probabilities."""
        X = self._images(X)
        k = self.eval_samples if n_samples is None else n_samples
        rng = np.random.default_rng(random_state)
        maps = [model.mean_std_maps(self.params_, self.config_, x, k, rng) for x in X]
        return np.stack([m for m, _ in maps]), np.stack([s for _, s in maps])

    def predict_proba(self, X, n_samples=None, random_state=None) -> np.ndarray:
        return self.mean_std(X, n_samples, random_state)[0]

    def predict(self, X) -> np.ndarray:
        """One mask per image, decoded at the prior mean."""
        X = self._images(X)
        zero = np.zeros((1, self.config_.latent_dim))
        probs = [model.sample_probabilities(self.params_, self.config_, x, 1, None, noise=zero)
                 for x in X]
        return (np.concatenate(probs) > 0.5).astype(np.uint8).reshape(X.shape)

    def prior_variance(self, X) -> np.ndarray:
        """Mean latent prior variance per image (higher means more ambiguous)."""
        X = self._images(X)
        return np.atleast_1d(model.prior_variance_score(self.params_, self.config_, X))

    def score(self, X, y, random_state=None) -> float:
        """Negative mean squared GED (empty pairs counted as matches); higher is better."""
        X = self._images(X)
        M = check_masks(y, X)
        Y = self.sample(X, random_state=random_state)
        ged = [metrics.ged_squared(s, p, metrics.EmptyPolicy.INCLUDE_AS_ONE) for s, p in zip(M, Y)]
        return -float(np.mean(ged))
