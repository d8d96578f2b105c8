"""Scikit-learn style front end for the trainable fusion block."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .fusion import FusionWeights, init_weights, fuse, train_step
from .grid import FeatureGrid

__all__ = ["GatedPriorFusion"]


class GatedPriorFusion(BaseEstimator, TransformerMixin):
    """Learned gate that blends current BEV features with map priors.

    X is a sequence of (current, prior) pairs of (H, W, C) / (H, W, P) arrays
    (prior may be None for the empty-prior case); y is a matching sequence of
    (H, W, P) target logit planes. ``transform`` returns the fused feature
    planes, ``gate`` the per-element mixing weights.
    """

    def __init__(self, lr: float = 0.5, n_steps: int = 200, seed: int = 0, n_classes: int = 18):
        self.lr = lr
        self.n_steps = n_steps
        self.seed = seed
        self.n_classes = n_classes

    def fit(self, X, y):
        X = list(X)
        y = list(y)
        if len(X) != len(y) or not X:
            raise ValueError("X and y must be equally sized and nonempty")
        batch = []
        for (current, prior), target in zip(X, y):
            batch.append(
                (
                    FeatureGrid(np.asarray(current)),
                    None if prior is None else FeatureGrid(np.asarray(prior)),
                    FeatureGrid(np.asarray(target)),
                )
            )
        c = batch[0][0].channels
        prior_ch = batch[0][2].channels
        weights = init_weights(c, prior_ch, self.seed)
        losses = []
        for _ in range(self.n_steps):
            weights, loss = train_step(batch, weights, self.lr, self.n_classes)
            losses.append(loss)
        self.weights_: FusionWeights = weights
        self.losses_ = losses
        return self

    def _check_fitted(self) -> FusionWeights:
        weights = getattr(self, "weights_", None)
        if weights is None:
            raise NotFittedError("GatedPriorFusion is not fitted yet")
        return weights

    def transform(self, X):
        weights = self._check_fitted()
        out = []
        for current, prior in X:
            fused = fuse(
                FeatureGrid(np.asarray(current)),
                None if prior is None else FeatureGrid(np.asarray(prior)),
                weights,
            )
            out.append(fused.f_agg.values)
        return out

    def gate(self, X):
        """Per-element mixing weights alpha in (0, 1) for each (current, prior) pair."""
        weights = self._check_fitted()
        out = []
        for current, prior in X:
            fused = fuse(
                FeatureGrid(np.asarray(current)),
                None if prior is None else FeatureGrid(np.asarray(prior)),
                weights,
            )
            out.append(fused.alpha.values)
        return out
