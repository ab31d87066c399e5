"""scikit-learn style wrapper around the separator and its training loop.

``X`` holds mixtures ``(n_examples, n_samples)``; ``y`` holds the matching
sources ``(n_examples, C, n_samples)``.  ``predict`` returns source
estimates shaped like ``y``, and ``score`` is the mean SI-SNR improvement
in dB (higher is better).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import InputError
from .separator import HyperParams, SeparatorModel
from .training import MixtureExample, si_snr_improvement, train


def check_mixtures(X, min_length: int = 1) -> np.ndarray:
    """2-D finite float array of mixtures, at least ``min_length`` samples each."""
    X = check_array(X, dtype=np.float64, ensure_2d=True)
    if X.shape[1] < min_length:
        raise InputError(f"mixtures have {X.shape[1]} samples, fewer than the window ({min_length})")
    return X


def check_sources(y, X: np.ndarray, n_sources: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (X.shape[0], n_sources, X.shape[1]):
        raise InputError(f"sources must be shaped {(X.shape[0], n_sources, X.shape[1])}, got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise InputError("sources contain NaN or infinity")
    return y


class GALRSeparator(BaseEstimator):
    """Mask-based time-domain separator with a sklearn fit/predict surface.

    Defaults are the toy configuration, which trains in minutes on a CPU.
    """

    def __init__(self, D=16, M=8, K=16, Q=8, H=16, J=4, N=2, C=2, local_model="recurrent",
                 global_model="attentive", dropout=0.1, epochs=10, batch_size=4, lr=1e-3,
                 patience=10, validation_fraction=0.0, max_seconds=None, random_state=0):
        self.D = D
        self.M = M
        self.K = K
        self.Q = Q
        self.H = H
        self.J = J
        self.N = N
        self.C = C
        self.local_model = local_model
        self.global_model = global_model
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.max_seconds = max_seconds
        self.random_state = random_state

    def _hyperparams(self) -> HyperParams:
        return HyperParams(D=self.D, M=self.M, K=self.K, Q=self.Q, H=self.H, J=self.J, N=self.N, C=self.C,
                           local_model=self.local_model, global_model=self.global_model, dropout=self.dropout)

    def fit(self, X, y):
        hp = self._hyperparams()
        X = check_mixtures(X, hp.M)
        y = check_sources(y, X, hp.C)
        examples = [MixtureExample(x, s, float("nan")) for x, s in zip(X, y)]
        n_val = int(round(self.validation_fraction * len(examples)))
        train_set, val_set = examples[n_val:], examples[:n_val] or None
        model = SeparatorModel(hp, seed=self.random_state)
        result = train(model, train_set, val_set, epochs=self.epochs, batch_size=self.batch_size,
                       seed=self.random_state, patience=self.patience, lr=self.lr, max_seconds=self.max_seconds)
        self.model_ = result.model
        self.history_ = result.history
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_mixtures(X, self.model_.hp.M)
        return np.stack([np.stack(self.model_.separate(x)) for x in X])

    def score(self, X, y, sample_weight=None) -> float:
        """Mean SI-SNR improvement over the unprocessed mixture, in dB."""
        check_is_fitted(self, "model_")
        X = check_mixtures(X, self.model_.hp.M)
        y = check_sources(y, X, self.model_.hp.C)
        est = self.predict(X)
        gains = [si_snr_improvement(e, s, mix) for mix, e, s in zip(X, est, y)]
        return float(np.average(gains, weights=sample_weight))


__all__ = ["GALRSeparator", "check_mixtures", "check_sources"]
