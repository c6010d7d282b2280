"""scikit-learn compatible wrappers."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state, check_X_y

from .augment import phase_randomize
from .data import Dataset
from .kernels import softmax
from .network import PRESETS, build_grcnn, network_forward
from .trainer import TrainConfig, TrainState, evaluate, train_epoch

__all__ = ["GrcnnClassifier", "PhaseRandomizer"]


def _images(X, channels=None):
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (n, C, H, W), got {X.shape}")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[1]}")
    return X


class GrcnnClassifier(ClassifierMixin, BaseEstimator):
    """Image classifier backed by a GRCNN trained with momentum SGD.

    Parameters
    ----------
    preset : {"tiny", "paper"}
    T : int or None
        Recursion steps per block; None keeps the preset value.
    epochs, batch_size, lr, momentum, weight_decay : training schedule
    cutmix, augmix : bool
        Enable the corresponding augmentation during ``fit``.
    random_state : int
    """

    def __init__(self, preset="tiny", T=None, epochs=10, batch_size=64, lr=0.05, momentum=0.9,
                 weight_decay=1e-4, cutmix=False, augmix=False, random_state=0, verbose=False):
        self.preset = preset
        self.T = T
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.cutmix = cutmix
        self.augmix = augmix
        self.random_state = random_state
        self.verbose = verbose

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True, dtype=np.float64)
        X = _images(X)
        check_classification_targets(y)
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        cfg = PRESETS[self.preset](len(self.classes_), in_channels=X.shape[1])
        if self.T is not None:
            cfg = cfg.with_T(int(self.T))
        if isinstance(self.random_state, (int, np.integer)):
            seed = int(self.random_state)
        else:
            seed = int(check_random_state(self.random_state).randint(2**31))
        tcfg = TrainConfig(epochs=self.epochs, batch_size=min(self.batch_size, len(y)), seed=seed, lr=self.lr,
                           momentum=self.momentum, weight_decay=self.weight_decay, cutmix=self.cutmix,
                           augmix=self.augmix)
        self.network_ = build_grcnn(cfg, seed)
        state = TrainState.fresh(self.network_, tcfg)
        ds = Dataset(X, codes, len(self.classes_))
        self.history_ = []
        for _ in range(self.epochs):
            m = train_epoch(state, ds, tcfg)
            self.history_.append(m)
            if self.verbose:
                print(f"epoch {m['epoch']}: loss {m['loss']:.4f}")
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = _images(X, self.network_.config.in_channels)
        out = [network_forward(self.network_, X[s : s + 250], "eval")[0] for s in range(0, len(X), 250)]
        return softmax(np.concatenate(out))

    def predict(self, X):
        check_is_fitted(self, "network_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def evaluate(self, X, y) -> dict:
        check_is_fitted(self, "network_")
        X = _images(X)
        y = np.asarray(y)
        unseen = np.setdiff1d(y, self.classes_)
        if unseen.size:
            raise ValueError(f"labels not seen during fit: {unseen[:5].tolist()}")
        codes = np.searchsorted(self.classes_, y)
        return evaluate(self.network_, Dataset(X, codes, len(self.classes_)))


class PhaseRandomizer(TransformerMixin, BaseEstimator):
    """Replace each image by phase-randomized noise with the same amplitude spectrum.

    Stateless; ``fit`` only records the input dimensionality.
    """

    def __init__(self, random_state=0):
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        if X.ndim not in (3, 4):
            raise ValueError(f"expected (n, H, W) or (n, C, H, W) images, got {X.shape}")
        rng = np.random.default_rng(self.random_state)
        flat = X.reshape(-1, *X.shape[-2:])
        return np.stack([phase_randomize(img, rng) for img in flat]).reshape(X.shape)
