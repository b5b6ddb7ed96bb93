"""scikit-learn style wrapper around the training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted

from .config import TrainConfig
from .mixblock import generate
from .model import Architecture, predict_proba
from .trainer import Trainer


def _as_images(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (n, C, H, W) or (n, H, W), got {X.shape}")
    if X.shape[2] != X.shape[3]:
        raise ValueError("images must be square")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


class AdversarialMixupClassifier(ClassifierMixin, BaseEstimator):
    """Residual CNN trained against an adversarial mixed-sample generator.

    ``mode`` selects the full adversarial scheme (``"adautomix"``) or one
    of the baselines (``"input-mixup"``, ``"vanilla"``). Inputs are image
    arrays ``(n, C, H, W)`` with values in [0, 1].

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
    state_ : ModelState
        Classifier, generator and EMA networks after training.
    history_ : list of TrainLogRow
    """

    def __init__(
        self,
        mode="adautomix",
        alpha=0.5,
        beta=0.3,
        lam_concentration=1.0,
        n_mix=3,
        feature_layer=3,
        xi_start=0.999,
        lr=0.1,
        gen_lr=None,
        momentum=0.9,
        weight_decay=1e-4,
        batch_size=100,
        t1=1,
        t2=1,
        epochs=200,
        widths=(8, 16, 32, 64),
        blocks_per_stage=1,
        augment_flip=True,
        augment_crop=True,
        cosine_sign=1.0,
        random_state=0,
    ):
        self.mode = mode
        self.alpha = alpha
        self.beta = beta
        self.lam_concentration = lam_concentration
        self.n_mix = n_mix
        self.feature_layer = feature_layer
        self.xi_start = xi_start
        self.lr = lr
        self.gen_lr = gen_lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.t1 = t1
        self.t2 = t2
        self.epochs = epochs
        self.widths = widths
        self.blocks_per_stage = blocks_per_stage
        self.augment_flip = augment_flip
        self.augment_crop = augment_crop
        self.cosine_sign = cosine_sign
        self.random_state = random_state

    def _config(self, n_samples: int) -> TrainConfig:
        return TrainConfig(
            mode=self.mode,
            alpha=self.alpha,
            beta=self.beta,
            lam_concentration=self.lam_concentration,
            n_mix=self.n_mix,
            feature_layer=self.feature_layer,
            xi_start=self.xi_start,
            lr=self.lr,
            gen_lr=self.gen_lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=min(self.batch_size, n_samples),
            t1=self.t1,
            t2=self.t2,
            epochs=self.epochs,
            seed=int(self.random_state or 0),
            cosine_sign=self.cosine_sign,
            augment_flip=self.augment_flip,
            augment_crop=self.augment_crop,
            widths=tuple(self.widths),
            blocks_per_stage=self.blocks_per_stage,
        ).resolved()

    def fit(self, X, y):
        X = _as_images(X)
        check_classification_targets(y)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        codes = self._encoder.transform(y)
        config = self._config(len(X))
        arch = Architecture(X.shape[1], X.shape[2], len(self.classes_), config.widths, config.blocks_per_stage)
        trainer = Trainer(config, arch)
        self.history_ = trainer.fit(X, codes)
        self.state_ = trainer.state
        self.config_ = config
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "state_")
        X = _as_images(X)
        arch = self.state_.arch
        if X.shape[1:] != (arch.in_channels, arch.image_size, arch.image_size):
            raise ValueError(f"X has image shape {X.shape[1:]}, model expects {(arch.in_channels, arch.image_size, arch.image_size)}")
        return predict_proba(arch, self.state_.classifier, X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def mix(self, X, lam):
        """Generate one mixed image per set. X ``(K, N, C, H, W)``, lam ``(K, N)``."""
        check_is_fitted(self, "state_")
        s = self.state_
        x_mix, masks = generate(s.arch, np.asarray(X, dtype=np.float64), lam, s.generator, s.encoder, s.feature_layer)
        return x_mix.data, masks.data
