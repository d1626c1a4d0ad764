"""scikit-learn style wrapper around model building, training and prediction."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from drlfd.dataset import Sample, SequenceSample, Split, window_samples
from drlfd.evaluate import compute_metrics
from drlfd.models import DEFAULT_BACKBONE, ModelConfig, build_model, transfer_encoder
from drlfd.train import Hyperparams, train
from drlfd.validation import NotFittedError, ValidationError


class NextPoseRegressor(BaseEstimator, RegressorMixin):
    """Predict the next Arm-2 State7 from camera frames and robot state.

    ``X`` is a sequence of :class:`~drlfd.dataset.Sample`; targets are read
    from the samples, so ``y`` is accepted only for API compatibility and must
    match them if given. Recurrent variants group ``X`` into windows of
    ``window`` consecutive frames per (trial, camera) stream, so ``predict``
    returns one row per window.

    ``encoder`` may be a fitted regressor whose CNN weights are copied and
    frozen before training.
    """

    def __init__(self, variant="feedforward", window=1, hidden_size=64, backbone=DEFAULT_BACKBONE,
                 dense_head=(128, 64, 7), image_size=(64, 64), state_dim=14, use_calibration=False,
                 residual=True, epochs=50, batch_size=32, lr=1e-3, loss="pose", w_pos=1e6, w_ori=1.0,
                 patience=8, clip_norm=5.0, seed=0, encoder=None):
        self.variant = variant
        self.window = window
        self.hidden_size = hidden_size
        self.backbone = backbone
        self.dense_head = dense_head
        self.image_size = image_size
        self.state_dim = state_dim
        self.use_calibration = use_calibration
        self.residual = residual
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.loss = loss
        self.w_pos = w_pos
        self.w_ori = w_ori
        self.patience = patience
        self.clip_norm = clip_norm
        self.seed = seed
        self.encoder = encoder

    def model_config(self) -> ModelConfig:
        return ModelConfig(backbone=tuple(self.backbone), dense_head=tuple(self.dense_head), variant=self.variant,
                           hidden_size=self.hidden_size, window=self.window, image_size=tuple(self.image_size),
                           state_dim=self.state_dim, use_calibration=self.use_calibration, residual=self.residual)

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, loss=self.loss,
                           w_pos=self.w_pos, w_ori=self.w_ori, patience=self.patience,
                           clip_norm=self.clip_norm, seed=self.seed)

    def fit(self, X: Sequence[Sample], y=None, X_val: Optional[Sequence[Sample]] = None):
        X = _check_samples(X, "X")
        if y is not None:
            y = np.asarray(y, dtype=float)
            if y.shape != (len(X), 7) or not np.array_equal(y, np.stack([s.target for s in X])):
                raise ValidationError("y must equal the stacked sample targets", field="y", rule="value")
        val = _check_samples(X_val, "X_val") if X_val is not None else []
        data = list(X) + list(val)
        split = Split(train=list(range(len(X))), val=list(range(len(X), len(data))), test=[],
                      protocol="given", seed=self.seed)
        model = build_model(self.model_config(), self.seed)
        if self.encoder is not None:
            src = getattr(self.encoder, "model_", None)
            if src is None:
                raise NotFittedError("encoder estimator is not fitted")
            transfer_encoder(src, model, freeze=True)
        self.model_, self.history_ = train(model, split, data, self.hyperparams())
        self.n_features_in_ = model.concat_width
        return self

    def _items(self, X):
        X = _check_samples(X, "X")
        if self.model_.config.recurrent:
            items = window_samples(X, self.model_.config.window)
            if not items:
                raise ValidationError("no complete windows in X", field="X", rule="nonempty")
            return items
        return X

    def _fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")

    def predict(self, X) -> np.ndarray:
        self._fitted()
        return self.model_.predict(self._items(X))

    def targets(self, X) -> np.ndarray:
        """Targets aligned with :meth:`predict` rows."""
        self._fitted()
        items = self._items(X)
        return np.stack([(it.last if isinstance(it, SequenceSample) else it).target for it in items])

    def score(self, X, y=None, sample_weight=None) -> float:
        """Negative average position error in millimeters (higher is better)."""
        return -compute_metrics(self.predict(X), self.targets(X)).ave_pe


def _check_samples(X, name):
    X = list(X)
    if not X:
        raise ValidationError(f"{name} is empty", field=name, rule="nonempty")
    if not all(isinstance(s, Sample) for s in X):
        raise ValidationError(f"{name} must hold Sample objects", field=name, rule="type")
    return X
