"""scikit-learn compatible wrapper around the segmentation network."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import checkpoint
from ._validation import check_images, check_images_masks
from .data import Sample
from .metrics import binarize, evaluate_predictions
from .model import ModelConfig, build_model
from .tensor import Tensor, no_grad
from .trainer import TrainConfig, split_dataset, train


class MFFUNetSegmenter(BaseEstimator):
    """Per-pixel classifier: ``fit(X, y)`` on images and label masks, ``predict(X)`` masks.

    ``X`` is N x H x W (or N x 1 x H x W), uint8 or floats in [0, 1];
    ``y`` is N x H x W with class ids in ``[0, num_classes)``. Images are
    nearest-neighbour resized to ``input_size`` when needed.

    Parameters
    ----------
    base_width : int
        Channels of the first encoder; later widths double per level.
    num_classes : int
        Number of classes including background (class 0).
    input_size : int
        Side length the network operates at (power of two >= 16).
    epochs, batch_size, learning_rate, patience, min_delta :
        Training protocol; see :class:`mffunet.trainer.TrainConfig`.
    validation_fraction : float
        Share of ``X`` held out for early stopping. If that leaves no
        validation sample, the training set doubles as validation set.
    random_state : int
        Seeds both weight initialization and batch shuffling.

    Attributes
    ----------
    model_ : Model
    history_ : TrainHistory
    classes_ : ndarray of shape (num_classes,)
    """

    def __init__(self, base_width=32, num_classes=3, input_size=256, epochs=50, batch_size=2,
                 learning_rate=1e-4, patience=5, min_delta=1e-4, validation_fraction=0.25,
                 random_state=0):
        self.base_width = base_width
        self.num_classes = num_classes
        self.input_size = input_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.patience = patience
        self.min_delta = min_delta
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y):
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError(f"validation_fraction must be in [0, 1), got {self.validation_fraction}")
        config = ModelConfig(base_width=self.base_width, num_classes=self.num_classes,
                             input_size=self.input_size, seed=self.random_state)
        X, y = check_images_masks(X, y, self.num_classes, self.input_size)
        samples = [Sample(X[i], y[i], f"sample{i:05d}_000") for i in range(len(X))]
        vf = self.validation_fraction
        train_set, val_set, _ = split_dataset(samples, (1.0 - vf, vf, 0.0), seed=self.random_state)
        if not val_set:
            val_set = train_set
        cfg = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.learning_rate,
                          patience=self.patience, min_delta=self.min_delta, seed=self.random_state)
        self.model_ = build_model(config)
        self.history_, _ = train(self.model_, train_set, val_set, cfg)
        self.classes_ = np.arange(self.num_classes)
        return self

    @classmethod
    def from_checkpoint(cls, path) -> "MFFUNetSegmenter":
        model = checkpoint.load_checkpoint(path)
        c = model.config
        est = cls(base_width=c.base_width, num_classes=c.num_classes, input_size=c.input_size,
                  random_state=c.seed)
        est.model_ = model
        est.classes_ = np.arange(c.num_classes)
        return est

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        checkpoint.save_checkpoint(self.model_, path)

    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities, N x K x H x W (eval mode)."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.config.input_size)
        out = []
        with no_grad():
            for start in range(0, len(X), max(1, self.batch_size)):
                out.append(self.model_.forward(Tensor(X[start:start + self.batch_size]), mode="eval").data)
        return np.concatenate(out)

    def predict(self, X) -> np.ndarray:
        return binarize(self.predict_proba(X))

    def score(self, X, y) -> float:
        """Mean foreground Dice similarity over the whole set (pooled pixel counts)."""
        check_is_fitted(self, "model_")
        X, y = check_images_masks(X, y, self.model_.config.num_classes, self.model_.config.input_size)
        report = evaluate_predictions([self.predict(X)], [y], self.model_.config.num_classes)
        return report.mean_fg_dsc

