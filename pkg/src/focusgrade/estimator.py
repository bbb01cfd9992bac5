"""Scikit-learn style front end around the training protocol.

``FocusGradeClassifier`` trains on image arrays (optionally with biomarker
panels) and predicts grades from images alone, so it slots into sklearn
pipelines, cross-validation utilities, and grid search.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .data import Sample
from .frl import contribution_map
from .mca import BiomarkerPanel
from .model import ModelConfig
from .train import Trainer, TrainConfig, predict_scores, save_trainer_checkpoint


def check_images(X) -> np.ndarray:
    """Validate an [n, H, W, 3] image stack with values in [0, 1]."""
    X = np.asarray(X, np.float32)
    if X.ndim != 4 or X.shape[-1] != 3:
        raise ValueError(f"expected images shaped [n, H, W, 3], got {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("images contain non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"labels shaped {y.shape}, expected ({n},)")
    return y


def check_panels(panels, n: int) -> Optional[list[BiomarkerPanel]]:
    if panels is None:
        return None
    if len(panels) != n:
        raise ValueError(f"{len(panels)} panels for {n} samples")
    out = []
    for p in panels:
        out.append(p if isinstance(p, BiomarkerPanel) else BiomarkerPanel.from_values(p))
    return out


class FocusGradeClassifier(BaseEstimator, ClassifierMixin):
    """Grade classifier trained with region focus and biomarker alignment.

    Parameters mirror the training configuration; ``fit`` accepts an optional
    ``panels`` array of shape [n, 6] (or BiomarkerPanel list) that is used
    only during training. Prediction needs images only.
    """

    def __init__(
        self,
        epochs: int = 20,
        batch_size: int = 4,
        lr: float = 1e-4,
        weight_decay: float = 0.01,
        lambda_frl: float = 0.2,
        lambda_mca: float = 0.2,
        temperature: float = 0.07,
        threshold: float = 0.5,
        patch_size: int = 8,
        embed_dim: int = 64,
        depth: int = 4,
        heads: int = 4,
        mlp_ratio: int = 4,
        proj_dim: int = 32,
        ablation: str = "full",
        augment: bool = True,
        random_state: int = 0,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.lambda_frl = lambda_frl
        self.lambda_mca = lambda_mca
        self.temperature = temperature
        self.threshold = threshold
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.depth = depth
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.proj_dim = proj_dim
        self.ablation = ablation
        self.augment = augment
        self.random_state = random_state

    def _configs(self, image_shape) -> tuple[ModelConfig, TrainConfig]:
        h, w, c = image_shape
        model_cfg = ModelConfig(
            image_h=h,
            image_w=w,
            channels=c,
            patch_size=self.patch_size,
            embed_dim=self.embed_dim,
            depth=self.depth,
            heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            num_grades=len(self.classes_),
        )
        train_cfg = TrainConfig(
            lr=self.lr,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lambda_frl=self.lambda_frl,
            lambda_mca=self.lambda_mca,
            temperature=self.temperature,
            threshold=self.threshold,
            proj_dim=self.proj_dim,
            ablation=self.ablation,
            seed=self.random_state,
            augment=self.augment,
        )
        return model_cfg, train_cfg

    def fit(self, X, y, panels=None) -> "FocusGradeClassifier":
        X = check_images(X)
        y = check_labels(y, len(X))
        panels = check_panels(panels, len(X))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit")

        model_cfg, train_cfg = self._configs(X.shape[1:])
        if train_cfg.uses_mca and panels is None:
            raise ValueError(
                f"ablation {self.ablation!r} aligns against biomarkers; pass panels= "
                "or choose ablation='no_mca'/'baseline'"
            )
        samples = [
            Sample(
                sample_id=str(i),
                patient_id=str(i),
                image=X[i],
                grade=int(encoded[i]),
                panel=panels[i] if panels else None,
                focus_mask=None,
            )
            for i in range(len(X))
        ]
        trainer = Trainer(model_cfg, train_cfg)
        self.history_ = trainer.fit(samples)
        self.model_ = trainer.model
        self.projectors_ = trainer.projectors
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("this FocusGradeClassifier is not fitted yet")

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        return predict_scores(self.model_, check_images(X))

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def contribution_maps(self, X) -> np.ndarray:
        """Per-pixel contribution scores for the predicted class, [n, H, W]."""
        self._check_fitted()
        X = check_images(X)
        preds = self.predict_proba(X).argmax(axis=1)
        return np.stack(
            [contribution_map(self.model_, x, int(p)).scores for x, p in zip(X, preds)]
        )

    def save_checkpoint(self, path) -> None:
        self._check_fitted()
        trainer = Trainer.__new__(Trainer)
        trainer.model_cfg = self.model_.config
        trainer.cfg = self._configs(
            (self.model_.config.image_h, self.model_.config.image_w, self.model_.config.channels)
        )[1]
        trainer.model = self.model_
        trainer.projectors = self.projectors_
        save_trainer_checkpoint(path, trainer)
