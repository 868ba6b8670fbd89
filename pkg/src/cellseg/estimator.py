"""Scikit-learn style front door for the automaton segmenter.

``fit(X, y)`` trains the update rule with mini-unroll pool training on a
batch of images + integer class maps; ``predict`` evolves fresh colonies
and returns per-pixel classes.  Hyperparameters mirror the engine configs,
so ``get_params``/``set_params``/``clone`` compose with the usual tooling.
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import experiments as X
from . import model as M
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, LabelMask, Sample
from .metrics import iou
from .model import ArchConfig
from .ops import softmax
from .training import TrainConfig, Trainer, UnrollSchedule
from .validation import check_image_batch, check_label_batch, check_square_even


class CellularSegmenter(BaseEstimator):
    """Image segmenter driven by a learned cellular-automaton update rule.

    Parameters follow the engine defaults; the desk-scale configuration
    (cell_size=32, hidden_size=48 at 48px) trains in CPU-tolerable time.
    """

    def __init__(self, cell_size: int = 32, hidden_size: int = 48,
                 first_layer: str = "full3x3", norm: str = "instance",
                 residual: bool = True, resettable: bool = True,
                 update_prob: float = 0.5, resolution_factor: int = 1,
                 num_classes: int = 3, target_steps: int = 40,
                 mini_steps: int = 10, image_reset_frac: float = 0.5,
                 state_reset_frac: float = 0.5, mode: str = "mini_unroll",
                 lr: float = 3e-4, batch_size: int = 8, n_updates: int = 2000,
                 pool_factor: int = 4, freeze_spatial_filters: bool = False,
                 seed: int = 0, verbose: int = 0):
        self.cell_size = cell_size
        self.hidden_size = hidden_size
        self.first_layer = first_layer
        self.norm = norm
        self.residual = residual
        self.resettable = resettable
        self.update_prob = update_prob
        self.resolution_factor = resolution_factor
        self.num_classes = num_classes
        self.target_steps = target_steps
        self.mini_steps = mini_steps
        self.image_reset_frac = image_reset_frac
        self.state_reset_frac = state_reset_frac
        self.mode = mode
        self.lr = lr
        self.batch_size = batch_size
        self.n_updates = n_updates
        self.pool_factor = pool_factor
        self.freeze_spatial_filters = freeze_spatial_filters
        self.seed = seed
        self.verbose = verbose

    # -- config assembly ----------------------------------------------------

    def _arch(self) -> ArchConfig:
        return ArchConfig(
            cell_size=self.cell_size, hidden_size=self.hidden_size,
            first_layer=self.first_layer, norm_kind=self.norm,
            residual=self.residual, resettable=self.resettable,
            num_classes=self.num_classes, update_prob=self.update_prob,
            freeze_spatial_filters=self.freeze_spatial_filters,
            resolution_factor=self.resolution_factor).validate()

    def _schedule(self) -> UnrollSchedule:
        return UnrollSchedule(
            target_steps=self.target_steps, mini_steps=self.mini_steps,
            image_reset_frac=self.image_reset_frac,
            state_reset_frac=self.state_reset_frac, mode=self.mode).validate()

    # -- estimator API --------------------------------------------------------

    def fit(self, X_img, y, eval_set: Optional[tuple] = None) -> "CellularSegmenter":
        X_arr = check_image_batch(X_img)
        y_arr = check_label_batch(y, X_arr, self.num_classes)
        check_square_even(X_arr, self.resolution_factor)
        samples = [Sample(img, LabelMask(lab), source_id=f"fit/{i}")
                   for i, (img, lab) in enumerate(zip(X_arr, y_arr))]
        arch = self._arch()
        cfg = TrainConfig(steps=self.n_updates, lr=self.lr, batch=self.batch_size,
                          pool_size=self.pool_factor * self.batch_size,
                          seed=self.seed, arch=arch, schedule=self._schedule())
        trainer = Trainer(cfg, Dataset(samples))
        trainer.run(progress_every=max(1, self.n_updates // 10) if self.verbose else 0)
        self.params_ = trainer.params
        self.arch_ = arch
        self.history_ = trainer.history
        self.n_features_in_ = int(np.prod(X_arr.shape[1:]))
        return self

    def _require_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("fit the segmenter (or load a checkpoint) first")

    def predict(self, X_img, steps: Optional[int] = None) -> np.ndarray:
        self._require_fitted()
        X_arr = check_image_batch(X_img)
        check_square_even(X_arr, self.resolution_factor)
        steps = self.target_steps if steps is None else steps
        classes, _ = X.segment(self.params_, self.arch_, X_arr, steps=steps,
                               seed=self.seed)
        return classes

    def predict_proba(self, X_img, steps: Optional[int] = None) -> np.ndarray:
        self._require_fitted()
        X_arr = check_image_batch(X_img)
        check_square_even(X_arr, self.resolution_factor)
        steps = self.target_steps if steps is None else steps
        _, logits = X.segment(self.params_, self.arch_, X_arr, steps=steps,
                              seed=self.seed)
        return softmax(logits)

    def score(self, X_img, y) -> float:
        """Mean IOU over classes present in labels or predictions."""
        self._require_fitted()
        X_arr = check_image_batch(X_img)
        y_arr = check_label_batch(y, X_arr, self.num_classes)
        rep = iou(self.predict(X_arr), y_arr, self.num_classes)
        mean = rep.mean_present()
        return -1.0 if mean is None else mean

    # -- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        self._require_fitted()
        save_checkpoint(self.params_, self.arch_,
                        {"estimator_params": self.get_params()}, path)

    @classmethod
    def from_checkpoint(cls, path) -> "CellularSegmenter":
        params, arch, meta = load_checkpoint(path)
        est = cls(**meta.get("estimator_params", {})) \
            if meta.get("estimator_params") else cls(
                cell_size=arch.cell_size, hidden_size=arch.hidden_size,
                first_layer=arch.first_layer, norm=arch.norm_kind,
                residual=arch.residual, resettable=arch.resettable,
                update_prob=arch.update_prob, num_classes=arch.num_classes,
                resolution_factor=arch.resolution_factor)
        est.params_ = params
        est.arch_ = arch
        est.history_ = []
        return est
