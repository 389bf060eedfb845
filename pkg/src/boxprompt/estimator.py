"""Scikit-learn style estimator wrapping the full pipeline.

PromptSegmenter trains the prompt module on box (or mask-derived-box)
labels and predicts foreground probability maps or binary masks at the
input resolution.  It follows the sklearn contract: constructor stores
parameters verbatim, get_params/set_params work, fitted state lives in
trailing-underscore attributes, and score() returns mean Dice.
"""
from __future__ import annotations

from dataclasses import replace
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .backbone import TOY_SPEC, MedSamBackbone, ToyBackbone
from .data import (
    PreprocessConfig,
    prepare_from_arrays,
    prepare_inference,
)
from .errors import ConfigError
from .evaluation import dice, evaluate, predict_probability
from .losses import LossWeights, PenaltyConfig, SizePrior
from .promptnet import PromptModule, PromptModuleConfig
from .train import TrainConfig, loss_shape_for, train
from .validation import check_boxes, check_images, check_masks, is_mask_labels

PENALTY_NAMES = {"relu": "scaled_relu", "logbarrier": "pseudo_log_barrier"}


def default_prompt_config(spec, init_seed: int = 0) -> PromptModuleConfig:
    """Module config matched to a backbone shape spec."""
    return PromptModuleConfig(
        in_channels=spec.embed_channels,
        reduced_channels=max(spec.embed_channels // 2, 4),
        dense_out_channels=spec.dense_prompt_channels,
        sparse_tokens=2,
        sparse_dim=spec.token_dim,
        grid=tuple(spec.embed_grid),
        init_seed=init_seed,
    )


class PromptSegmenter(BaseEstimator):
    """Box-supervised segmenter on top of a frozen promptable backbone.

    Parameters mirror the training configuration; defaults follow the
    reference recipe (log-barrier t=5, bands of width 5, size prior
    [0.5, 0.9], loss weights 1e-4/1e-2, batch 4, LR 1e-3 dropped 10x at
    half the epochs, weight decay 1e-4).
    """

    def __init__(
        self,
        backbone: str = "toy",
        penalty: str = "logbarrier",
        t: float = 5.0,
        band_width: int = 5,
        eps_lo: float = 0.5,
        eps_hi: float = 0.9,
        lambda_tight: float = 0.0001,
        lambda_size: float = 0.01,
        batch_size: int = 4,
        lr: float = 0.001,
        weight_decay: float = 0.0001,
        epochs: int = 100,
        lr_drop_factor: float = 0.1,
        lr_drop_at: float = 0.5,
        patience: Optional[int] = 20,
        seed: int = 0,
        validation_fraction: float = 0.0,
        backbone_seed: int = 0,
        medsam_weights: Optional[str] = None,
    ):
        self.backbone = backbone
        self.penalty = penalty
        self.t = t
        self.band_width = band_width
        self.eps_lo = eps_lo
        self.eps_hi = eps_hi
        self.lambda_tight = lambda_tight
        self.lambda_size = lambda_size
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.lr_drop_factor = lr_drop_factor
        self.lr_drop_at = lr_drop_at
        self.patience = patience
        self.seed = seed
        self.validation_fraction = validation_fraction
        self.backbone_seed = backbone_seed
        self.medsam_weights = medsam_weights

    # -- sklearn plumbing ---------------------------------------------------

    def _make_backbone(self):
        if self.backbone == "toy":
            return ToyBackbone(TOY_SPEC, seed=self.backbone_seed)
        if self.backbone == "medsam":
            return MedSamBackbone(self.medsam_weights)
        raise ConfigError(f"unknown backbone {self.backbone!r}")

    def _train_config(self) -> TrainConfig:
        if self.penalty not in PENALTY_NAMES:
            raise ConfigError(f"penalty must be one of {sorted(PENALTY_NAMES)}")
        return TrainConfig(
            batch_size=self.batch_size,
            lr=self.lr,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            lr_drop_factor=self.lr_drop_factor,
            lr_drop_at=self.lr_drop_at,
            weights=LossWeights(self.lambda_tight, self.lambda_size),
            prior=SizePrior(self.eps_lo, self.eps_hi),
            penalty=PenaltyConfig(PENALTY_NAMES[self.penalty], self.t),
            band_width=self.band_width,
            seed=self.seed,
            patience=self.patience,
        )

    def _check_fitted(self):
        if not hasattr(self, "module_"):
            raise NotFittedError("call fit before predicting")

    # -- estimator API ------------------------------------------------------

    def fit(self, X, y):
        """Train on images X (n, H, W) and labels y: boxes (n, 4) as
        (rmin, cmin, rmax, cmax), or binary masks (n, H, W) from which
        tight boxes are derived."""
        images = check_images(X)
        n, h, w = images.shape
        if is_mask_labels(y, n):
            masks = check_masks(y, n, (h, w))
            boxes = None
        else:
            boxes = check_boxes(y, n, (h, w))
            masks = None

        self.backbone_ = self._make_backbone()
        cfg = self._train_config()
        self.pre_cfg_ = PreprocessConfig(
            crop_pad_size=(h, w), model_input=tuple(self.backbone_.spec.input_size)
        )
        loss_shape = loss_shape_for(cfg, self.backbone_)
        ids = [f"fit{i:05d}" for i in range(n)]
        samples = prepare_from_arrays(
            ids,
            list(images),
            None if masks is None else list(masks),
            boxes,
            self.pre_cfg_,
            self.backbone_,
            loss_shape,
        )
        val = []
        if self.validation_fraction > 0 and masks is not None:
            n_val = max(1, int(round(self.validation_fraction * n)))
            if n_val >= n:
                raise ConfigError("validation_fraction leaves no training samples")
            rng = np.random.default_rng(self.seed)
            val_idx = set(rng.choice(n, size=n_val, replace=False).tolist())
            val = [samples[i] for i in sorted(val_idx)]
            samples = [s for i, s in enumerate(samples) if i not in val_idx]

        module_cfg = replace(
            default_prompt_config(self.backbone_.spec), init_seed=self.seed
        )
        self.module_ = PromptModule(module_cfg)
        self.run_record_ = train(cfg, samples, val, self.backbone_, self.module_)
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Foreground probability maps, shape (n, H, W) in [0, 1]."""
        self._check_fitted()
        images = check_images(X)
        out = []
        for i, img in enumerate(images):
            sample = prepare_inference(
                f"pred{i:05d}", img, self.pre_cfg_, self.backbone_
            )
            out.append(predict_probability(self.module_, self.backbone_, sample))
        return np.stack(out)

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        """Binary masks, shape (n, H, W), uint8."""
        proba = self.predict_proba(X)
        return (proba >= threshold).astype(np.uint8)

    def score(self, X, y) -> float:
        """Mean Dice of predictions against binary masks y."""
        images = check_images(X)
        masks = check_masks(y, images.shape[0], images.shape[1:])
        pred = self.predict(images)
        return float(np.mean([dice(p, m) for p, m in zip(pred, masks)]))
