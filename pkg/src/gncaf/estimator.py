"""scikit-learn style front end: ``GncafSegmenter().fit(slides, masks).predict(slides)``."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .backbone import GncafModel, ModelConfig
from .training import (
    SlideRecord,
    TrainConfig,
    evaluate,
    load_checkpoint,
    predict_slide_mask,
    prepare_slide,
    save_checkpoint,
    train,
)
from .validation import check_features, check_slides, check_slides_masks

__all__ = ["GncafSegmenter", "set_deterministic"]

_MODEL_KEYS = tuple(ModelConfig.__dataclass_fields__)


def set_deterministic(enabled: bool = True) -> None:
    """Single-threaded, deterministic kernels; repeated runs become bit-identical."""
    if enabled:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(enabled)


class GncafSegmenter(BaseEstimator):
    """Patch-wise slide segmenter with multi-hop neighboring-tile context.

    Slides are tiled into ``patch_size`` tiles after saturation-based
    foreground filtering. Each tile is segmented by a token backbone whose
    tokens attend to a context token built from the tile's ``hops``-hop
    neighborhood in the 4-connected tile graph.

    Parameters mirror :class:`ModelConfig` and :class:`TrainConfig`, plus the
    tiling options ``threshold_mode``, ``min_tissue_fraction`` and
    ``fixed_threshold``.
    """

    def __init__(
        self,
        patch_size=64,
        n_classes=4,
        hops=3,
        encoder_mode="trainable_cnn",
        encoder_trainable=False,
        feature_dim=64,
        normalize_features=False,
        aggregator="gcn",
        gcn_hidden=128,
        gcn_activation="relu",
        aggregator_heads=8,
        mlp_hidden=128,
        token_stride=8,
        token_dim=64,
        fusion="msa",
        fusion_layers=1,
        fusion_heads=8,
        fusion_ffn=False,
        batch_size=16,
        learning_rate=5e-5,
        epochs=10,
        seed=0,
        class_weights=None,
        background_ratio=1.0,
        metric_scope="all",
        metric_pooling="pooled",
        calibrate_encoder=True,
        encoder_lr_scale=0.01,
        threshold_mode="otsu",
        min_tissue_fraction=0.25,
        fixed_threshold=0.1,
        deterministic=False,
    ):
        self.patch_size = patch_size
        self.n_classes = n_classes
        self.hops = hops
        self.encoder_mode = encoder_mode
        self.encoder_trainable = encoder_trainable
        self.feature_dim = feature_dim
        self.normalize_features = normalize_features
        self.aggregator = aggregator
        self.gcn_hidden = gcn_hidden
        self.gcn_activation = gcn_activation
        self.aggregator_heads = aggregator_heads
        self.mlp_hidden = mlp_hidden
        self.token_stride = token_stride
        self.token_dim = token_dim
        self.fusion = fusion
        self.fusion_layers = fusion_layers
        self.fusion_heads = fusion_heads
        self.fusion_ffn = fusion_ffn
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.seed = seed
        self.class_weights = class_weights
        self.background_ratio = background_ratio
        self.metric_scope = metric_scope
        self.metric_pooling = metric_pooling
        self.calibrate_encoder = calibrate_encoder
        self.encoder_lr_scale = encoder_lr_scale
        self.threshold_mode = threshold_mode
        self.min_tissue_fraction = min_tissue_fraction
        self.fixed_threshold = fixed_threshold
        self.deterministic = deterministic

    # -- configuration -----------------------------------------------------

    def model_config(self) -> ModelConfig:
        params = self.get_params()
        return ModelConfig(**{k: params[k] for k in _MODEL_KEYS})

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            seed=self.seed,
            class_weights=self.class_weights,
            background_ratio=self.background_ratio,
            metric_scope=self.metric_scope,
            metric_pooling=self.metric_pooling,
            calibrate_encoder=self.calibrate_encoder,
            encoder_lr_scale=self.encoder_lr_scale,
        )

    # -- data --------------------------------------------------------------

    def prepare(self, X, y=None, features=None) -> list[SlideRecord]:
        """Tile slides (and masks) into records; already-prepared records pass through."""
        if isinstance(X, (list, tuple)) and X and all(isinstance(r, SlideRecord) for r in X):
            for rec in X:
                if rec.grid.patch_size_px != self.patch_size:
                    raise ValueError(f"{rec.slide_id}: tiled at {rec.grid.patch_size_px}px, estimator uses {self.patch_size}px")
            return list(X)
        if y is None:
            slides, masks = check_slides(X), None
        else:
            slides, masks = check_slides_masks(X, y, self.n_classes)
        records = [
            prepare_slide(
                s,
                None if masks is None else masks[i],
                self.patch_size,
                self.threshold_mode,
                self.min_tissue_fraction,
                self.fixed_threshold,
            )
            for i, s in enumerate(slides)
        ]
        if features is not None:
            if len(features) != len(records):
                raise ValueError(f"{len(features)} feature matrices for {len(records)} slides")
            for rec, f in zip(records, features):
                rec.features = check_features(f, rec.n_nodes, self.feature_dim, rec.slide_id)
        return records

    # -- estimator API -----------------------------------------------------

    def fit(self, X, y=None, X_val=None, y_val=None, features=None, val_features=None, progress=None):
        """Train on slides ``X`` with label rasters ``y``.

        ``X_val``/``y_val`` select the best epoch by validation mF1; without
        them the last epoch is kept.
        """
        set_deterministic(bool(self.deterministic))
        records = self.prepare(X, y, features)
        val = self.prepare(X_val, y_val, val_features) if X_val is not None else []
        for rec in records + val:
            if rec.tile_masks is None:
                raise ValueError(f"{rec.slide_id}: ground truth required for fitting")
        torch.manual_seed(self.seed)
        model = GncafModel(self.model_config())
        _, self.history_ = train(model, records, val, self.train_config(), progress)
        self.model_ = model
        return self

    def predict(self, X, features=None) -> list[np.ndarray]:
        """Slide-level label rasters, one per input slide."""
        check_is_fitted(self, "model_")
        return [predict_slide_mask(self.model_, rec) for rec in self.prepare(X, None, features)]

    def evaluate(self, X, y=None, features=None):
        check_is_fitted(self, "model_")
        return evaluate(self.model_, self.prepare(X, y, features), self.metric_scope, self.metric_pooling)

    def score(self, X, y=None, features=None) -> float:
        """Macro F1 in [0, 1]."""
        return self.evaluate(X, y, features).mF1

    # -- persistence -------------------------------------------------------

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, self.get_params(), getattr(self, "history_", []))

    @classmethod
    def load(cls, path) -> "GncafSegmenter":
        model, payload = load_checkpoint(path)
        valid = cls().get_params()
        est = cls(**{k: v for k, v in payload["run_config"].items() if k in valid})
        est.model_ = model
        est.history_ = payload.get("history", [])
        return est
