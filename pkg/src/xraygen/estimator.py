"""scikit-learn style wrapper: ``ReportGenerator().fit(images, reports).predict(images)``."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import decode, metrics
from .data import Sample
from .model import ModelConfig
from .pretrain import PretrainConfig, pretrained_model
from .trainer import AlignmentMode, TrainConfig, count_trainable, fit


def check_images(X, image_size: Optional[int] = None, channels: Optional[int] = None) -> np.ndarray:
    """Validate a ``[n, C, H, W]`` stack of finite images with values in [0, 1]."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4:
        raise ValueError(f"expected images shaped [n, C, H, W], got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("got 0 images")
    if X.shape[2] != X.shape[3]:
        raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
    if image_size is not None and X.shape[2] != image_size:
        raise ValueError(f"images are {X.shape[2]} pixels wide, model expects {image_size}")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"images have {X.shape[1]} channels, model expects {channels}")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinity")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return X


def check_reports(y, n: int) -> list[str]:
    if isinstance(y, str):
        raise TypeError("reports must be a sequence of strings, not a single string")
    y = list(y)
    if len(y) != n:
        raise ValueError(f"{len(y)} reports for {n} images")
    if not all(isinstance(r, str) and r.strip() for r in y):
        raise ValueError("every report must be a nonempty string")
    return y


class ReportGenerator(BaseEstimator):
    """Image-to-report generator trained in one of the three alignment modes.

    ``fit`` pretrains the toy LM on the training reports, freezes it, then
    trains the mode's parameter set. ``predict`` runs beam search.
    """

    def __init__(
        self,
        mode: str = "shallow",
        lr: float = 1e-4,
        batch_size: int = 6,
        steps: int = 1000,
        seed: int = 0,
        lora_r: int = 16,
        lora_alpha: float = 16.0,
        optimizer: str = "adamw",
        pretrain_steps: int = 3000,
        beam_size: int = decode.DEFAULT_BEAM_SIZE,
        max_len: int = decode.DEFAULT_MAX_LEN,
        d_v: int = 32,
        d_llm: int = 64,
        encoder_layers: int = 2,
        lm_layers: int = 2,
        patch_size: int = 8,
    ):
        self.mode = mode
        self.lr = lr
        self.batch_size = batch_size
        self.steps = steps
        self.seed = seed
        self.lora_r = lora_r
        self.lora_alpha = lora_alpha
        self.optimizer = optimizer
        self.pretrain_steps = pretrain_steps
        self.beam_size = beam_size
        self.max_len = max_len
        self.d_v = d_v
        self.d_llm = d_llm
        self.encoder_layers = encoder_layers
        self.lm_layers = lm_layers
        self.patch_size = patch_size

    def _model_config(self, X: np.ndarray) -> ModelConfig:
        return ModelConfig(
            image_size=X.shape[2], patch_size=self.patch_size, in_channels=X.shape[1], d_v=self.d_v,
            encoder_layers=self.encoder_layers, d_llm=self.d_llm, lm_layers=self.lm_layers,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            mode=AlignmentMode.parse(self.mode).value, lr=self.lr, batch_size=self.batch_size, steps=self.steps,
            seed=self.seed, optimizer=self.optimizer, lora_r=self.lora_r, lora_alpha=self.lora_alpha,
        )

    def fit(self, X, y: Sequence[str]):
        X = check_images(X)
        y = check_reports(y, len(X))
        train_config = self._train_config()
        self.model_ = pretrained_model(
            self._model_config(X), y, PretrainConfig(steps=self.pretrain_steps, seed=self.seed), seed=self.seed,
        )
        samples = [Sample(f"x{i}", img, r) for i, (img, r) in enumerate(zip(X, y))]
        self.history_ = fit(self.model_, samples, train_config)
        self.n_trainable_ = count_trainable(self.model_, train_config.mode)
        self.image_shape_ = X.shape[1:]
        return self

    def predict(self, X) -> list[str]:
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_shape_[1], self.image_shape_[0])
        return [text for text, _ in decode.generate(self.model_, X, self.beam_size, self.max_len)]

    def score(self, X, y) -> float:
        """Corpus BLEU-4 of the predicted reports."""
        y = check_reports(y, len(np.asarray(X)))
        pairs = [metrics.EvalPair.from_text(c, r) for c, r in zip(self.predict(X), y)]
        return metrics.bleu(pairs, 4)
