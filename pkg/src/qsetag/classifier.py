"""Scikit-learn style estimator around the fine-tuning loop.

ChallengeClassifier exposes fit/predict/predict_proba/get_params so the
encoder classifier composes with sklearn tooling (clone, pipelines, scoring)
while the heavy lifting stays in training.fine_tune.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .dataset import LabeledPost, balance_upsample, tokenize
from .errors import TrainingError
from .taxonomy import NUM_CATEGORIES, decode
from .training import ModelHandle, TrainConfig, fine_tune, predict


def check_texts(X) -> list[str]:
    """Validate a 1-D collection of nonempty strings."""
    if isinstance(X, str):
        raise TrainingError("X must be a sequence of texts, not a single string")
    texts = list(X)
    if not texts:
        raise TrainingError("X is empty")
    for i, text in enumerate(texts):
        if not isinstance(text, str):
            raise TrainingError(f"X[{i}] is not a string: {type(text).__name__}")
    return texts


def check_labels(y, n: int, num_classes: int = NUM_CATEGORIES) -> np.ndarray:
    labels = np.asarray(y)
    if labels.shape != (n,):
        raise TrainingError(f"y must have shape ({n},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        if np.issubdtype(labels.dtype, np.floating) and np.all(labels == labels.astype(int)):
            labels = labels.astype(int)
        else:
            raise TrainingError("y must contain integer label indices")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise TrainingError(f"label indices must lie in 0..{num_classes - 1}")
    return labels.astype(int)


class ChallengeClassifier(BaseEstimator, ClassifierMixin):
    """Fine-tunes a pretrained encoder to tag posts with challenge categories.

    Parameters mirror the training recipe: 30 epochs, batch 16, learning rate
    2e-5 with a linear warmup schedule, weight decay 0.01, max length 128.
    """

    def __init__(
        self,
        checkpoint_id: str = "bert-base-uncased",
        epochs: int = 30,
        batch_size: int = 16,
        learning_rate: float = 2e-5,
        warmup_fraction: float = 0.1,
        weight_decay: float = 0.01,
        max_len: int = 128,
        seed: int = 0,
        device: Optional[str] = None,
        balance: bool = True,
    ):
        self.checkpoint_id = checkpoint_id
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_fraction = warmup_fraction
        self.weight_decay = weight_decay
        self.max_len = max_len
        self.seed = seed
        self.device = device
        self.balance = balance

    def _config(self) -> TrainConfig:
        return TrainConfig(
            checkpoint_id=self.checkpoint_id,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            warmup_fraction=self.warmup_fraction,
            weight_decay=self.weight_decay,
            max_len=self.max_len,
            seed=self.seed,
            device=self.device,
        )

    def fit(self, X, y, X_val=None, y_val=None) -> "ChallengeClassifier":
        texts = check_texts(X)
        labels = check_labels(y, len(texts))
        cfg = self._config()
        posts = [
            LabeledPost(post_id=f"train-{i}", title="", body_text=t, label_index=int(l))
            for i, (t, l) in enumerate(zip(texts, labels))
        ]
        from . import checkpoints

        tokenizer = checkpoints.load_tokenizer(self.checkpoint_id)
        examples = tokenize(posts, tokenizer, max_len=self.max_len)
        train_set = balance_upsample(examples, seed=self.seed) if self.balance else examples

        val_examples = []
        if X_val is not None:
            val_texts = check_texts(X_val)
            val_labels = check_labels(y_val, len(val_texts))
            val_posts = [
                LabeledPost(post_id=f"val-{i}", title="", body_text=t, label_index=int(l))
                for i, (t, l) in enumerate(zip(val_texts, val_labels))
            ]
            val_examples = tokenize(val_posts, tokenizer, max_len=self.max_len)

        self.handle_, self.epoch_logs_ = fine_tune(train_set, val_examples, cfg)
        self.classes_ = np.arange(NUM_CATEGORIES)
        self.best_epoch_ = self.handle_.best_epoch
        self.best_val_acc_ = self.handle_.best_val_acc
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "handle_"):
            raise TrainingError("classifier is not fitted yet; call fit first")

    def predict_proba(self, X) -> np.ndarray:
        self._check_fitted()
        texts = check_texts(X)
        posts = [
            LabeledPost(post_id=f"pred-{i}", title="", body_text=t, label_index=0)
            for i, t in enumerate(texts)
        ]
        examples = tokenize(posts, self.handle_.tokenizer, max_len=self.max_len)
        return predict(self.handle_, examples)

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def predict_categories(self, X) -> list[str]:
        return [decode(int(i)).display_name for i in self.predict(X)]

    def save(self, out_dir: str | Path) -> Path:
        self._check_fitted()
        return self.handle_.save(out_dir, extra={"params": self.get_params()})

    @classmethod
    def from_pretrained(cls, model_dir: str | Path) -> "ChallengeClassifier":
        handle = ModelHandle.load(model_dir)
        est = cls(checkpoint_id=handle.checkpoint_id, max_len=handle.max_len)
        est.handle_ = handle
        est.epoch_logs_ = []
        est.classes_ = np.arange(NUM_CATEGORIES)
        est.best_epoch_ = handle.best_epoch
        est.best_val_acc_ = handle.best_val_acc
        return est
