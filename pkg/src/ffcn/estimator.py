"""scikit-learn compatible wrapper around the training loop."""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .data import ActionDescription, ValidationError, VideoSample
from .model import Batch
from .training import MetricsRecord, Trainer, evaluate_batch, predict_scores


def check_samples(X, T: int | None = None, N: int | None = None) -> list[VideoSample]:
    """Validate a sequence of samples and return it as a list.

    Every sample must pass its own invariants and share the same T and N.
    """
    if isinstance(X, VideoSample):
        raise ValidationError("expected a sequence of VideoSample, got a single sample")
    try:
        samples = list(X)
    except TypeError:
        raise ValidationError(f"expected a sequence of VideoSample, got {type(X).__name__}") from None
    if not samples:
        raise ValidationError("empty sample sequence")
    for s in samples:
        if not isinstance(s, VideoSample):
            raise ValidationError(f"expected VideoSample entries, got {type(s).__name__}")
    T = samples[0].T if T is None else T
    N = samples[0].N if N is None else N
    for s in samples:
        s.validate(T)
        if s.N != N:
            raise ValidationError(f"sample {s.id!r} has {s.N} slots, expected {N}")
    return samples


def check_labels(y, samples: Sequence[VideoSample]) -> np.ndarray:
    """Labels as an int array aligned with ``samples``; defaults to each sample's own label."""
    if y is None:
        y = [s.label for s in samples]
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != len(samples):
        raise ValidationError(f"y must be 1-D with {len(samples)} entries, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValidationError(f"labels must be integers, got dtype {y.dtype}")
    return y.astype(np.intp)


def class_descriptions(samples: Sequence[VideoSample], y: np.ndarray) -> dict[int, ActionDescription]:
    out: dict[int, ActionDescription] = {}
    for s, label in zip(samples, y):
        d = out.setdefault(int(label), s.description)
        if d != s.description:
            raise ValidationError(f"class {label} carries two different descriptions")
    return out


class FFCNClassifier(ClassifierMixin, BaseEstimator):
    """Two-branch composition classifier over hand-object tracklet samples.

    ``X`` is a sequence of :class:`~ffcn.data.VideoSample`; each sample's
    description supplies its class's component layout. ``config`` provides
    every setting not exposed as a constructor argument.
    """

    def __init__(self, D: int = 128, epochs: int = 25, batch_size: int = 64, lr: float = 0.01,
                 lam: float = 0.1, composition: bool = True, composed_per_batch: int = 10,
                 tail_classes: int = 20, seed: int = 0, precision: str = "float32",
                 config: RunConfig | None = None):
        self.D = D
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lam = lam
        self.composition = composition
        self.composed_per_batch = composed_per_batch
        self.tail_classes = tail_classes
        self.seed = seed
        self.precision = precision
        self.config = config

    def _run_config(self, T: int, N: int, A: int) -> RunConfig:
        base = self.config if self.config is not None else RunConfig()
        cfg = base.replace(D=self.D, epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, lam=self.lam,
                           composition=self.composition, composed_per_batch=self.composed_per_batch,
                           tail_classes=self.tail_classes, seed=self.seed, precision=self.precision,
                           T=T, N=N, appearance_dim=A)
        cfg.validate()
        return cfg

    def fit(self, X, y=None, X_val=None, y_val=None) -> "FFCNClassifier":
        samples = check_samples(X)
        y = check_labels(y, samples)
        descs = class_descriptions(samples, y)
        s0 = samples[0]
        cfg = self._run_config(s0.T, s0.N, s0.appearance.shape[-1])
        self.classes_ = np.array(sorted(descs), dtype=np.intp)
        train = [_relabel(s, l) for s, l in zip(samples, y)]
        val = []
        if X_val is not None:
            vs = check_samples(X_val, cfg.T, cfg.N)
            val = [_relabel(s, l) for s, l in zip(vs, check_labels(y_val, vs))]
        trainer = Trainer(cfg, train, val, [descs[c] for c in self.classes_], class_ids=self.classes_)
        trainer.fit()
        self.model_ = trainer.model
        self.config_ = cfg
        self.history_: list[MetricsRecord] = trainer.history
        self.tail_classes_ = np.array(trainer.targets, dtype=np.intp)
        self.n_features_in_ = s0.N
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        samples = check_samples(X, self.config_.T, self.config_.N)
        return predict_scores(self.model_, Batch.from_samples(samples, self.config_.n_max_noun))

    def predict_proba(self, X) -> np.ndarray:
        s = self.decision_function(X).astype(np.float64)
        s -= s.max(axis=1, keepdims=True)
        p = np.exp(s)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        # argmax keeps the lowest index on ties
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def evaluate(self, X, y=None) -> MetricsRecord:
        check_is_fitted(self, "model_")
        samples = check_samples(X, self.config_.T, self.config_.N)
        y = check_labels(y, samples)
        batch = Batch.from_samples([_relabel(s, l) for s, l in zip(samples, y)], self.config_.n_max_noun)
        return evaluate_batch(self.model_, batch, tail=self.tail_classes_.tolist())


def _relabel(s: VideoSample, label: int) -> VideoSample:
    if s.label == label:
        return s
    return VideoSample(s.id, s.roles, s.boxes, s.present, s.appearance, int(label), s.description, s.meta)
