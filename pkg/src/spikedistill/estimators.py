"""scikit-learn style wrappers around the three pipeline stages.

    teacher = ANNClassifier(arch="vgg9", role="teacher").fit(X, y)
    inter = ANNClassifier(arch="3conv2linear").fit(X, y)
    snn = SpikingClassifier(time_steps=100).fit(X, y, source=inter)
    student = LayerwiseDistiller(teacher=teacher).fit(X, y, student=snn)
    student.score(X_test, y_test)

Images are arrays shaped (N, C, H, W) with values in [-1, 1].
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import ann, conversion, distillation, network, snn
from .datasets import Dataset
from .metrics import top1_accuracy
from .optim import Optimizer
from .tensor import DTYPE


def check_images(X, image_shape=None):
    """Validate a 4-D float image batch; returns a float32 array."""
    X = check_array(X, allow_nd=True, dtype=[np.float32, np.float64], ensure_all_finite=True)
    if X.ndim != 4:
        raise ValueError(f"expected images shaped (N, C, H, W), got {X.shape}")
    if image_shape is not None and tuple(X.shape[1:]) != tuple(image_shape):
        raise ValueError(f"expected images of shape {tuple(image_shape)}, got {X.shape[1:]}")
    return X.astype(DTYPE, copy=False)


def check_labels(y, n, num_classes=None):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    if num_classes is not None and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    return y.astype(np.int64)


def _as_dataset(X, y, num_classes):
    return Dataset(X, y, num_classes)


def _checkpoint_of(obj):
    if isinstance(obj, network.Checkpoint):
        return obj
    check_is_fitted(obj, "checkpoint_")
    return obj.checkpoint_


class _Base(ClassifierMixin, BaseEstimator):
    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y, sample_weight=None):
        if sample_weight is not None:
            return super().score(X, y, sample_weight)
        return top1_accuracy(self.predict_proba(X), np.asarray(y))


class ANNClassifier(_Base):
    """Train a network from the architecture registry with SGD or Adam.

    ``validation`` may hold ``(X_val, y_val)``; the checkpoint with the best
    validation accuracy is kept, otherwise training accuracy decides.
    """

    def __init__(self, arch="3conv2linear", role="intermediate", arch_params=None,
                 num_classes=10, epochs=30, batch_size=32, lr=0.01, momentum=0.9,
                 weight_decay=5e-4, optimizer="sgd", random_state=0, validation=None):
        self.arch = arch
        self.role = role
        self.arch_params = arch_params
        self.num_classes = num_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.optimizer = optimizer
        self.random_state = random_state
        self.validation = validation

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X), self.num_classes)
        spec = network.build_architecture(self.arch, X.shape[1:], self.num_classes,
                                          **(self.arch_params or {})).with_role(self.role)
        train = _as_dataset(X, y, self.num_classes)
        if self.validation is not None:
            Xv = check_images(self.validation[0], X.shape[1:])
            val = _as_dataset(Xv, check_labels(self.validation[1], len(Xv), self.num_classes),
                              self.num_classes)
        else:
            val = train
        cfg = ann.TrainConfig(self.epochs, self.batch_size, self.lr, self.momentum,
                              self.weight_decay, self.optimizer, int(self.random_state))
        self.checkpoint_, self.history_ = ann.train_ann(spec, train, val, cfg)
        self.classes_ = np.arange(self.num_classes)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "checkpoint_")
        X = check_images(X, self.checkpoint_.spec.input_shape)
        return ann.predict_logits(self.checkpoint_, X)

    def predict_proba(self, X):
        return ann.softmax(self.decision_function(X))


class SpikingClassifier(_Base):
    """Converted SNN: copies a trained ANN's weights and balances thresholds on ``X``."""

    def __init__(self, time_steps=100, calibration_time_steps=500, calibration_samples=512,
                 percentile=None, coding="poisson", leak=1.0, gamma=0.3, random_state=0):
        self.time_steps = time_steps
        self.calibration_time_steps = calibration_time_steps
        self.calibration_samples = calibration_samples
        self.percentile = percentile
        self.coding = coding
        self.leak = leak
        self.gamma = gamma
        self.random_state = random_state

    def fit(self, X, y=None, source=None):
        if source is None:
            raise ValueError("SpikingClassifier.fit needs source=, a fitted ANNClassifier or Checkpoint")
        ann_ckpt = _checkpoint_of(source)
        X = check_images(X, ann_ckpt.spec.input_shape)
        n = min(len(X), int(self.calibration_samples))
        report = conversion.balance_thresholds(ann_ckpt, X[:n], self.calibration_time_steps,
                                               seed=self.random_state, percentile=self.percentile,
                                               coding=self.coding)
        self.report_ = report
        self.checkpoint_ = conversion.convert(ann_ckpt, report, self.leak)
        self.classes_ = np.arange(ann_ckpt.spec.num_classes)
        return self

    def snn_config(self):
        return snn.SnnConfig(leak=self.leak, gamma=self.gamma, time_steps=self.time_steps)

    def predict_proba(self, X):
        check_is_fitted(self, "checkpoint_")
        X = check_images(X, self.checkpoint_.spec.input_shape)
        return snn.simulate(self.checkpoint_, X, self.snn_config(), self.coding,
                            seed=self.random_state + 7919)


class LayerwiseDistiller(SpikingClassifier):
    """Fine-tune a converted SNN with cross-entropy plus teacher attention transfer.

    ``alpha=0`` (or ``teacher=None``) gives the hybrid baseline.
    """

    def __init__(self, teacher=None, alpha=0.9, mode="activation", levels=network.LEVELS,
                 epochs=4, batch_size=16, lr=1e-4, weight_decay=5e-4, time_steps=100,
                 coding="poisson", leak=1.0, gamma=0.3, random_state=0, validation=None):
        self.teacher = teacher
        self.alpha = alpha
        self.mode = mode
        self.levels = levels
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.time_steps = time_steps
        self.coding = coding
        self.leak = leak
        self.gamma = gamma
        self.random_state = random_state
        self.validation = validation

    def fit(self, X, y, student=None):
        if student is None:
            raise ValueError("LayerwiseDistiller.fit needs student=, a converted SNN")
        start = _checkpoint_of(student)
        num_classes = start.spec.num_classes
        X = check_images(X, start.spec.input_shape)
        y = check_labels(y, len(X), num_classes)
        teacher = _checkpoint_of(self.teacher) if self.teacher is not None and self.alpha else None
        train = _as_dataset(X, y, num_classes)
        if self.validation is not None:
            Xv = check_images(self.validation[0], start.spec.input_shape)
            val = _as_dataset(Xv, check_labels(self.validation[1], len(Xv), num_classes), num_classes)
        else:
            val = train
        dcfg = distillation.DistillConfig(alpha=self.alpha, mode=self.mode, levels=tuple(self.levels))
        opt = Optimizer("adam", self.lr, weight_decay=self.weight_decay)
        self.checkpoint_, self.history_ = distillation.train_student(
            teacher, start, train, val, dcfg, self.snn_config(), opt, self.epochs,
            seed=self.random_state, batch_size=self.batch_size, coding=self.coding)
        self.classes_ = np.arange(num_classes)
        return self
