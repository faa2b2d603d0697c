"""Linear probing on frozen encoder features, and Final / Average Accuracy."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .networks import Learner
from .stream import Dataset, stratified_split


@dataclass
class ProbeConfig:
    batch: int = 256
    lr_init: float = 0.05
    lr_decay_factor: float = 3.0
    max_epochs: int = 100
    lr_min: float = 1e-4
    patience: int = 5
    momentum: float = 0.9

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class LinearProbe:
    weight: np.ndarray
    bias: np.ndarray
    mean: np.ndarray
    scale: np.ndarray

    def logits(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.mean) / self.scale) @ self.weight + self.bias

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(features), axis=1)

    def accuracy(self, features: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(features) == labels))


@dataclass
class ProbeResult:
    probe: LinearProbe
    val_accuracy: float
    epochs: int
    lr_history: list[float] = field(default_factory=list)


@dataclass
class AccuracyRecord:
    """Probe accuracy after each experience."""

    accuracies: list[float] = field(default_factory=list)

    def append(self, acc: float):
        if not 0.0 <= acc <= 1.0:
            raise ValueError(f"accuracy {acc} outside [0, 1]")
        self.accuracies.append(float(acc))

    @property
    def final(self) -> float:
        return final_and_average_accuracy(self.accuracies)[0]

    @property
    def average(self) -> float:
        return final_and_average_accuracy(self.accuracies)[1]


def extract_features(encoder: Learner, inputs: np.ndarray) -> np.ndarray:
    """Pre-projector representations in eval mode; no graph is built."""
    return encoder.encode(Tensor(inputs), training=False).data.copy()


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_probe(features: np.ndarray, labels: np.ndarray, config: ProbeConfig | None = None, seed: int = 0,
                val_features: np.ndarray | None = None, val_labels: np.ndarray | None = None,
                class_count: int | None = None) -> ProbeResult:
    """Multinomial logistic regression by minibatch SGD with a plateau schedule.

    The learning rate is divided by ``lr_decay_factor`` after ``patience``
    epochs without a validation improvement; training stops once it falls
    below ``lr_min`` or after ``max_epochs``. The best-validation weights
    are returned. Without an explicit validation set, 10% of each class is
    held out.
    """
    config = config or ProbeConfig()
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if not np.all(np.isfinite(features)):
        raise ValueError("probe features must be finite")
    k = int(class_count or labels.max() + 1)
    if np.unique(labels).size < 2:
        raise ValueError("probe needs at least two classes")
    if val_features is None:
        ds = Dataset(features, labels, k)
        tr, va = stratified_split(ds, 0.1, seed)
        features, labels, val_features, val_labels = features[tr], labels[tr], features[va], labels[va]

    rng = np.random.default_rng(seed)
    mean = features.mean(axis=0)
    scale = features.std(axis=0) + 1e-8
    x = (features - mean) / scale
    n, f = x.shape
    w = np.zeros((f, k))
    b = np.zeros(k)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    onehot = np.eye(k)[labels]

    lr = config.lr_init
    best = LinearProbe(w.copy(), b.copy(), mean, scale)
    best_acc = best.accuracy(val_features, val_labels)
    lr_history = []
    stale = 0
    epoch = 0
    while epoch < config.max_epochs and lr >= config.lr_min:
        lr_history.append(lr)
        order = rng.permutation(n)
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            p = _softmax(x[idx] @ w + b)
            g = (p - onehot[idx]) / idx.size
            vw = config.momentum * vw + x[idx].T @ g
            vb = config.momentum * vb + g.sum(axis=0)
            w -= lr * vw
            b -= lr * vb
        epoch += 1
        acc = LinearProbe(w, b, mean, scale).accuracy(val_features, val_labels)
        if acc > best_acc:
            best_acc, stale = acc, 0
            best = LinearProbe(w.copy(), b.copy(), mean, scale)
        else:
            stale += 1
            if stale >= config.patience:
                lr /= config.lr_decay_factor
                stale = 0
    return ProbeResult(best, best_acc, epoch, lr_history)


def probe_accuracy(encoder: Learner, train: Dataset, val: Dataset, test: Dataset,
                   config: ProbeConfig | None = None, seed: int = 0) -> float:
    """Task-agnostic probe over all classes: fit on ``train``, schedule on ``val``, score on ``test``."""
    result = train_probe(
        extract_features(encoder, train.inputs), train.labels, config, seed,
        extract_features(encoder, val.inputs), val.labels, train.class_count,
    )
    return result.probe.accuracy(extract_features(encoder, test.inputs), test.labels)


def final_and_average_accuracy(records) -> tuple[float, float]:
    """``(a_T, mean(a_1..a_T))``."""
    accs = [float(a) for a in records]
    if not accs:
        raise ValueError("need at least one accuracy record")
    return accs[-1], float(np.mean(accs))
