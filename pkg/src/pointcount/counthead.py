"""Bounded count prediction from deep-layer features.

Counts are saturated labels 0..C_max where the top label means "C_max or
more". The classifier is a linear one-vs-rest SVM trained by stochastic
subgradient descent on the hinge loss; features concatenate the deepest
pooled activations, each segment L2-normalized so no layer dominates.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import total_ordering

import numpy as np

from .dataio import pack_json, read_container, unpack_json, write_container
from .errors import DataError
from .grids import global_max_pool, l2_normalize

DEFAULT_C_MAX = 4


@total_ordering
@dataclass(frozen=True)
class CountLabel:
    """Saturated count: value in 0..c_max, where value == c_max reads 'c_max+'."""

    value: int
    c_max: int = DEFAULT_C_MAX

    def __post_init__(self):
        if not 0 <= self.value <= self.c_max:
            raise DataError(f"count label {self.value} outside 0..{self.c_max}")

    @property
    def saturated(self) -> bool:
        return self.value == self.c_max

    def __str__(self):
        return f"{self.value}+" if self.saturated else str(self.value)

    def __lt__(self, other):
        return self.value < other.value

    def matches(self, true_count: int) -> bool:
        return self.value == min(int(true_count), self.c_max)


def saturate_count(n: int, c_max: int = DEFAULT_C_MAX) -> CountLabel:
    if n < 0:
        raise DataError("count must be non-negative")
    return CountLabel(min(int(n), c_max), c_max)


def extract_count_features(trace: dict[str, np.ndarray]) -> np.ndarray:
    """Concatenate [max-pooled last pooling stage, max-pooled channel-mix
    maps, averaged-pool vector], each segment unit-normalized.

    The trace must contain the final pooling stage, the "nin" maps and the
    "gap" vector produced by Network.forward_with_trace.
    """
    pool_names = [k for k in trace if k.startswith("pool")]
    if not pool_names or "nin" not in trace or "gap" not in trace:
        raise DataError("trace is missing pool/nin/gap stages")
    last_pool = max(pool_names, key=lambda n: int(n.removeprefix("pool")))
    segments = [
        global_max_pool(trace[last_pool]),
        global_max_pool(trace["nin"]),
        np.asarray(trace["gap"], dtype=np.float32),
    ]
    return np.concatenate([l2_normalize(s) for s in segments])


@dataclass
class LinearSvmModel:
    weights: np.ndarray   # (n_classes, dim)
    biases: np.ndarray    # (n_classes,)
    classes: np.ndarray   # label value per row
    c_max: int = DEFAULT_C_MAX
    degenerate: bool = False

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[1]

    def scores(self, feature: np.ndarray) -> np.ndarray:
        feature = np.asarray(feature, dtype=np.float64)
        if feature.shape != (self.feature_dim,):
            raise DataError(f"feature dim {feature.shape} != model dim {self.feature_dim}")
        return self.weights @ feature + self.biases


def svm_hinge_loss(model: LinearSvmModel, features: np.ndarray, labels: np.ndarray, lam: float) -> float:
    """Regularized one-vs-rest hinge objective over the full set."""
    total = 0.0
    for row, cls in enumerate(model.classes):
        y = np.where(labels == cls, 1.0, -1.0)
        margins = features @ model.weights[row] + model.biases[row]
        total += float(np.mean(np.maximum(0.0, 1.0 - y * margins)))
        total += 0.5 * lam * float(model.weights[row] @ model.weights[row])
    return total


def svm_train(features: np.ndarray, labels, lam: float = 1e-4, epochs: int = 50,
              seed: int = 0, c_max: int = DEFAULT_C_MAX) -> LinearSvmModel:
    """One-vs-rest hinge loss via stochastic subgradient descent.

    Learning rate 1/(lam * t). A single-label dataset yields a degenerate
    model flagged as such rather than an error.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray([lab.value if isinstance(lab, CountLabel) else int(lab) for lab in labels])
    if features.ndim != 2 or len(features) != len(labels):
        raise DataError("features must be (n, dim) aligned with labels")
    if lam <= 0:
        raise DataError("lambda must be positive")
    n, dim = features.shape
    classes = np.arange(c_max + 1)
    present = np.unique(labels)
    degenerate = len(present) < 2

    rng = np.random.default_rng(seed)
    weights = np.zeros((len(classes), dim))
    biases = np.zeros(len(classes))
    if not degenerate:
        for row, cls in enumerate(classes):
            y = np.where(labels == cls, 1.0, -1.0)
            t = 0
            for _ in range(epochs):
                order = rng.permutation(n)
                for i in order:
                    t += 1
                    eta = 1.0 / (lam * t)
                    margin = y[i] * (weights[row] @ features[i] + biases[row])
                    weights[row] *= 1.0 - eta * lam
                    if margin < 1.0:
                        weights[row] += eta * y[i] * features[i]
                        biases[row] += eta * y[i]
    return LinearSvmModel(weights, biases, classes, c_max, degenerate)


def svm_predict(model: LinearSvmModel, feature: np.ndarray) -> CountLabel:
    """Highest-scoring count label; ties break toward the smaller count."""
    scores = model.scores(feature)
    best = int(np.argmax(scores))  # argmax returns the first (smallest) index on ties
    return CountLabel(int(model.classes[best]), model.c_max)


def save_svm(path, model: LinearSvmModel, run_config: dict | None = None) -> None:
    tensors = {
        "weights": model.weights.astype(np.float32),
        "biases": model.biases.astype(np.float32),
        "classes": model.classes.astype(np.float32),
        "__meta__": pack_json({"c_max": model.c_max, "degenerate": model.degenerate}),
    }
    if run_config is not None:
        tensors["__run_config__"] = pack_json(run_config)
    write_container(path, tensors)


def load_svm(path) -> LinearSvmModel:
    tensors = read_container(path)
    meta = unpack_json(tensors["__meta__"])
    return LinearSvmModel(
        tensors["weights"].astype(np.float64),
        tensors["biases"].astype(np.float64),
        tensors["classes"].astype(np.int64),
        c_max=int(meta["c_max"]),
        degenerate=bool(meta["degenerate"]),
    )
