"""Linear probing of discriminator representations.

Every conv layer's post-activation map is max-pooled to a 4x4 grid, the
blocks are flattened and concatenated, and an L2-regularized softmax
classifier is fit on the standardized vectors.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import to_batch
from .errors import DataValidationError, ShapeError

GRID = 4


@dataclass
class ProbeVector:
    values: np.ndarray
    layout: list[tuple[int, int, int, int]]  # (layer index, channels, 4, 4)


def probe_layout(d) -> list[tuple[int, int, int, int]]:
    return [(i, c, GRID, GRID) for i, c in enumerate(d.config.channels)]


def _pooled(d, batch: torch.Tensor) -> torch.Tensor:
    blocks = []
    for i, fmap in enumerate(d.features(batch)):
        if min(fmap.shape[-2:]) < GRID:
            raise ShapeError(f"layer {i} activation is {tuple(fmap.shape[-2:])}, smaller than the {GRID}x{GRID} grid")
        blocks.append(F.adaptive_max_pool2d(fmap, GRID).flatten(1))
    return torch.cat(blocks, dim=1)


def extract_feature_matrix(d, images: Sequence[np.ndarray], batch_size: int = 256) -> np.ndarray:
    """Probe vectors for many images, shape ``(n, 16 * sum(channels))``.

    Pooling windows follow adaptive max pooling: window ``i`` along an axis
    of length ``h`` spans ``[floor(i*h/4), ceil((i+1)*h/4))``.
    """
    d.eval()
    rows = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            rows.append(_pooled(d, to_batch(images[start : start + batch_size])).double().numpy())
    return np.concatenate(rows) if rows else np.zeros((0, GRID * GRID * sum(d.config.channels)))


def extract_features(d, image: np.ndarray) -> ProbeVector:
    return ProbeVector(extract_feature_matrix(d, [image])[0], probe_layout(d))


@dataclass(frozen=True)
class ProbeConfig:
    num_classes: int
    dim: int
    l2_strength: float = 1e-3


@dataclass
class LinearProbe:
    weights: np.ndarray  # (K, D)
    bias: np.ndarray  # (K,)
    l2_strength: float = 0.0
    feature_mean: np.ndarray | None = None
    feature_scale: np.ndarray | None = None
    loss_history: list[float] = field(default_factory=list)

    kind = "linear_probe"
    config_class = ProbeConfig

    @property
    def config(self) -> ProbeConfig:
        return ProbeConfig(self.weights.shape[0], self.weights.shape[1], float(self.l2_strength))

    def layer_spec(self) -> list[dict]:
        return [{"type": "standardize"}, {"type": "linear", "channels": self.weights.shape[0], "activation": "softmax"}]

    def state_arrays(self) -> dict[str, np.ndarray]:
        dim = self.weights.shape[1]
        return {
            "weights": self.weights,
            "bias": self.bias,
            "feature_mean": np.zeros(dim) if self.feature_mean is None else self.feature_mean,
            "feature_scale": np.ones(dim) if self.feature_scale is None else self.feature_scale,
        }

    @classmethod
    def from_state(cls, config: ProbeConfig, arrays: dict[str, np.ndarray]) -> "LinearProbe":
        return cls(arrays["weights"].astype(np.float64), arrays["bias"].astype(np.float64), config.l2_strength,
                   arrays["feature_mean"].astype(np.float64), arrays["feature_scale"].astype(np.float64))

    def standardize(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.feature_mean is not None:
            x = (x - self.feature_mean) / self.feature_scale
        return x

    def probabilities(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        if x.shape[1] != self.weights.shape[1]:
            raise ShapeError(f"probe expects vectors of length {self.weights.shape[1]}, got {x.shape[1]}")
        return _softmax(self.standardize(x) @ self.weights.T + self.bias)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.probabilities(x), axis=1)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _objective(w, b, x, onehot, l2):
    logits = x @ w.T + b
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -(onehot * log_p).sum(axis=1).mean() + l2 * np.sum(w * w)
    g_logits = (np.exp(log_p) - onehot) / len(x)
    return loss, g_logits.T @ x + 2 * l2 * w, g_logits.sum(axis=0)


def train_linear_probe(
    features,
    labels: Sequence[int],
    l2_strength: float = 1e-3,
    seed: int = 0,
    max_iter: int = 1000,
    tol: float = 1e-5,
    standardize: bool = True,
) -> LinearProbe:
    """Fit softmax regression by full-batch gradient descent.

    Steps are chosen by backtracking (Armijo) line search, so the training
    objective never increases. Weights start at zero and the bias at the log
    class priors, which makes the result independent of ``seed``; it is kept
    so callers can thread one seed through every stage.
    """
    if isinstance(features, (list, tuple)) and features and isinstance(features[0], ProbeVector):
        lengths = {len(f.values) for f in features}
        if len(lengths) > 1:
            raise ShapeError(f"probe vectors have inconsistent lengths {sorted(lengths)}")
        features = np.stack([f.values for f in features])
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise ShapeError(f"features {x.shape} do not align with {len(y)} labels")
    if len(np.unique(y)) < 2:
        raise DataValidationError("linear probe needs at least two classes")
    if l2_strength < 0:
        raise ValueError("l2_strength must be >= 0")

    mean = scale = None
    if standardize:
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale[scale == 0] = 1.0
        x = (x - mean) / scale
    k = int(y.max()) + 1
    onehot = np.eye(k)[y]
    w = np.zeros((k, x.shape[1]))
    # log class priors: the exact optimum when weights are held at zero
    b = np.log(np.maximum(onehot.mean(axis=0), 1e-12))
    step = 1.0
    loss, gw, gb = _objective(w, b, x, onehot, l2_strength)
    history = [loss]
    for _ in range(max_iter):
        gnorm2 = float(np.sum(gw * gw) + np.sum(gb * gb))
        if np.sqrt(gnorm2) < tol:
            break
        while True:
            w_new, b_new = w - step * gw, b - step * gb
            new_loss, new_gw, new_gb = _objective(w_new, b_new, x, onehot, l2_strength)
            if new_loss <= loss - 0.5 * step * gnorm2 or step < 1e-12:
                break
            step *= 0.5
        if new_loss > loss:
            break
        w, b, loss, gw, gb = w_new, b_new, new_loss, new_gw, new_gb
        history.append(loss)
        step *= 2.0
    return LinearProbe(w, b, l2_strength, mean, scale, history)


def probe_predict(probe: LinearProbe, vector) -> tuple[int, np.ndarray]:
    values = vector.values if isinstance(vector, ProbeVector) else np.asarray(vector)
    probs = probe.probabilities(values)[0]
    return int(np.argmax(probs)), probs


@dataclass
class ProbeReport:
    split: str
    accuracy: float
    precision: list[float]
    recall: list[float]


def probe_report(probe: LinearProbe, features: np.ndarray, labels: np.ndarray, split: str, num_classes: int) -> ProbeReport:
    pred = probe.predict(features)
    labels = np.asarray(labels)
    precision, recall = [], []
    for c in range(num_classes):
        tp = int(np.sum((pred == c) & (labels == c)))
        precision.append(tp / max(int(np.sum(pred == c)), 1))
        recall.append(tp / max(int(np.sum(labels == c)), 1))
    return ProbeReport(split, float(np.mean(pred == labels)), precision, recall)


def write_probe_report(reports: Sequence[ProbeReport], class_names: Sequence[str], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["split", "accuracy"]
        for name in class_names:
            header += [f"precision_{name}", f"recall_{name}"]
        writer.writerow(header)
        for r in reports:
            row = [r.split, f"{r.accuracy:.6f}"]
            for p, rc in zip(r.precision, r.recall):
                row += [f"{p:.6f}", f"{rc:.6f}"]
            writer.writerow(row)
