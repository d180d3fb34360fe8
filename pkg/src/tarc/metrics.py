"""Evaluation quantities for continual-learning runs.

Accuracy matrices follow the convention ``R[i][j]`` = accuracy on task ``j``
after finishing training on task ``i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .model import MultiHeadNet
from .streams import CORRUPTIONS, Dataset, corrupt, inject_label_noise


def _matrix(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] == 0:
        raise ValueError(f"accuracy matrix must be 2-d and non-empty, got shape {R.shape}")
    return R


def average_accuracy(R) -> float:
    return float(np.mean(_matrix(R)[-1]))


def forward_transfer(R, random_baseline) -> float:
    """Mean gain over a random network on task ``t`` just before training on it (t >= 2)."""
    R = _matrix(R)
    b = np.asarray(random_baseline, dtype=np.float64)
    T = R.shape[1]
    if T < 2 or R.shape[0] != T:
        raise ValueError("forward transfer needs a square matrix with T >= 2")
    return float(np.mean([R[t - 1, t] - b[t] for t in range(1, T)]))


def backward_transfer(R) -> float:
    """Mean of final minus best accuracy over tasks 1..T-1 (always <= 0)."""
    R = _matrix(R)
    T = R.shape[1]
    if T < 2 or R.shape[0] != T:
        raise ValueError("backward transfer needs a square matrix with T >= 2")
    return float(np.mean([R[T - 1, j] - R[j:, j].max() for j in range(T - 1)]))


@dataclass
class ReliabilityBins:
    edges: np.ndarray
    counts: np.ndarray
    confidence: np.ndarray
    accuracy: np.ndarray

    def rows(self) -> List[dict]:
        return [
            dict(lower=float(self.edges[b]), upper=float(self.edges[b + 1]), count=int(self.counts[b]),
                 confidence=float(self.confidence[b]), accuracy=float(self.accuracy[b]))
            for b in range(len(self.counts))
        ]


def ece(confidences, correct, n_bins: int = 15):
    """Expected calibration error over equal-width bins ``(lo, hi]`` of ``(0, 1]``."""
    conf = np.asarray(confidences, dtype=np.float64)
    hit = np.asarray(correct, dtype=bool)
    if conf.shape != hit.shape:
        raise ValueError("confidences and correctness flags differ in shape")
    if conf.size and (conf.min() <= 0.0 or conf.max() > 1.0):
        raise ValueError("confidences must lie in (0, 1]")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    bins = np.clip(np.ceil(conf * n_bins).astype(np.int64) - 1, 0, n_bins - 1)
    counts = np.bincount(bins, minlength=n_bins)
    conf_sum = np.bincount(bins, weights=conf, minlength=n_bins)
    hit_sum = np.bincount(bins, weights=hit.astype(np.float64), minlength=n_bins)
    nz = counts > 0
    mean_conf = np.where(nz, conf_sum / np.maximum(counts, 1), 0.0)
    mean_acc = np.where(nz, hit_sum / np.maximum(counts, 1), 0.0)
    n = max(conf.size, 1)
    value = float(np.sum(counts[nz] / n * np.abs(mean_acc[nz] - mean_conf[nz])))
    return value, ReliabilityBins(edges, counts, mean_conf, mean_acc)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def model_ece(net: MultiHeadNet, images, labels, n_bins: int = 15):
    net.eval()
    p = softmax_np(net.predict_logits(images))
    net.train()
    return ece(p.max(axis=1), p.argmax(axis=1) == np.asarray(labels), n_bins)


def corruption_scores(errors: Mapping[str, Sequence[float]], baseline_errors: Mapping[str, Sequence[float]],
                      clean_error: float, baseline_clean_error: float):
    """mCE and relative mCE (both x100) of a model against a reference model.

    ``errors[kind]`` lists top-1 errors at severities 1..5.
    """
    ce, rel = [], []
    for kind in errors:
        e = np.asarray(errors[kind], dtype=np.float64)
        b = np.asarray(baseline_errors[kind], dtype=np.float64)
        ce.append(e.sum() / b.sum())
        denom = np.sum(b - baseline_clean_error)
        rel.append(np.sum(e - clean_error) / denom if denom != 0 else float("nan"))
    return 100.0 * float(np.mean(ce)), 100.0 * float(np.mean(rel))


def corruption_errors(net: MultiHeadNet, images, labels, seed: int = 0,
                      kinds: Optional[Sequence[str]] = None) -> Dict[str, List[float]]:
    net.eval()
    out = {}
    for kind in kinds or CORRUPTIONS:
        row = []
        for s in range(1, 6):
            pred = np.argmax(net.predict_logits(corrupt(images, kind, s, seed)), axis=1)
            row.append(float(np.mean(pred != labels)))
        out[kind] = row
    net.train()
    return out


def task_bias(probs: np.ndarray, task_class_map) -> np.ndarray:
    """Mean softmax mass per task's classes over a test set, renormalized across tasks."""
    probs = np.asarray(probs, dtype=np.float64)
    cmap = np.asarray(task_class_map, dtype=np.int64)
    if probs.shape[1] != cmap.size or np.any(cmap < 0):
        raise ValueError("task_class_map must assign every class to a task")
    n_tasks = int(cmap.max()) + 1
    mass = np.zeros(n_tasks)
    np.add.at(mass, cmap, probs.mean(axis=0))
    return mass / mass.sum()


def flat_minima_probe(net: MultiHeadNet, images, labels, sigma_grid: Sequence[float], trials: int = 3,
                      seed: int = 0) -> List[float]:
    """Accuracy after adding N(0, sigma^2) noise to every parameter, averaged over trials."""
    if trials < 1 or any(s < 0 for s in sigma_grid):
        raise ValueError("need trials >= 1 and non-negative sigmas")
    probe = net.clone().eval()
    theta = net.get_flat_params()
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    curve = []
    for sigma in sigma_grid:
        accs = []
        for _ in range(trials if sigma > 0 else 1):
            probe.set_flat_params(theta + rng.normal(0.0, sigma, theta.size) if sigma > 0 else theta)
            accs.append(float(np.mean(np.argmax(probe.predict_logits(images), axis=1) == labels)))
        curve.append(float(np.mean(accs)))
    return curve


def train_linear_probe(features: np.ndarray, labels: np.ndarray, num_classes: int, epochs: int = 20,
                       lr: float = 3e-4, batch_size: int = 32, seed: int = 0):
    """Softmax regression on frozen features with Adam; returns ``(W, b)``."""
    from .trainers import adam_step

    rng = np.random.default_rng(seed)
    d = features.shape[1]
    W = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    sw, sb = {}, {}
    onehot = np.eye(num_classes)[labels]
    for _ in range(epochs):
        perm = rng.permutation(len(labels))
        for i in range(0, len(labels), batch_size):
            idx = perm[i : i + batch_size]
            p = softmax_np(features[idx] @ W + b)
            g = (p - onehot[idx]) / len(idx)
            W = adam_step(W, features[idx].T @ g, sw, lr)
            b = adam_step(b, g.sum(axis=0), sb, lr)
    return W, b


def noisy_label_probe(net: MultiHeadNet, train: Dataset, test: Dataset, noise_rates: Sequence[float],
                      epochs: int = 20, lr: float = 3e-4, seed: int = 0) -> List[float]:
    """Clean-test accuracy of a fresh linear head trained on frozen features under label noise."""
    f_train = net.features(train.images)
    f_test = net.features(test.images)
    curve = []
    for i, rate in enumerate(noise_rates):
        noisy = inject_label_noise(train, rate, seed + 1000 * i)
        W, b = train_linear_probe(f_train, noisy.labels, train.num_classes, epochs, lr, seed=seed)
        curve.append(float(np.mean(np.argmax(f_test @ W + b, axis=1) == test.labels)))
    return curve
