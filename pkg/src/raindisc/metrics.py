"""Forecast-verification metrics at a rain/no-rain threshold.

Categorical scores come from pooled confusion counts; CSI-Neighbor max-pools
both binary fields with non-overlapping blocks before counting.  Undefined
values (zero denominators, zero variance) are returned as None, never as a
silent NaN.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_THRESHOLD = 0.1     # mm/hr


@dataclass
class ConfusionCounts:
    hits: int
    misses: int
    false_alarms: int
    correct_negatives: int

    @property
    def total(self) -> int:
        return self.hits + self.misses + self.false_alarms + self.correct_negatives

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.hits + other.hits,
            self.misses + other.misses,
            self.false_alarms + other.false_alarms,
            self.correct_negatives + other.correct_negatives,
        )


def _check_shapes(pred: np.ndarray, truth: np.ndarray) -> None:
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")


def confusion(pred: np.ndarray, truth: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> ConfusionCounts:
    """Binarize both fields at `threshold` (inclusive) and count outcomes."""
    _check_shapes(pred, truth)
    p = np.asarray(pred) >= threshold
    t = np.asarray(truth) >= threshold
    return ConfusionCounts(
        hits=int(np.sum(p & t)),
        misses=int(np.sum(~p & t)),
        false_alarms=int(np.sum(p & ~t)),
        correct_negatives=int(np.sum(~p & ~t)),
    )


def pod(c: ConfusionCounts) -> float | None:
    d = c.hits + c.misses
    return c.hits / d if d > 0 else None


def far(c: ConfusionCounts) -> float | None:
    d = c.hits + c.false_alarms
    return c.false_alarms / d if d > 0 else None


def csi(c: ConfusionCounts) -> float | None:
    d = c.hits + c.misses + c.false_alarms
    return c.hits / d if d > 0 else None


def block_max_pool(field: np.ndarray, kernel: int) -> np.ndarray:
    """Non-overlapping max pooling; reflect-pads ragged edges first."""
    if kernel == 1:
        return np.asarray(field)
    f = np.asarray(field)
    ph = (-f.shape[0]) % kernel
    pw = (-f.shape[1]) % kernel
    if ph or pw:
        mode = "reflect" if min(f.shape) >= 2 else "edge"
        f = np.pad(f, ((0, ph), (0, pw)), mode=mode)
    h, w = f.shape
    return f.reshape(h // kernel, kernel, w // kernel, kernel).max(axis=(1, 3))


def neighbor_confusion(
    pred: np.ndarray, truth: np.ndarray, kernel: int, threshold: float = DEFAULT_THRESHOLD
) -> ConfusionCounts:
    _check_shapes(pred, truth)
    p = block_max_pool(np.asarray(pred) >= threshold, kernel)
    t = block_max_pool(np.asarray(truth) >= threshold, kernel)
    return confusion(p.astype(np.float64), t.astype(np.float64), threshold=0.5)


def csi_neighbor(
    pred: np.ndarray, truth: np.ndarray, kernel: int, threshold: float = DEFAULT_THRESHOLD
) -> float | None:
    """CSI after block max pooling both binary fields with the given kernel."""
    return csi(neighbor_confusion(pred, truth, kernel, threshold))


def rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    _check_shapes(pred, truth)
    return float(np.sqrt(np.mean((np.asarray(pred, dtype=np.float64) - truth) ** 2)))


def cc(pred: np.ndarray, truth: np.ndarray) -> float | None:
    """Pearson correlation; None when either field has zero variance."""
    _check_shapes(pred, truth)
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    sp, st = p.std(), t.std()
    if sp < 1e-12 or st < 1e-12:
        return None
    value = float(((p - p.mean()) * (t - t.mean())).mean() / (sp * st))
    return min(1.0, max(-1.0, value))


def inject_noise(grid: np.ndarray, kind: str, sigma: float, seed: int) -> np.ndarray:
    """Seeded Gaussian perturbation: x + e (additive) or x * (1 + e)."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    g = np.asarray(grid, dtype=np.float64)
    if sigma == 0:
        return g.astype(grid.dtype, copy=True)
    noise = np.random.default_rng(int(seed)).normal(0.0, sigma, size=g.shape)
    if kind == "additive":
        out = g + noise
    elif kind == "multiplicative":
        out = g * (1.0 + noise)
    else:
        raise ValueError(f"unknown noise kind: {kind!r}")
    return out.astype(grid.dtype)


def metric_report(
    pred_rain: np.ndarray | None,
    pred_rates: np.ndarray | None,
    truth: np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
    neighbor_kernels: tuple[int, ...] = (4, 8),
) -> dict[str, float | None]:
    """Full metric row from a binary rain decision and/or a rate field."""
    report: dict[str, float | None] = {}
    if pred_rain is not None:
        c = confusion(pred_rain.astype(np.float64), truth, threshold)
        report["pod"] = pod(c)
        report["far"] = far(c)
        report["csi"] = csi(c)
        for k in neighbor_kernels:
            report[f"csi{k}"] = csi_neighbor(pred_rain.astype(np.float64), truth, k, threshold)
    if pred_rates is not None:
        report["rmse"] = rmse(pred_rates, truth)
        report["cc"] = cc(pred_rates, truth)
    return report
