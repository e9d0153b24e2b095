"""Drop ratios and merge weights derived from importance reports."""

from __future__ import annotations

import math
import warnings
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

from .importance import ImportanceReport


def _check_band(ratio: float, epsilon: float) -> None:
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"base drop ratio must lie in [0, 1), got {ratio}")
    if not epsilon > 0.0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if ratio - epsilon < 0.0 or ratio + epsilon >= 1.0:
        raise ValueError(f"ratio +/- epsilon must stay inside [0, 1): ratio={ratio}, epsilon={epsilon}")


@dataclass(frozen=True)
class CalibrationConfig:
    ratio: float
    epsilon: float
    tau1: float = 5.0
    tau2: float = 5.0

    def __post_init__(self):
        _check_band(self.ratio, self.epsilon)
        if not (self.tau1 > 0 and self.tau2 > 0):
            raise ValueError("temperatures must be positive")


def tanh_drop_ratio(score: float, cfg: CalibrationConfig) -> float:
    beta = math.tanh(score / cfg.tau1)
    if beta < -cfg.epsilon:
        return cfg.ratio - cfg.epsilon
    if beta > cfg.epsilon:
        return cfg.ratio + cfg.epsilon
    return cfg.ratio + beta


def tanh_drop_ratios(report: ImportanceReport, cfg: CalibrationConfig) -> dict[str, float]:
    """``ratio + tanh(score / tau1)`` clamped to ``ratio +/- epsilon``, per partition.

    Residual partitions keep the base ratio.
    """
    if not report.entries:
        raise ValueError("empty importance report")
    return {e.id: cfg.ratio if e.residual else tanh_drop_ratio(e.score, cfg) for e in report.entries}


def linear_rank_drop_ratios(
    report: ImportanceReport,
    ratio: float,
    epsilon: float,
    sizes: Mapping[str, int] | None = None,
) -> dict[str, float]:
    """Spread ratios linearly over importance rank.

    The most important partition gets ``ratio - epsilon``, the least important
    ``ratio + epsilon``; ties in magnitude are ordered by partition id. The
    mean ratio is ``ratio``, so equal-sized partitions drop as many parameters
    as a uniform ratio would. ``sizes`` enables a warning when they are not
    equal-sized.
    """
    _check_band(ratio, epsilon)
    if not report.entries:
        raise ValueError("empty importance report")
    ranked = sorted((e for e in report.entries if not e.residual), key=lambda e: (-e.magnitude, e.id))
    out = {e.id: ratio for e in report.entries if e.residual}
    n = len(ranked)
    if sizes is not None and len({sizes[e.id] for e in ranked}) > 1:
        warnings.warn("partitions differ in size; linear-rank ratios will not preserve the kept-parameter count")
    for r, e in enumerate(ranked):
        out[e.id] = ratio if n == 1 else ratio - epsilon + 2.0 * epsilon * r / (n - 1)
    return {e.id: out[e.id] for e in report.entries}


def merge_weights(model_magnitudes: Sequence[tuple[str, float]], tau2: float = 5.0) -> dict[str, float]:
    """Softmax of model-level importance magnitudes at temperature ``tau2``."""
    if not model_magnitudes:
        raise ValueError("no models to weight")
    if not tau2 > 0:
        raise ValueError("tau2 must be positive")
    ids = [t for t, _ in model_magnitudes]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate task ids")
    z = [m / tau2 for _, m in model_magnitudes]
    top = max(z)
    e = [math.exp(v - top) for v in z]
    total = math.fsum(e)
    return {t: v / total for t, v in zip(ids, e)}
