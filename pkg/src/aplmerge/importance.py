"""Per-partition importance: causal intervention and gradient approximation.

Scores follow one sign convention for both providers. The signed score ``s``
is non-positive for partitions that matter (causal: ``P* - P``; gradient:
``-|delta . grad|``) and ``magnitude = max(-s, 0)``.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, runtime_checkable

import numpy as np

from .delta import DeltaMap, DropMask
from .store import Partition, TensorMap, _check_bounds, atomic_write_text, check_aligned, substitute

REPORT_VERSION = 1
PROVIDERS = ("causal", "gradient")


@dataclass(frozen=True, eq=False)
class FewShotBatch:
    """Labelled examples ``(inputs[i], labels[i])`` for one task."""

    inputs: np.ndarray
    labels: np.ndarray
    task_id: str = ""

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=np.float64)
        labels = np.array(self.labels)
        if inputs.ndim != 2 or len(inputs) == 0:
            raise ValueError("a batch needs a nonempty 2-D input array")
        if labels.shape != (len(inputs),):
            raise ValueError(f"expected {len(inputs)} labels, got shape {labels.shape}")
        if labels.dtype.kind not in "iu":
            if not np.all(labels == np.round(labels)):
                raise ValueError("labels must be integers")
        labels = labels.astype(np.int64)
        if labels.min() < 0:
            raise ValueError("labels must be nonnegative")
        inputs.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.task_id.encode("utf-8"))
        h.update(np.ascontiguousarray(self.inputs, "<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, "<i8").tobytes())
        return h.hexdigest()[:16]

    def take(self, n: int) -> FewShotBatch:
        return FewShotBatch(self.inputs[:n], self.labels[:n], self.task_id)

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "inputs": self.inputs.tolist(), "labels": self.labels.tolist()}

    @classmethod
    def from_dict(cls, obj) -> FewShotBatch:
        return cls(np.asarray(obj["inputs"], dtype=np.float64), np.asarray(obj["labels"]), obj.get("task_id", ""))

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | os.PathLike) -> FewShotBatch:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
        try:
            return cls.from_dict(obj)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"{path}: malformed batch file: {exc!r}") from exc


@runtime_checkable
class Evaluator(Protocol):
    """Deterministic scorer of a model on a batch.

    ``score`` returns the mean true-label probability and the mean loss.
    Evaluators that can differentiate also provide ``gradient``.
    """

    class_count: int

    def score(self, model: TensorMap, batch: FewShotBatch) -> tuple[float, float]: ...


@dataclass(frozen=True)
class ImportanceEntry:
    id: str
    score: float
    magnitude: float
    residual: bool = False


@dataclass(frozen=True)
class ImportanceReport:
    level: str
    task_id: str
    provider: str
    entries: tuple[ImportanceEntry, ...]
    fingerprint: str = ""

    def __post_init__(self):
        if self.provider not in PROVIDERS:
            raise ValueError(f"unknown provider {self.provider!r}")

    def scores(self) -> dict[str, float]:
        return {e.id: e.score for e in self.entries}

    def magnitudes(self) -> dict[str, float]:
        return {e.id: e.magnitude for e in self.entries}

    def to_dict(self) -> dict:
        entries = []
        for e in self.entries:
            d = {"id": e.id, "score": e.score, "magnitude": e.magnitude}
            if e.residual:
                d["residual"] = True
            entries.append(d)
        return {
            "version": REPORT_VERSION,
            "task_id": self.task_id,
            "level": self.level,
            "provider": self.provider,
            "fingerprint": self.fingerprint,
            "entries": entries,
        }

    @classmethod
    def from_dict(cls, obj) -> ImportanceReport:
        if obj.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported importance report version {obj.get('version')!r}")
        try:
            entries = tuple(
                ImportanceEntry(str(e["id"]), float(e["score"]), float(e["magnitude"]), bool(e.get("residual", False)))
                for e in obj["entries"]
            )
            return cls(obj["level"], obj["task_id"], obj["provider"], entries, obj.get("fingerprint", ""))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed importance report: {exc!r}") from exc

    def save(self, path: str | os.PathLike) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path: str | os.PathLike) -> ImportanceReport:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _level_of(partitions: Sequence[Partition]) -> str:
    if len(partitions) == 1 and partitions[0].id == "model":
        return "model"
    return "hidden" if any("[" in p.id for p in partitions) else "layer"


def causal_importance(
    evaluator: Evaluator,
    fine: TensorMap,
    base: TensorMap,
    partitions: Sequence[Partition],
    batch: FewShotBatch,
    level: str | None = None,
    threads: int = 1,
) -> ImportanceReport:
    """One clean run on ``fine`` and one corrupted run per partition.

    The corrupted run swaps the partition's slices back to ``base``; the
    entry score is ``P* - P``. Residual partitions are never corrupted.
    """
    check_aligned(fine, base)
    if len(batch) == 0:
        raise ValueError("empty batch")
    clean, _ = evaluator.score(fine, batch)

    def corrupted(p: Partition) -> float:
        if p.residual:
            return clean
        return evaluator.score(substitute(fine, base, p), batch)[0]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            perturbed = list(pool.map(corrupted, partitions))
    else:
        perturbed = [corrupted(p) for p in partitions]

    entries = []
    for p, p_star in zip(partitions, perturbed):
        s = float(p_star - clean)
        entries.append(ImportanceEntry(p.id, s, max(-s, 0.0), p.residual))
    return ImportanceReport(level or _level_of(partitions), batch.task_id, "causal", tuple(entries), batch.fingerprint())


def partition_inner_products(delta: DeltaMap, gradient: TensorMap, partitions: Sequence[Partition]) -> list[float]:
    """Signed ``sum(delta * grad)`` over each partition's slices."""
    check_aligned(delta, gradient)
    out = []
    for p in partitions:
        _check_bounds(delta, p)
        total = 0.0
        for name, sl in p.members:
            d = np.asarray(delta[name], np.float64)[sl].ravel()
            g = np.asarray(gradient[name], np.float64)[sl].ravel()
            total += float(np.dot(d, g))
        out.append(total)
    return out


def gradient_importance(
    delta: DeltaMap,
    base_gradient: TensorMap,
    partitions: Sequence[Partition],
    task_id: str = "",
    level: str | None = None,
    fingerprint: str = "",
) -> ImportanceReport:
    inner = partition_inner_products(delta, base_gradient, partitions)
    entries = []
    for p, ip in zip(partitions, inner):
        mag = 0.0 if p.residual else abs(ip)
        entries.append(ImportanceEntry(p.id, -mag, mag, p.residual))
    return ImportanceReport(level or _level_of(partitions), task_id, "gradient", tuple(entries), fingerprint)


def taylor_gap(delta: DeltaMap, mask: DropMask, base_gradient: TensorMap) -> float:
    """First-order prediction ``|sum(M * delta * grad)|`` of the loss change from pruning."""
    check_aligned(delta, base_gradient)
    check_aligned(delta, mask.masks)
    total = 0.0
    for name in delta:
        m = mask.masks[name].ravel()
        d = np.asarray(delta[name], np.float64).ravel()
        g = np.asarray(base_gradient[name], np.float64).ravel()
        total += float(np.dot(d[m], g[m]))
    return abs(total)
