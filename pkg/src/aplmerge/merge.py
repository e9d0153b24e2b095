"""Merging: task arithmetic, importance-weighted merging, and recipe-driven runs."""

from __future__ import annotations

import json
import logging
import os
import time
from collections.abc import Callable, Mapping, Sequence
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import rng
from .calibration import CalibrationConfig, linear_rank_drop_ratios, merge_weights, tanh_drop_ratios
from .delta import DeltaMap, apply_mask, apply_mask_rescale, compute_delta, make_mask
from .errors import StageError
from .importance import Evaluator, FewShotBatch, ImportanceReport, causal_importance, gradient_importance
from .store import PartitionSchema, TensorMap, build_partitions, check_aligned, load_checkpoint, model_partition

log = logging.getLogger("aplmerge")

METHODS = ("task-arithmetic", "mi-task-arithmetic")
PRUNERS = ("none", "dare", "magnitude", "apl-tanh", "apl-linear")
RECIPE_PROVIDERS = ("causal", "gradient", "file")
RUN_REPORT_VERSION = 1


def _compensated_sum(terms) -> np.ndarray:
    """Neumaier summation of arrays, in the order given."""
    total = comp = None
    for t in terms:
        t = np.asarray(t, np.float64)
        if total is None:
            total, comp = t.copy(), np.zeros_like(t)
            continue
        y = total + t
        comp += np.where(np.abs(total) >= np.abs(t), (total - y) + t, (t - y) + total)
        total = y
    return total + comp


def merge(
    base: TensorMap, pruned_deltas: Sequence[tuple[str, DeltaMap]], weights: Mapping[str, float]
) -> TensorMap:
    """``sum_t w_t * (base + delta_t)``, accumulated per element in task order."""
    if not pruned_deltas:
        raise ValueError("nothing to merge")
    ids = [t for t, _ in pruned_deltas]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate task ids")
    unknown = set(weights) - set(ids)
    if unknown:
        raise ValueError(f"weight given for unknown task {sorted(unknown)[0]!r}")
    missing = [t for t in ids if t not in weights]
    if missing:
        raise ValueError(f"no weight for task {missing[0]!r}")
    for _, d in pruned_deltas:
        check_aligned(base, d)
    out = {}
    for name in base:
        b = np.asarray(base[name], np.float64)
        terms = (weights[t] * (b + np.asarray(d[name], np.float64)) for t, d in pruned_deltas)
        out[name] = _compensated_sum(terms).astype(base[name].dtype)
    return TensorMap(out)


def task_arithmetic(base: TensorMap, pruned_deltas: Sequence[DeltaMap], scale: float = 1.0) -> TensorMap:
    """``base + scale * sum_t delta_t``."""
    for d in pruned_deltas:
        check_aligned(base, d)
    out = {}
    for name in base:
        b = np.asarray(base[name], np.float64)
        if pruned_deltas:
            b = b + scale * _compensated_sum(np.asarray(d[name], np.float64) for d in pruned_deltas)
        out[name] = b.astype(base[name].dtype)
    return TensorMap(out)


# ---------------------------------------------------------------------------
# recipes


@dataclass(frozen=True)
class TaskEntry:
    task_id: str
    fine: Path
    batch: Path | None = None
    importance: Path | None = None
    model_importance: Path | None = None
    gradient: Path | None = None


@dataclass(frozen=True)
class MergeRecipe:
    """One merging run. Relative paths in a recipe file resolve against the file's directory."""

    base: Path
    tasks: tuple[TaskEntry, ...]
    method: str = "mi-task-arithmetic"
    pruner: str = "apl-tanh"
    provider: str | None = None
    level: str = "layer"
    schema: Path | None = None
    ratio: float = 0.9
    epsilon: float = 0.05
    tau1: float = 5.0
    tau2: float = 5.0
    scale: float = 1.0
    seed: int = 0
    ood_batch: Path | None = None
    evaluator: str = "toy"
    net_spec: Path | None = None
    global_rescale: bool = False

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("a recipe needs at least one task")
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate task ids in recipe")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.pruner not in PRUNERS:
            raise ValueError(f"unknown pruner {self.pruner!r}; expected one of {PRUNERS}")
        if self.provider is not None and self.provider not in RECIPE_PROVIDERS:
            raise ValueError(f"unknown provider {self.provider!r}; expected one of {RECIPE_PROVIDERS}")
        if self.pruner.startswith("apl"):
            CalibrationConfig(self.ratio, self.epsilon, self.tau1, self.tau2)
        elif not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"drop ratio must lie in [0, 1), got {self.ratio}")
        if not (self.tau1 > 0 and self.tau2 > 0):
            raise ValueError("temperatures must be positive")
        if self.needs_importance and self.provider is None:
            raise ValueError(f"pruner {self.pruner!r} with method {self.method!r} needs an importance provider")
        if self.ood_batch is not None and any(t.batch is not None for t in self.tasks):
            raise ValueError("ood_batch excludes per-task batches")
        if self.needs_importance and self.provider in ("causal", "gradient"):
            if self.ood_batch is None and any(t.batch is None for t in self.tasks):
                raise ValueError(f"provider {self.provider!r} needs a batch for every task or an ood_batch")
        if self.needs_importance and self.provider == "file":
            for t in self.tasks:
                if self.pruner.startswith("apl") and t.importance is None:
                    raise ValueError(f"task {t.task_id!r}: provider 'file' needs an importance report")
                if self.method == "mi-task-arithmetic" and t.model_importance is None:
                    raise ValueError(f"task {t.task_id!r}: provider 'file' needs a model_importance report")
        if self.level != "model" and self.pruner.startswith("apl") and self.schema is None:
            raise ValueError(f"level {self.level!r} needs a partition schema")

    @property
    def needs_importance(self) -> bool:
        return self.pruner.startswith("apl") or self.method == "mi-task-arithmetic"

    @classmethod
    def from_dict(cls, obj: Mapping, root: str | os.PathLike = ".") -> MergeRecipe:
        root = Path(root)

        def path(v):
            return None if v is None else root / v

        known = {f.name for f in fields(cls)}
        extra = set(obj) - known - {"version"}
        if extra:
            raise ValueError(f"unknown recipe field {sorted(extra)[0]!r}")
        try:
            tasks = tuple(
                TaskEntry(
                    str(t["task_id"]),
                    root / t["fine"],
                    path(t.get("batch")),
                    path(t.get("importance")),
                    path(t.get("model_importance")),
                    path(t.get("gradient")),
                )
                for t in obj["tasks"]
            )
            kw = {k: v for k, v in obj.items() if k in known and k != "tasks"}
            for k in ("base", "schema", "ood_batch", "net_spec"):
                if k in kw:
                    kw[k] = path(kw[k])
            for k in ("ratio", "epsilon", "tau1", "tau2", "scale"):
                if k in kw:
                    kw[k] = float(kw[k])
            if "seed" in kw:
                kw["seed"] = int(kw["seed"])
            return cls(tasks=tasks, **kw)
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed recipe: {exc!r}") from exc

    @classmethod
    def load(cls, path: str | os.PathLike) -> MergeRecipe:
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON: {exc}") from exc
        return cls.from_dict(obj, path.parent)

    def to_dict(self) -> dict:
        def s(p):
            return None if p is None else str(p)

        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "tasks"}
        for k in ("base", "schema", "ood_batch", "net_spec"):
            d[k] = s(d[k])
        d["tasks"] = [
            {k: (s(v) if isinstance(v, Path) or v is None else v) for k, v in vars(t).items()} for t in self.tasks
        ]
        return d


def toy_evaluator_factory(recipe: MergeRecipe) -> Evaluator:
    from .toylab import ToyEvaluator, ToyNetSpec

    if recipe.net_spec is None:
        raise ValueError("the toy evaluator needs net_spec")
    return ToyEvaluator(ToyNetSpec.load(recipe.net_spec))


EVALUATORS: dict[str, Callable[[MergeRecipe], Evaluator]] = {"toy": toy_evaluator_factory}


@dataclass
class _Timer:
    timings: dict[str, float] = field(default_factory=dict)

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0


def mask_seed(seed: int, task_id: str) -> int:
    return rng.derive_seed(seed, task_id)


def run_recipe(
    recipe: MergeRecipe,
    evaluators: Mapping[str, Callable[[MergeRecipe], Evaluator]] | None = None,
    threads: int = 1,
) -> tuple[TensorMap, dict]:
    """Execute a recipe; returns the merged checkpoint and a JSON-ready run report.

    Any failure raises :class:`StageError` tagged with the failing stage.
    Nothing is written to disk here.
    """
    evaluators = EVALUATORS if evaluators is None else evaluators
    timer = _Timer()
    stage = timer.stage

    with stage("load"):
        base = load_checkpoint(recipe.base)
        fines = [load_checkpoint(t.fine) for t in recipe.tasks]
        evaluator = None
        if recipe.needs_importance and recipe.provider in ("causal", "gradient"):
            if recipe.evaluator not in evaluators:
                raise ValueError(f"no evaluator named {recipe.evaluator!r}")
            evaluator = evaluators[recipe.evaluator](recipe)
        ood = FewShotBatch.load(recipe.ood_batch) if recipe.ood_batch is not None else None
        batches = [ood if ood is not None else (FewShotBatch.load(t.batch) if t.batch else None) for t in recipe.tasks]
        schema = PartitionSchema.load(recipe.schema).with_level(recipe.level) if recipe.schema else None

    with stage("delta"):
        deltas = [compute_delta(f, base) for f in fines]

    with stage("partition"):
        if recipe.level == "model" or schema is None:
            parts = [model_partition(base)]
        else:
            parts = build_partitions(base, schema)
        whole = [model_partition(base)]

    reports: list[ImportanceReport | None] = [None] * len(recipe.tasks)
    model_mags: list[float | None] = [None] * len(recipe.tasks)
    if recipe.needs_importance:
        with stage("importance"):
            want_parts = recipe.pruner.startswith("apl")
            want_model = recipe.method == "mi-task-arithmetic"
            ood_grad = None
            if recipe.provider == "gradient" and ood is not None and any(t.gradient is None for t in recipe.tasks):
                ood_grad = evaluator.gradient(base, ood)
            for i, (t, fine, delta, batch) in enumerate(zip(recipe.tasks, fines, deltas, batches)):
                if recipe.provider == "file":
                    if want_parts:
                        reports[i] = ImportanceReport.load(t.importance)
                        _check_report(reports[i], parts, t.task_id)
                    if want_model:
                        mrep = ImportanceReport.load(t.model_importance)
                        _check_report(mrep, whole, t.task_id)
                        model_mags[i] = mrep.entries[0].magnitude
                elif recipe.provider == "causal":
                    if want_parts:
                        reports[i] = causal_importance(evaluator, fine, base, parts, batch, recipe.level, threads)
                    if want_model:
                        model_mags[i] = causal_importance(evaluator, fine, base, whole, batch, "model").entries[0].magnitude
                else:
                    if t.gradient is not None:
                        grad = load_checkpoint(t.gradient)
                    elif ood_grad is not None:
                        grad = ood_grad
                    else:
                        grad = evaluator.gradient(base, batch)
                    fp = batch.fingerprint() if batch is not None else ""
                    if want_parts:
                        reports[i] = gradient_importance(delta, grad, parts, batch.task_id if batch else t.task_id, recipe.level, fp)
                    if want_model:
                        model_mags[i] = gradient_importance(delta, grad, whole, t.task_id, "model", fp).entries[0].magnitude
                log.info("importance for %s done", t.task_id)

    with stage("calibrate"):
        ratios = []
        for rep in reports:
            if recipe.pruner == "apl-tanh":
                ratios.append(tanh_drop_ratios(rep, CalibrationConfig(recipe.ratio, recipe.epsilon, recipe.tau1, recipe.tau2)))
            elif recipe.pruner == "apl-linear":
                ratios.append(linear_rank_drop_ratios(rep, recipe.ratio, recipe.epsilon, {p.id: p.size for p in parts}))
            else:
                ratios.append(None)

    pruned = []
    task_info = []
    with stage("prune"):
        for t, delta, r in zip(recipe.tasks, deltas, ratios):
            seed = mask_seed(recipe.seed, t.task_id)
            info = {"task_id": t.task_id}
            if recipe.pruner == "none":
                out = delta
                info["drop_fraction"] = 0.0
            elif recipe.pruner == "magnitude":
                mask = make_mask(delta, recipe.ratio, mode="magnitude")
                out = apply_mask(delta, mask)
                info["drop_fraction"] = mask.drop_fraction()
            else:
                if recipe.pruner == "dare":
                    mask = make_mask(delta, recipe.ratio, mode="random", seed=seed)
                else:
                    mask = make_mask(delta, r, parts, mode="random", seed=seed)
                out = apply_mask_rescale(delta, mask, recipe.ratio if recipe.global_rescale else None)
                info["mask_seed"] = seed
                info["drop_fraction"] = mask.drop_fraction()
            pruned.append(out)
            task_info.append(info)

    with stage("weights"):
        if recipe.method == "mi-task-arithmetic":
            weights = merge_weights([(t.task_id, m) for t, m in zip(recipe.tasks, model_mags)], recipe.tau2)
        else:
            weights = None

    with stage("merge"):
        if weights is not None:
            merged = merge(base, [(t.task_id, d) for t, d in zip(recipe.tasks, pruned)], weights)
        else:
            merged = task_arithmetic(base, pruned, recipe.scale)

    for info, rep, r, m in zip(task_info, reports, ratios, model_mags):
        info["importance"] = rep.to_dict() if rep is not None else None
        info["ratios"] = r
        info["model_importance"] = m
    report = {
        "version": RUN_REPORT_VERSION,
        "method": recipe.method,
        "pruner": recipe.pruner,
        "provider": recipe.provider,
        "level": recipe.level,
        "ratio": recipe.ratio,
        "epsilon": recipe.epsilon,
        "tau1": recipe.tau1,
        "tau2": recipe.tau2,
        "scale": recipe.scale if recipe.method == "task-arithmetic" else None,
        "seed": recipe.seed,
        "ood": recipe.ood_batch is not None,
        "weights": weights,
        "tasks": task_info,
        "timings": timer.timings,
    }
    return merged, report


def _check_report(rep: ImportanceReport, parts, task_id: str) -> None:
    got = [e.id for e in rep.entries]
    want = [p.id for p in parts]
    if sorted(got) != sorted(want):
        raise ValueError(f"importance report for {task_id!r} does not cover the recipe's partitions")
