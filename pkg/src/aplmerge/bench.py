"""Desk-scale experiments on the toy lab: the pruning comparison and two-task merges.

:class:`LabConfig` holds the lab preset. The base model is pretrained briefly
on unrelated tasks (same generator family, different class means) so that
fine-tunes start from a model that has already learned generic features,
the regime in which delta parameters are small and highly redundant.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import tempfile
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import toylab as lab
from .calibration import linear_rank_drop_ratios
from .delta import apply_mask, apply_mask_rescale, compute_delta, make_mask, reconstruct
from .importance import FewShotBatch, causal_importance, gradient_importance
from .merge import MergeRecipe, mask_seed, run_recipe
from .store import TensorMap, build_partitions, load_checkpoint, save_checkpoint

log = logging.getLogger("aplmerge")

CSV_VERSION = 1
CSV_COLUMNS = ("version", "task", "method", "ratio", "seed", "accuracy", "finetuned_accuracy")
BENCH_METHODS = ("magnitude", "dare", "apl-linear")
DEFAULT_RATIOS = (0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.995)


@dataclass(frozen=True)
class LabConfig:
    input_dim: int = 64
    hidden_dims: tuple[int, ...] = (512, 512, 512)
    class_count: int = 4
    separation: float = 6.0
    noise: float = 1.0
    train_size: int = 400
    test_size: int = 1000
    fewshot_per_class: int = 5
    pretrain_tasks: int = 2
    pretrain_size: int = 1000
    pretrain_epochs: int = 10
    pretrain_step: float = 0.2
    finetune_epochs: int = 100
    finetune_step: float = 0.2

    def template(self, angles: Sequence[float] | None = None) -> lab.TaskTemplate:
        return lab.TaskTemplate(
            self.input_dim,
            self.class_count,
            self.separation,
            self.noise,
            self.train_size,
            self.test_size,
            self.fewshot_per_class,
            None if angles is None else tuple(float(a) for a in angles),
        )

    def net_spec(self, seed: int) -> lab.ToyNetSpec:
        return lab.ToyNetSpec(self.input_dim, self.class_count, self.hidden_dims, seed=seed)


SMALL_LAB = LabConfig(
    input_dim=16, hidden_dims=(32, 32), separation=4.0, train_size=200, test_size=400,
    pretrain_size=200, finetune_epochs=60, finetune_step=0.3,
)

PRESETS = {"default": LabConfig(), "small": SMALL_LAB}


def pretrained_base(cfg: LabConfig, seed: int) -> tuple[lab.ToyNetSpec, TensorMap]:
    spec = cfg.net_spec(seed)
    net = lab.init_net(spec)
    if cfg.pretrain_epochs == 0:
        return spec, net
    tmpl = dataclasses.replace(cfg.template(), train_size=cfg.pretrain_size)
    aux = lab.make_tasks(cfg.pretrain_tasks, tmpl, seed=seed + 123)
    data = FewShotBatch(
        np.concatenate([t.train.inputs for t in aux]), np.concatenate([t.train.labels for t in aux]), "pretrain"
    )
    return spec, lab.train(net, spec, data, cfg.pretrain_epochs, cfg.pretrain_step)


def lab_tasks(cfg: LabConfig, seed: int, count: int, angles: Sequence[float] | None = None):
    return lab.make_tasks(count, cfg.template(angles), seed=seed)


def finetune(cfg: LabConfig, spec: lab.ToyNetSpec, base: TensorMap, task: lab.SyntheticTask) -> TensorMap:
    return lab.train(base, spec, task.train, cfg.finetune_epochs, cfg.finetune_step)


def default_epsilon(ratio: float, epsilon: float = 0.004) -> float:
    """Largest epsilon <= ``epsilon`` that keeps ``ratio +/- epsilon`` inside [0, 1)."""
    return min(epsilon, ratio, 0.8 * (1.0 - ratio))


def pruning_comparison(
    cfg: LabConfig,
    tasks: int = 2,
    ratios: Sequence[float] = (0.9, 0.99, 0.995),
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    epsilon: float = 0.004,
    level: str = "hidden",
    provider: str = "gradient",
) -> list[dict]:
    """Magnitude vs. Dare vs. APL-linear across drop ratios, one row per (task, ratio, seed, method).

    Magnitude zeroes the smallest deltas globally without rescaling; Dare and
    APL share the per-(seed, task) mask seed, so they differ only in the
    per-partition ratios.
    """
    rows = []
    for seed in seeds:
        spec, base = pretrained_base(cfg, seed)
        ev = lab.ToyEvaluator(spec)
        parts = build_partitions(base, lab.layer_schema(spec, level))
        sizes = {p.id: p.size for p in parts}
        for task in lab_tasks(cfg, seed, tasks):
            fine = finetune(cfg, spec, base, task)
            ft_acc = lab.evaluate(fine, spec, task.test)[0]
            delta = compute_delta(fine, base)
            if provider == "causal":
                rep = causal_importance(ev, fine, base, parts, task.fewshot, level)
            else:
                rep = gradient_importance(delta, ev.gradient(base, task.fewshot), parts, task.task_id, level)
            ms = mask_seed(seed, task.task_id)
            for ratio in ratios:
                eps = default_epsilon(ratio, epsilon)
                pruned = {
                    "magnitude": apply_mask(delta, make_mask(delta, ratio, mode="magnitude")),
                    "dare": apply_mask_rescale(delta, make_mask(delta, ratio, mode="random", seed=ms)),
                    "apl-linear": apply_mask_rescale(
                        delta,
                        make_mask(delta, linear_rank_drop_ratios(rep, ratio, eps, sizes), parts, seed=ms),
                    ),
                }
                for method in BENCH_METHODS:
                    acc = lab.evaluate(reconstruct(base, pruned[method]), spec, task.test)[0]
                    rows.append(
                        {
                            "version": CSV_VERSION,
                            "task": task.task_id,
                            "method": method,
                            "ratio": ratio,
                            "seed": seed,
                            "accuracy": acc,
                            "finetuned_accuracy": ft_acc,
                        }
                    )
            log.info("seed %d %s done (fine-tuned accuracy %.3f)", seed, task.task_id, ft_acc)
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: r[k] for k in CSV_COLUMNS})
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        return []
    if tuple(rows[0]) != CSV_COLUMNS or rows[0]["version"] != str(CSV_VERSION):
        raise ValueError(f"unsupported bench CSV; expected version {CSV_VERSION} with columns {CSV_COLUMNS}")
    out = []
    for r in rows:
        out.append(
            {
                "version": int(r["version"]),
                "task": r["task"],
                "method": r["method"],
                "ratio": float(r["ratio"]),
                "seed": int(r["seed"]),
                "accuracy": float(r["accuracy"]),
                "finetuned_accuracy": float(r["finetuned_accuracy"]),
            }
        )
    return out


def summarize(rows: Sequence[dict]) -> dict[tuple[str, float], dict[str, float]]:
    """Mean accuracy and mean retention (accuracy / fine-tuned accuracy) per (method, ratio)."""
    groups: dict[tuple[str, float], list[dict]] = {}
    for r in rows:
        groups.setdefault((r["method"], r["ratio"]), []).append(r)
    return {
        k: {
            "accuracy": math.fsum(r["accuracy"] for r in v) / len(v),
            "retention": math.fsum(r["accuracy"] / r["finetuned_accuracy"] for r in v) / len(v),
            "n": len(v),
        }
        for k, v in sorted(groups.items())
    }


def format_summary(summary) -> str:
    lines = [f"{'method':<12} {'ratio':>7} {'n':>4} {'accuracy':>9} {'retention':>9}"]
    for (method, ratio), s in summary.items():
        lines.append(f"{method:<12} {ratio:>7g} {s['n']:>4d} {s['accuracy']:>9.4f} {s['retention']:>9.4f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# two-task merges through the recipe pipeline


SIMILAR_ANGLES = (0.0, 20.0)
DISSIMILAR_ANGLES = (0.0, 90.0)


def write_lab_run(
    cfg: LabConfig, seed: int, angles: Sequence[float], directory: str | Path, level: str = "layer"
) -> tuple[dict, dict]:
    """Pretrain, fine-tune and export one toy run to ``directory``.

    Returns ``(files, finetuned_accuracy)``: paths suitable for a recipe
    (relative to ``directory``) and each task's fine-tuned test accuracy
    measured on the exported float32 checkpoint.
    """
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    spec, base = pretrained_base(cfg, seed)
    tasks = lab_tasks(cfg, seed, len(angles), angles)
    spec.save(d / "net.json")
    (d / "schema.json").write_text(json.dumps(lab.layer_schema(spec, level).to_dict(), indent=2), encoding="utf-8")
    save_checkpoint(lab.export(base), d / "base.safetensors")
    files = {"base": "base.safetensors", "net_spec": "net.json", "schema": "schema.json", "tasks": []}
    ft_acc = {}
    for t in tasks:
        fine = lab.export(finetune(cfg, spec, base, t))
        save_checkpoint(fine, d / f"{t.task_id}.safetensors")
        t.save(d / "data")
        files["tasks"].append(
            {"task_id": t.task_id, "fine": f"{t.task_id}.safetensors", "batch": f"data/{t.task_id}.fewshot.json"}
        )
        ft_acc[t.task_id] = lab.evaluate(fine, spec, t.test)[0]
    return files, ft_acc


def two_task_merge(
    cfg: LabConfig,
    seed: int,
    angles: Sequence[float],
    ratio: float = 0.9,
    epsilon: float = 0.05,
    provider: str = "causal",
    level: str = "layer",
    directory: str | Path | None = None,
) -> dict:
    """Merge two fine-tunes with mi-task-arithmetic + apl-tanh; report accuracies and retention."""
    with tempfile.TemporaryDirectory() as tmp:
        d = Path(directory or tmp)
        files, ft_acc = write_lab_run(cfg, seed, angles, d, level)
        recipe = MergeRecipe.from_dict(
            dict(
                files,
                method="mi-task-arithmetic",
                pruner="apl-tanh",
                provider=provider,
                level=level,
                ratio=ratio,
                epsilon=epsilon,
                seed=seed,
            ),
            d,
        )
        merged, report = run_recipe(recipe)
        spec = lab.ToyNetSpec.load(d / "net.json")
        out = {"seed": seed, "angles": list(angles), "weights": report["weights"], "tasks": {}}
        for t in recipe.tasks:
            test = FewShotBatch.load(d / "data" / f"{t.task_id}.test.json")
            acc = lab.evaluate(merged, spec, test)[0]
            base_acc = lab.evaluate(load_checkpoint(recipe.base), spec, test)[0]
            out["tasks"][t.task_id] = {
                "finetuned": ft_acc[t.task_id],
                "merged": acc,
                "base": base_acc,
                "retention": acc / ft_acc[t.task_id],
            }
        return out
