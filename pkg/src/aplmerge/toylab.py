"""Desk-scale laboratory: a tanh MLP classifier and synthetic Gaussian tasks.

Nets are plain :class:`TensorMap` objects named ``layer{k}.weight`` with shape
``[out, in]`` and ``layer{k}.bias`` with shape ``[out]``, so partition schemas
written for checkpoints apply to them directly. All arithmetic is float64;
:func:`export` converts to float32 for checkpoint files.
"""

from __future__ import annotations

import json
import math
import os
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .importance import FewShotBatch
from .store import PartitionSchema, GroupSpec, TensorMap, atomic_write_text


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ToyNetSpec:
    input_dim: int
    class_count: int
    hidden_dims: tuple[int, ...] = (32, 32)
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or self.class_count < 1 or any(h < 1 for h in self.hidden_dims):
            raise ValueError("all layer widths must be >= 1")
        if self.activation != "tanh":
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.class_count)

    @property
    def layer_count(self) -> int:
        return len(self.hidden_dims) + 1

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "class_count": self.class_count,
            "hidden_dims": list(self.hidden_dims),
            "activation": self.activation,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, obj) -> ToyNetSpec:
        return cls(
            int(obj["input_dim"]),
            int(obj["class_count"]),
            tuple(obj.get("hidden_dims", (32, 32))),
            obj.get("activation", "tanh"),
            int(obj.get("seed", 0)),
        )

    def save(self, path) -> None:
        atomic_write_text(path, json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> ToyNetSpec:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def init_net(spec: ToyNetSpec, seed: int | None = None) -> TensorMap:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    params = {}
    widths = spec.widths
    for k in range(1, len(widths)):
        fan_in, fan_out = widths[k - 1], widths[k]
        bound = 1.0 / math.sqrt(fan_in)
        params[f"layer{k}.weight"] = rng.uniform(-bound, bound, (fan_out, fan_in))
        params[f"layer{k}.bias"] = rng.uniform(-bound, bound, fan_out)
    return TensorMap(params)


def export(net: TensorMap) -> TensorMap:
    return net.astype(np.float32)


def layer_schema(spec: ToyNetSpec, level: str = "layer") -> PartitionSchema:
    """One group per layer; at hidden level each output unit is a partition."""
    groups = tuple(GroupSpec(f"layer{k}", (f"layer{k}.*",)) for k in range(1, spec.layer_count + 1))
    return PartitionSchema(level, groups)


def _params(net: TensorMap, spec: ToyNetSpec):
    widths = spec.widths
    layers = []
    for k in range(1, len(widths)):
        w = np.asarray(net[f"layer{k}.weight"], np.float64)
        b = np.asarray(net[f"layer{k}.bias"], np.float64)
        if w.shape != (widths[k], widths[k - 1]) or b.shape != (widths[k],):
            raise ValueError(f"layer{k} has shape {w.shape}/{b.shape}, spec wants {(widths[k], widths[k - 1])}")
        layers.append((w, b))
    return layers


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_inputs(x, spec: ToyNetSpec) -> np.ndarray:
    x = np.asarray(x, np.float64)
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"inputs must have shape (n, {spec.input_dim}), got {x.shape}")
    return x


def forward(net: TensorMap, spec: ToyNetSpec, inputs) -> np.ndarray:
    """Class-probability matrix, one softmax row per input."""
    h = _check_inputs(inputs, spec)
    layers = _params(net, spec)
    for w, b in layers[:-1]:
        h = np.tanh(h @ w.T + b)
    w, b = layers[-1]
    return _softmax(h @ w.T + b)


def _check_labels(batch: FewShotBatch, spec: ToyNetSpec) -> None:
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.labels.max() >= spec.class_count:
        raise ValueError(f"label {int(batch.labels.max())} out of range for {spec.class_count} classes")


def loss(net: TensorMap, spec: ToyNetSpec, batch: FewShotBatch) -> float:
    _check_labels(batch, spec)
    p = forward(net, spec, batch.inputs)
    return float(-np.mean(np.log(p[np.arange(len(batch)), batch.labels])))


def loss_and_grad(net: TensorMap, spec: ToyNetSpec, batch: FewShotBatch) -> tuple[float, TensorMap]:
    """Mean cross-entropy and its exact gradient by backpropagation."""
    _check_labels(batch, spec)
    x = _check_inputs(batch.inputs, spec)
    layers = _params(net, spec)
    n = len(batch)
    acts = [x]
    for w, b in layers[:-1]:
        acts.append(np.tanh(acts[-1] @ w.T + b))
    w, b = layers[-1]
    z = acts[-1] @ w.T + b
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    value = float(-np.mean(logp[rows, batch.labels]))

    delta = np.exp(logp)
    delta[rows, batch.labels] -= 1.0
    delta /= n
    grads = {}
    for k in range(len(layers), 0, -1):
        w, _ = layers[k - 1]
        a = acts[k - 1]
        grads[f"layer{k}.weight"] = delta.T @ a
        grads[f"layer{k}.bias"] = delta.sum(axis=0)
        if k > 1:
            delta = (delta @ w) * (1.0 - a * a)
    return value, TensorMap(grads)


def finite_diff_grad(net: TensorMap, spec: ToyNetSpec, batch: FewShotBatch, h: float = 1e-5) -> TensorMap:
    """Central differences ``(L(t + h e_i) - L(t - h e_i)) / 2h`` for every parameter."""
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    base = {k: np.array(v, np.float64) for k, v in net.items()}
    grads = {}
    for name, arr in base.items():
        g = np.empty_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss(TensorMap(base), spec, batch)
            flat[i] = old - h
            down = loss(TensorMap(base), spec, batch)
            flat[i] = old
            g.reshape(-1)[i] = (up - down) / (2 * h)
        grads[name] = g
    return TensorMap(grads)


def train(
    net: TensorMap,
    spec: ToyNetSpec,
    data: FewShotBatch,
    epochs: int,
    step_size: float,
    seed: int = 0,
    freeze: Iterable[str] = (),
) -> TensorMap:
    """Full-batch gradient descent; tensors whose name starts with an entry of ``freeze`` stay fixed.

    ``seed`` is accepted for interface stability; full-batch descent consumes
    no randomness.
    """
    if epochs < 0:
        raise ValueError("epochs must be >= 0")
    if epochs == 0:
        return net
    frozen = tuple(freeze)
    params = {k: np.array(v, np.float64) for k, v in net.items()}
    for epoch in range(epochs):
        with np.errstate(over="ignore", invalid="ignore"):
            value, grad = loss_and_grad(TensorMap(params), spec, data)
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at epoch {epoch} (step size {step_size})")
        for name, g in grad.items():
            if not (frozen and name.startswith(frozen)):
                params[name] -= step_size * g
    out = dict(params)
    for name in net:
        if frozen and name.startswith(frozen):
            out[name] = net[name]
    return TensorMap(out)


def evaluate(net: TensorMap, spec: ToyNetSpec, split: FewShotBatch) -> tuple[float, float]:
    """Accuracy and mean true-label probability."""
    _check_labels(split, spec)
    p = forward(net, spec, split.inputs)
    acc = float(np.mean(p.argmax(axis=1) == split.labels))
    prob = float(np.mean(p[np.arange(len(split)), split.labels]))
    return acc, prob


class ToyEvaluator:
    """:class:`~aplmerge.importance.Evaluator` backed by the toy MLP."""

    def __init__(self, spec: ToyNetSpec):
        self.spec = spec
        self.class_count = spec.class_count

    def score(self, model: TensorMap, batch: FewShotBatch) -> tuple[float, float]:
        p = forward(model, self.spec, batch.inputs)
        _check_labels(batch, self.spec)
        true = p[np.arange(len(batch)), batch.labels]
        return float(np.mean(true)), float(-np.mean(np.log(true)))

    def gradient(self, model: TensorMap, batch: FewShotBatch) -> TensorMap:
        return loss_and_grad(model, self.spec, batch)[1]

    def accuracy(self, model: TensorMap, batch: FewShotBatch) -> float:
        return evaluate(model, self.spec, batch)[0]


# ---------------------------------------------------------------------------
# synthetic tasks


@dataclass(frozen=True)
class TaskTemplate:
    """Shared generator settings for a family of tasks.

    Class means live in the first half of the input coordinates. Task ``t``
    rotates every coordinate pair ``(i, i + d/2)`` by its angle, so tasks 90
    degrees apart occupy orthogonal input subspaces. Labels are cyclically
    shifted by ``round(angle / 90)``: tasks in the same quadrant share labels.
    """

    input_dim: int = 16
    class_count: int = 4
    separation: float = 3.0
    noise: float = 1.0
    train_size: int = 400
    test_size: int = 400
    fewshot_per_class: int = 5
    angles_deg: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.input_dim < 2 or self.input_dim % 2:
            raise ValueError("input_dim must be an even number >= 2")
        if self.class_count < 2:
            raise ValueError("need at least two classes")
        if min(self.train_size, self.test_size) < self.class_count or self.fewshot_per_class < 1:
            raise ValueError("every split needs at least one example per class")
        if self.noise < 0 or self.separation <= 0:
            raise ValueError("noise must be >= 0 and separation > 0")


@dataclass(frozen=True, eq=False)
class SyntheticTask:
    task_id: str
    angle_deg: float
    permutation: tuple[int, ...]
    train: FewShotBatch
    test: FewShotBatch
    fewshot: FewShotBatch
    seed: int = 0

    def split(self, name: str) -> FewShotBatch:
        return {"train": self.train, "test": self.test, "fewshot": self.fewshot}[name]

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name in ("train", "test", "fewshot"):
            self.split(name).save(directory / f"{self.task_id}.{name}.json")
        meta = {"task_id": self.task_id, "angle_deg": self.angle_deg, "permutation": list(self.permutation), "seed": self.seed}
        path = directory / f"{self.task_id}.task.json"
        atomic_write_text(path, json.dumps(meta, indent=2))
        return path

    @classmethod
    def load(cls, directory, task_id: str) -> SyntheticTask:
        directory = Path(directory)
        meta = json.loads((directory / f"{task_id}.task.json").read_text(encoding="utf-8"))
        splits = {n: FewShotBatch.load(directory / f"{task_id}.{n}.json") for n in ("train", "test", "fewshot")}
        return cls(task_id, meta["angle_deg"], tuple(meta["permutation"]), splits["train"], splits["test"], splits["fewshot"], meta.get("seed", 0))


def similar(a: SyntheticTask, b: SyntheticTask, threshold_deg: float = 45.0) -> bool:
    """Tasks whose rotations differ by less than ``threshold_deg`` (mod 360)."""
    diff = abs(a.angle_deg - b.angle_deg) % 360.0
    return min(diff, 360.0 - diff) < threshold_deg


def class_means(template: TaskTemplate, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0])
    half = template.input_dim // 2
    means = np.zeros((template.class_count, template.input_dim))
    raw = rng.standard_normal((template.class_count, half))
    means[:, :half] = template.separation * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return means


def rotation(input_dim: int, angle_deg: float) -> np.ndarray:
    half = input_dim // 2
    c, s = math.cos(math.radians(angle_deg)), math.sin(math.radians(angle_deg))
    r = np.zeros((input_dim, input_dim))
    idx = np.arange(half)
    r[idx, idx] = c
    r[idx + half, idx + half] = c
    r[idx + half, idx] = s
    r[idx, idx + half] = -s
    return r


def _balanced_labels(n: int, classes: int) -> np.ndarray:
    return np.arange(n) % classes


def _sample(rng, clusters: np.ndarray, labels_of_cluster: np.ndarray, n: int, noise: float, task_id: str) -> FewShotBatch:
    classes = len(clusters)
    cluster = _balanced_labels(n, classes)
    rng.shuffle(cluster)
    x = clusters[cluster] + noise * rng.standard_normal((n, clusters.shape[1]))
    return FewShotBatch(x, labels_of_cluster[cluster], task_id)


def make_tasks(
    count: int, template: TaskTemplate | None = None, seed: int = 0, sample_seed: int | None = None
) -> list[SyntheticTask]:
    """``count`` deterministic tasks; default angles are 0, 90, 180, ... degrees.

    ``seed`` fixes the class means; ``sample_seed`` (default ``seed``) fixes the
    drawn examples, so a second sample seed gives fresh data from the same tasks.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    template = template or TaskTemplate()
    angles = template.angles_deg if template.angles_deg is not None else tuple(90.0 * i for i in range(count))
    if len(angles) < count:
        raise ValueError(f"template lists {len(angles)} angles for {count} tasks")
    means = class_means(template, seed)
    tasks = []
    for t in range(count):
        angle = float(angles[t])
        shift = int(round(angle / 90.0)) % template.class_count
        perm = np.roll(np.arange(template.class_count), shift)
        clusters = means @ rotation(template.input_dim, angle).T
        rng = np.random.default_rng([seed if sample_seed is None else sample_seed, t + 1])
        tid = f"task{t}"
        train = _sample(rng, clusters, perm, template.train_size, template.noise, tid)
        test = _sample(rng, clusters, perm, template.test_size, template.noise, tid)
        few = _sample(rng, clusters, perm, template.fewshot_per_class * template.class_count, template.noise, tid)
        tasks.append(SyntheticTask(tid, angle, tuple(int(p) for p in perm), train, test, few, seed))
    return tasks
