"""Checkpoint storage and parameter partitions.

Checkpoints are collections of named dense tensors (:class:`TensorMap`) stored in
a safetensors-compatible subset: an 8-byte little-endian header length, a JSON
header mapping names to ``{dtype, shape, data_offsets}``, then packed
little-endian float32 data.

Partitions group tensor slices into units that can be scored and pruned
together, at model, layer or hidden-state granularity.
"""

from __future__ import annotations

import fnmatch
import json
import math
import os
import struct
import tempfile
from collections.abc import Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, CheckpointFormatError, SchemaError

LEVELS = ("model", "layer", "hidden")
RESIDUAL_ID = "__residual__"


class TensorMap(Mapping):
    """Immutable, name-sorted mapping from tensor names to numpy arrays.

    Arrays are stored read-only. An input array that is already read-only is
    shared rather than copied, which lets :func:`substitute` and friends reuse
    untouched tensors.
    """

    def __init__(self, entries: Mapping[str, np.ndarray] | None = None):
        data = {}
        for name, value in (entries or {}).items():
            if not isinstance(name, str):
                raise TypeError(f"tensor names must be str, got {type(name).__name__}")
            arr = value if isinstance(value, np.ndarray) and not value.flags.writeable else np.array(value)
            if arr.dtype.kind not in "fiub":
                raise TypeError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
            if any(n <= 0 for n in arr.shape):
                raise ValueError(f"tensor {name!r} has a non-positive extent in shape {arr.shape}")
            arr.flags.writeable = False
            data[name] = arr
        self._data = {name: data[name] for name in sorted(data)}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        body = ", ".join(f"{k}: {list(v.shape)} {v.dtype}" for k, v in self._data.items())
        return f"TensorMap({{{body}}})"

    @property
    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: arr.shape for name, arr in self._data.items()}

    @property
    def size(self) -> int:
        """Total element count."""
        return sum(arr.size for arr in self._data.values())

    def astype(self, dtype) -> TensorMap:
        return TensorMap({k: v.astype(dtype) for k, v in self._data.items()})

    def equals(self, other: Mapping[str, np.ndarray]) -> bool:
        """Bit-exact equality of names, shapes, dtypes and element bytes."""
        if list(self) != sorted(other):
            return False
        for name, arr in self._data.items():
            o = np.asarray(other[name])
            if arr.shape != o.shape or arr.dtype != o.dtype or arr.tobytes() != o.tobytes():
                return False
        return True


def check_aligned(a: Mapping[str, np.ndarray], b: Mapping[str, np.ndarray]) -> None:
    """Raise :class:`AlignmentError` unless ``a`` and ``b`` have equal names and shapes."""
    missing = sorted(set(a) ^ set(b))
    if missing:
        raise AlignmentError(f"tensor name sets differ; first offending name: {missing[0]!r}")
    for name in sorted(a):
        if np.shape(a[name]) != np.shape(b[name]):
            raise AlignmentError(
                f"shape mismatch on tensor {name!r}: {np.shape(a[name])} vs {np.shape(b[name])}"
            )


# ---------------------------------------------------------------------------
# checkpoint files


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise CheckpointFormatError(f"duplicate tensor name {key!r} in header")
        out[key] = value
    return out


def load_checkpoint(path: str | os.PathLike) -> TensorMap:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise CheckpointFormatError(f"{path}: file shorter than the 8-byte header length")
    (n,) = struct.unpack("<Q", raw[:8])
    if 8 + n > len(raw):
        raise CheckpointFormatError(f"{path}: header length {n} exceeds file size {len(raw)}")
    try:
        header = json.loads(raw[8 : 8 + n].decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except CheckpointFormatError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise CheckpointFormatError(f"{path}: header is not a JSON object")
    header.pop("__metadata__", None)

    data = raw[8 + n :]
    spans = []
    tensors = {}
    for name, info in header.items():
        if not isinstance(info, dict) or set(info) != {"dtype", "shape", "data_offsets"}:
            raise CheckpointFormatError(f"{path}: malformed entry for {name!r}")
        if info["dtype"] != "F32":
            raise CheckpointFormatError(f"{path}: tensor {name!r} has unsupported dtype {info['dtype']!r}")
        shape = info["shape"]
        offsets = info["data_offsets"]
        if not (isinstance(shape, list) and all(isinstance(s, int) and s > 0 for s in shape)):
            raise CheckpointFormatError(f"{path}: bad shape for {name!r}: {shape!r}")
        if not (isinstance(offsets, list) and len(offsets) == 2 and all(isinstance(o, int) for o in offsets)):
            raise CheckpointFormatError(f"{path}: bad data_offsets for {name!r}: {offsets!r}")
        begin, end = offsets
        expected = 4 * math.prod(shape)
        if end - begin != expected or begin < 0:
            raise CheckpointFormatError(
                f"{path}: tensor {name!r} declares {end - begin} bytes, shape needs {expected}"
            )
        spans.append((begin, end, name))
        tensors[name] = (shape, begin, end)

    spans.sort()
    cursor = 0
    for begin, end, name in spans:
        if begin != cursor:
            raise CheckpointFormatError(f"{path}: data region of {name!r} overlaps or leaves a gap")
        cursor = end
    if cursor != len(data):
        raise CheckpointFormatError(
            f"{path}: length mismatch, header declares {cursor} data bytes but file holds {len(data)}"
        )

    out = {}
    for name, (shape, begin, end) in tensors.items():
        arr = np.frombuffer(data, dtype="<f4", count=(end - begin) // 4, offset=begin)
        out[name] = arr.astype(np.float32).reshape(shape)
    return TensorMap(out)


def checkpoint_bytes(tmap: Mapping[str, np.ndarray]) -> bytes:
    """Serialize ``tmap`` to the checkpoint byte layout (deterministic)."""
    header = {}
    chunks = []
    offset = 0
    for name in sorted(tmap):
        arr = np.asarray(tmap[name])
        if arr.dtype != np.float32:
            raise TypeError(f"tensor {name!r} is {arr.dtype}; checkpoints hold float32 only")
        buf = np.ascontiguousarray(arr).astype("<f4", copy=False).tobytes()
        header[name] = {"dtype": "F32", "shape": list(arr.shape), "data_offsets": [offset, offset + len(buf)]}
        chunks.append(buf)
        offset += len(buf)
    head = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
    head += b" " * (-len(head) % 8)
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    """Write via a temporary sibling file and rename, so ``path`` is never partial."""
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException as exc:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        if isinstance(exc, OSError):
            raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_checkpoint(tmap: Mapping[str, np.ndarray], path: str | os.PathLike) -> None:
    atomic_write_bytes(path, checkpoint_bytes(tmap))


# ---------------------------------------------------------------------------
# partitions


@dataclass(frozen=True)
class GroupSpec:
    """One schema group: glob patterns selecting tensors, and per-tensor slice axes."""

    id: str
    patterns: tuple[str, ...]
    axes: Mapping[str, int] = field(default_factory=dict)

    def matches(self, name: str) -> bool:
        return any(fnmatch.fnmatchcase(name, p) for p in self.patterns)

    def axis_for(self, name: str) -> int:
        for pattern, axis in self.axes.items():
            if fnmatch.fnmatchcase(name, pattern):
                return axis
        return 0


@dataclass(frozen=True)
class PartitionSchema:
    level: str
    groups: tuple[GroupSpec, ...] = ()
    residual: str = "error"

    def __post_init__(self):
        if self.level not in LEVELS:
            raise SchemaError(f"unknown partition level {self.level!r}; expected one of {LEVELS}")
        if self.residual not in ("error", "implicit-residual-group"):
            raise SchemaError(f"unknown residual policy {self.residual!r}")
        ids = [g.id for g in self.groups]
        if len(set(ids)) != len(ids):
            raise SchemaError("duplicate group ids in schema")
        if self.level != "model" and not self.groups:
            raise SchemaError(f"level {self.level!r} needs at least one group")

    @classmethod
    def from_dict(cls, obj: Mapping) -> PartitionSchema:
        try:
            groups = []
            for g in obj.get("groups", []):
                patterns = g["patterns"]
                if isinstance(patterns, str):
                    patterns = [patterns]
                axes = g.get("axes", {})
                if isinstance(axes, int):
                    axes = {"*": axes}
                groups.append(GroupSpec(str(g["id"]), tuple(patterns), dict(axes)))
            return cls(obj["level"], tuple(groups), obj.get("residual", "error"))
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed schema: {exc!r}") from exc

    @classmethod
    def load(cls, path: str | os.PathLike) -> PartitionSchema:
        text = Path(path).read_text(encoding="utf-8")
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
        return cls.from_dict(obj)

    def with_level(self, level: str) -> PartitionSchema:
        return PartitionSchema(level, self.groups, self.residual)

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "residual": self.residual,
            "groups": [{"id": g.id, "patterns": list(g.patterns), "axes": dict(g.axes)} for g in self.groups],
        }


@dataclass(frozen=True)
class Partition:
    """A set of tensor slices treated as one unit.

    ``members`` holds ``(tensor_name, slices)`` pairs where ``slices`` has one
    concrete ``slice`` per tensor axis.
    """

    id: str
    members: tuple[tuple[str, tuple[slice, ...]], ...]
    size: int
    residual: bool = False

    @classmethod
    def of(cls, pid: str, members, residual: bool = False) -> Partition:
        members = tuple((name, tuple(sl)) for name, sl in members)
        size = sum(math.prod(len(range(s.start, s.stop, s.step)) for s in sl) for _, sl in members)
        return cls(pid, members, size, residual)


def _whole(shape) -> tuple[slice, ...]:
    return tuple(slice(0, n, 1) for n in shape)


def model_partition(tmap: Mapping[str, np.ndarray]) -> Partition:
    return Partition.of("model", [(name, _whole(np.shape(tmap[name]))) for name in sorted(tmap)])


def build_partitions(tmap: Mapping[str, np.ndarray], schema: PartitionSchema) -> list[Partition]:
    """Resolve ``schema`` against the tensors of ``tmap``."""
    names = sorted(tmap)
    if schema.level == "model":
        return [model_partition(tmap)]

    owned: dict[str, list[str]] = {g.id: [] for g in schema.groups}
    unmatched = []
    for name in names:
        hits = [g.id for g in schema.groups if g.matches(name)]
        if len(hits) > 1:
            raise SchemaError(f"tensor {name!r} matches several groups: {hits}")
        if hits:
            owned[hits[0]].append(name)
        else:
            unmatched.append(name)
    if unmatched and schema.residual == "error":
        raise SchemaError(f"tensor {unmatched[0]!r} is not matched by any group")

    parts: list[Partition] = []
    for group in schema.groups:
        members = owned[group.id]
        if not members:
            raise SchemaError(f"group {group.id!r} matches no tensor")
        if schema.level == "layer":
            parts.append(Partition.of(group.id, [(n, _whole(np.shape(tmap[n]))) for n in members]))
            continue
        extent = None
        axes = {}
        for n in members:
            shape = np.shape(tmap[n])
            axis = group.axis_for(n)
            if not 0 <= axis < len(shape):
                raise SchemaError(f"slice axis {axis} out of range for tensor {n!r} with shape {shape}")
            if extent is None:
                extent = shape[axis]
            elif shape[axis] != extent:
                raise SchemaError(
                    f"group {group.id!r}: tensor {n!r} has extent {shape[axis]} on axis {axis}, expected {extent}"
                )
            axes[n] = axis
        for h in range(extent):
            hidden_members = []
            for n in members:
                sl = list(_whole(np.shape(tmap[n])))
                sl[axes[n]] = slice(h, h + 1, 1)
                hidden_members.append((n, tuple(sl)))
            parts.append(Partition.of(f"{group.id}[{h}]", hidden_members))

    if unmatched:
        parts.append(Partition.of(RESIDUAL_ID, [(n, _whole(np.shape(tmap[n]))) for n in unmatched], residual=True))
    return parts


def _check_bounds(tmap: Mapping[str, np.ndarray], partition: Partition) -> None:
    for name, sl in partition.members:
        if name not in tmap:
            raise AlignmentError(f"partition {partition.id!r} references missing tensor {name!r}")
        shape = np.shape(tmap[name])
        if len(sl) != len(shape) or any(s.start < 0 or s.stop > n for s, n in zip(sl, shape)):
            raise AlignmentError(f"partition {partition.id!r} is out of bounds for tensor {name!r} {shape}")


def substitute(fine: TensorMap, base: TensorMap, partition: Partition) -> TensorMap:
    """Copy of ``fine`` with the slices of ``partition`` taken from ``base``."""
    check_aligned(fine, base)
    _check_bounds(fine, partition)
    touched: dict[str, np.ndarray] = {}
    for name, sl in partition.members:
        if name not in touched:
            touched[name] = np.array(fine[name])
        touched[name][sl] = base[name][sl]
    out = dict(fine)
    out.update(touched)
    return TensorMap(out)
