"""Delta parameters, drop masks, and drop-and-rescale pruning.

Deltas are computed in float64. The difference of two float32 values is exact
in float64 whenever their binary exponents differ by at most 29 (or one is
zero), which covers any realistic fine-tune and keeps
``reconstruct(base, compute_delta(fine, base))`` bit-identical to ``fine``
(up to the sign of zero entries, which IEEE subtraction cannot preserve).
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import AlignmentError
from .store import Partition, TensorMap, _check_bounds, check_aligned, model_partition

DeltaMap = TensorMap
MODES = ("random", "magnitude")


def compute_delta(fine: TensorMap, base: TensorMap) -> DeltaMap:
    check_aligned(fine, base)
    if not len(fine):
        raise ValueError("cannot compute a delta over an empty tensor map")
    return TensorMap({n: np.asarray(fine[n], np.float64) - np.asarray(base[n], np.float64) for n in fine})


def reconstruct(base: TensorMap, delta: DeltaMap) -> TensorMap:
    """``base + delta``, returned in the base dtype."""
    check_aligned(base, delta)
    return TensorMap(
        {n: (np.asarray(base[n], np.float64) + np.asarray(delta[n], np.float64)).astype(base[n].dtype) for n in base}
    )


@dataclass(frozen=True)
class DropMask:
    """Per-tensor boolean drop flags (True = drop) plus the ratios used to draw them."""

    masks: TensorMap
    ratios: Mapping[str, float]
    partitions: tuple[Partition, ...]
    mode: str
    seed: int | None = None

    def dropped(self) -> int:
        return int(sum(m.sum() for m in self.masks.values()))

    def drop_fraction(self) -> float:
        return self.dropped() / self.masks.size


def _normalize_ratios(delta, ratios, partitions):
    if isinstance(ratios, (int, float)):
        if partitions is None:
            partitions = [model_partition(delta)]
        ratios = {p.id: float(ratios) for p in partitions}
    elif partitions is None:
        raise ValueError("a per-partition ratio map needs the partitions it refers to")
    known = {p.id for p in partitions}
    for pid, r in ratios.items():
        if pid not in known:
            raise ValueError(f"ratio given for unknown partition {pid!r}")
        if not 0.0 <= r < 1.0 or math.isnan(r):
            raise ValueError(f"drop ratio for {pid!r} must lie in [0, 1), got {r}")
    for p in partitions:
        if p.id not in ratios:
            raise ValueError(f"no drop ratio for partition {p.id!r}")
    return {k: float(v) for k, v in ratios.items()}, tuple(partitions)


def element_ratios(shapes: Mapping[str, tuple], partitions: Sequence[Partition], ratios: Mapping[str, float]):
    """Per-element drop ratio arrays; raises if the partitions leave a gap."""
    out = {n: np.full(s, np.nan) for n, s in shapes.items()}
    for p in partitions:
        for name, sl in p.members:
            out[name][sl] = ratios[p.id]
    for name, arr in out.items():
        if np.isnan(arr).any():
            raise ValueError(f"partitions do not cover tensor {name!r}")
    return out


def make_mask(
    delta: DeltaMap,
    ratios: Mapping[str, float] | float,
    partitions: Sequence[Partition] | None = None,
    mode: str = "random",
    seed: int | None = None,
) -> DropMask:
    """Sample (random) or rank (magnitude) a drop mask.

    Random mode drops each element of partition ``p`` independently with
    probability ``ratios[p]`` using the counter-based generator in
    :mod:`aplmerge.rng`. Magnitude mode drops ``floor(ratio * n_p)`` elements
    of smallest ``|delta|`` inside each partition, breaking ties by tensor name
    then flat index. A scalar ``ratios`` applies one ratio to the whole model,
    which makes magnitude ranking global.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mask mode {mode!r}")
    ratios, partitions = _normalize_ratios(delta, ratios, partitions)
    for p in partitions:
        _check_bounds(delta, p)
    per_elem = element_ratios(delta.shapes, partitions, ratios)

    if mode == "random":
        if seed is None:
            raise ValueError("random masks need a seed")
        masks = {}
        for name, arr in delta.items():
            u = rng.uniforms(seed, name, arr.size).reshape(arr.shape)
            masks[name] = u < per_elem[name]
        return DropMask(TensorMap(masks), ratios, partitions, mode, seed)

    masks = {name: np.zeros(arr.shape, dtype=bool) for name, arr in delta.items()}
    rank_of = {name: i for i, name in enumerate(sorted(delta))}
    flat_ids = {}
    for p in partitions:
        k = int(math.floor(ratios[p.id] * p.size + 1e-9))
        if k == 0:
            continue
        mags, names, flats = [], [], []
        for name, sl in p.members:
            if name not in flat_ids:
                flat_ids[name] = np.arange(delta[name].size).reshape(delta[name].shape)
            f = flat_ids[name][sl].ravel()
            mags.append(np.abs(np.asarray(delta[name], np.float64)[sl]).ravel())
            names.append(np.full(f.size, rank_of[name]))
            flats.append(f)
        mags, names, flats = np.concatenate(mags), np.concatenate(names), np.concatenate(flats)
        order = np.lexsort((flats, names, mags))[:k]
        for r in np.unique(names[order]):
            name = sorted(delta)[r]
            sel = flats[order][names[order] == r]
            masks[name].reshape(-1)[sel] = True
    return DropMask(TensorMap(masks), ratios, partitions, mode, None)


def _check_mask(delta: DeltaMap, mask: DropMask) -> None:
    try:
        check_aligned(delta, mask.masks)
    except AlignmentError as exc:
        raise AlignmentError(f"mask does not match delta: {exc}") from exc


def apply_mask(delta: DeltaMap, mask: DropMask) -> DeltaMap:
    """Zero the dropped elements without rescaling."""
    _check_mask(delta, mask)
    return TensorMap({n: np.where(mask.masks[n], 0.0, np.asarray(delta[n], np.float64)) for n in delta})


def apply_mask_rescale(delta: DeltaMap, mask: DropMask, global_ratio: float | None = None) -> DeltaMap:
    """Zero dropped elements and divide survivors by ``1 - ratio``.

    The ratio is the nominal per-partition ratio stored in the mask; pass
    ``global_ratio`` to rescale everything by one ratio instead.
    """
    _check_mask(delta, mask)
    if global_ratio is not None:
        if not 0.0 <= global_ratio < 1.0:
            raise ValueError(f"rescale ratio must lie in [0, 1), got {global_ratio}")
        keep = {n: np.full(s, 1.0 - global_ratio) for n, s in delta.shapes.items()}
    else:
        bad = [pid for pid, r in mask.ratios.items() if not r < 1.0]
        if bad:
            raise ValueError(f"drop ratio of partition {bad[0]!r} is 1; cannot rescale")
        keep = {n: 1.0 - a for n, a in element_ratios(delta.shapes, mask.partitions, mask.ratios).items()}
    return TensorMap(
        {n: np.where(mask.masks[n], 0.0, np.asarray(delta[n], np.float64) / keep[n]) for n in delta}
    )
