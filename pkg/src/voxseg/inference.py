"""Dense whole-volume segmentation by tiling, and the per-voxel reference path.

Volumes are reflect-padded by half the receptive field on every side, so
each voxel gets a full context window. In padded coordinates, an input tile
that starts at ``p`` produces scores for volume voxels ``p .. p + out - 1``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .io import BrainMask, LabelMap, Volume
from .network import NetworkSpec, NetworkState, forward, forward_macs
from .tensor import softmax

__all__ = [
    "Tile",
    "TilePlan",
    "ProbabilityMaps",
    "plan_tiles",
    "segment_dense",
    "sliding_window_oracle",
    "argmax_labels",
    "dense_macs",
    "sliding_window_macs",
]


@dataclass(frozen=True)
class Tile:
    input_origin: tuple[int, int, int]  # padded-volume coordinates
    input_extent: tuple[int, int, int]
    output_origin: tuple[int, int, int]  # volume coordinates, region written
    output_extent: tuple[int, int, int]

    @property
    def crop(self) -> tuple[slice, slice, slice]:
        """Slice of this tile's score map that lands in the output block."""
        return tuple(
            slice(o - i, o - i + e)
            for i, o, e in zip(self.input_origin, self.output_origin, self.output_extent)
        )


@dataclass(frozen=True)
class TilePlan:
    dims: tuple[int, int, int]
    pad: int
    tiles: tuple[Tile, ...]

    def __len__(self) -> int:
        return len(self.tiles)


@dataclass
class ProbabilityMaps:
    """Per-class probabilities ``(C, D, H, W)`` over a whole volume."""

    probs: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None

    @property
    def num_classes(self) -> int:
        return self.probs.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.probs.shape[1:])

    def class_volume(self, c: int) -> Volume:
        return Volume(self.probs[c], self.spacing, self.affine)


def _axis_starts(dim: int, out: int) -> list[tuple[int, int]]:
    """(computed start, written start) per tile; the last tile shifts back to end at ``dim``."""
    n = math.ceil(dim / out)
    starts = []
    for i in range(n):
        written = i * out
        computed = min(written, dim - out)
        starts.append((computed, written))
    return starts


def plan_tiles(dims, spec: NetworkSpec, input_tile=35) -> TilePlan:
    """Grid of tiles whose output blocks partition the volume exactly.

    Output tiles are ``input_tile - (receptive_field - 1)`` per axis, clipped to
    the volume. The last tile along an axis is shifted back to end at the
    border; it only writes the voxels not already covered.
    """
    dims = tuple(int(d) for d in dims)
    rf = spec.receptive_field
    tile = (input_tile,) * 3 if np.isscalar(input_tile) else tuple(int(t) for t in input_tile)
    if any(t < rf for t in tile):
        raise ValueError(f"input tile {tile} smaller than receptive field {rf}")
    shrink = rf - 1
    out = tuple(min(t - shrink, d) for t, d in zip(tile, dims))
    axes = [_axis_starts(d, o) for d, o in zip(dims, out)]
    tiles = []
    for a in axes[0]:
        for b in axes[1]:
            for c in axes[2]:
                computed = (a[0], b[0], c[0])
                written = (a[1], b[1], c[1])
                ends = tuple(min(w + o, d) for w, o, d in zip(written, out, dims))
                extent = tuple(e - w for e, w in zip(ends, written))
                tiles.append(
                    Tile(computed, tuple(o + shrink for o in out), written, extent)
                )
    return TilePlan(dims, shrink // 2, tuple(tiles))


def _padded(volume: Volume, pad: int, mask) -> np.ndarray:
    data = volume.data
    if mask is not None:
        m = mask.mask if isinstance(mask, BrainMask) else np.asarray(mask, dtype=bool)
        data = np.where(m, data, 0.0)
    return np.pad(data, pad, mode="reflect")


def segment_dense(
    volume: Volume,
    state: NetworkState,
    spec: NetworkSpec,
    plan: TilePlan | None = None,
    input_tile=35,
    mask=None,
    n_jobs: int = 1,
) -> ProbabilityMaps:
    """Class probabilities for every voxel, one forward pass per tile.

    Output blocks are disjoint, so the result does not depend on tile order
    or on ``n_jobs``.
    """
    if plan is None:
        plan = plan_tiles(volume.dims, spec, input_tile)
    if plan.dims != volume.dims:
        raise ValueError(f"tile plan for {plan.dims} used on volume {volume.dims}")
    padded = _padded(volume, plan.pad, mask)
    probs = np.empty((spec.num_classes,) + volume.dims)

    def run(tile: Tile) -> None:
        box = tuple(slice(o, o + e) for o, e in zip(tile.input_origin, tile.input_extent))
        scores, _ = forward(state, spec, padded[box][None])
        p = softmax(scores)
        dst = tuple(slice(o, o + e) for o, e in zip(tile.output_origin, tile.output_extent))
        probs[(slice(None),) + dst] = p[(slice(None),) + tile.crop]

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            list(pool.map(run, plan.tiles))
    else:
        for tile in plan.tiles:
            run(tile)
    return ProbabilityMaps(probs, volume.spacing, volume.affine)


def argmax_labels(p: ProbabilityMaps) -> LabelMap:
    """Most probable class per voxel; ties go to the lowest class index."""
    return LabelMap(np.argmax(p.probs, axis=0), p.num_classes, p.spacing, p.affine)


def sliding_window_oracle(
    volume: Volume, state: NetworkState, spec: NetworkSpec, mask=None, chunk: int = 64
) -> LabelMap:
    """Classify every voxel from its own receptive-field patch, one output voxel each.

    Slow reference for :func:`segment_dense`: each patch goes through a
    direct nested-loop forward pass (:mod:`voxseg.direct`), so cost grows
    with the voxel count times a full pass over the receptive field.
    """
    from .direct import direct_forward

    rf = spec.receptive_field
    pad = (rf - 1) // 2
    padded = _padded(volume, pad, mask)
    windows = sliding_window_view(padded, (rf, rf, rf))  # (D, H, W, rf, rf, rf)
    coords = np.indices(volume.dims).reshape(3, -1).T
    labels = np.empty(len(coords), dtype=np.int64)
    for i0 in range(0, len(coords), chunk):
        c = coords[i0:i0 + chunk]
        patches = windows[c[:, 0], c[:, 1], c[:, 2]]  # (n, rf, rf, rf)
        scores = direct_forward(state, spec, patches)  # (C, 1, 1, 1, n)
        labels[i0:i0 + len(c)] = np.argmax(scores.reshape(scores.shape[0], -1), axis=0)
    return LabelMap(labels.reshape(volume.dims), spec.num_classes, volume.spacing, volume.affine)


def dense_macs(spec: NetworkSpec, dims, input_tile=35) -> int:
    """Convolution MACs of :func:`segment_dense` on a volume of ``dims``."""
    plan = plan_tiles(dims, spec, input_tile)
    return sum(forward_macs(spec, t.input_extent) for t in plan.tiles)


def sliding_window_macs(spec: NetworkSpec, dims) -> int:
    rf = spec.receptive_field
    return int(np.prod([int(d) for d in dims])) * forward_macs(spec, (rf, rf, rf))
