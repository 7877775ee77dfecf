"""Input validation helpers shared by the estimator API."""
from __future__ import annotations

import numpy as np

from .io import BrainMask, LabelMap, Volume


def check_volume(x) -> Volume:
    if isinstance(x, Volume):
        return x
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3D volume, got array of shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("volume contains non-finite values")
    return Volume(arr)


def check_volumes(X) -> list[Volume]:
    """Accept one volume, a list of volumes/arrays, or a 4D stacked array."""
    if isinstance(X, Volume):
        return [X]
    if isinstance(X, np.ndarray):
        if X.ndim == 3:
            return [check_volume(X)]
        if X.ndim == 4:
            return [check_volume(x) for x in X]
        raise ValueError(f"expected 3D or 4D array, got shape {X.shape}")
    vols = [check_volume(x) for x in X]
    if not vols:
        raise ValueError("no volumes given")
    return vols


def check_labelmap(y, num_classes: int, dims=None) -> LabelMap:
    if isinstance(y, LabelMap):
        lab = y
    else:
        lab = LabelMap(np.asarray(y), num_classes)
    if lab.num_classes > num_classes:
        raise ValueError(f"label map has {lab.num_classes} classes, estimator expects {num_classes}")
    if lab.labels.size and lab.labels.max() >= num_classes:
        raise ValueError(f"label {lab.labels.max()} out of range for {num_classes} classes")
    if dims is not None and lab.dims != tuple(dims):
        raise ValueError(f"label map dims {lab.dims} do not match volume dims {tuple(dims)}")
    return lab


def check_labelmaps(y, volumes: list[Volume], num_classes: int) -> list[LabelMap]:
    if isinstance(y, (LabelMap, np.ndarray)) and len(volumes) == 1 and np.ndim(getattr(y, "labels", y)) == 3:
        y = [y]
    y = list(y)
    if len(y) != len(volumes):
        raise ValueError(f"got {len(y)} label maps for {len(volumes)} volumes")
    return [check_labelmap(l, num_classes, v.dims) for l, v in zip(y, volumes)]


def check_masks(masks, volumes: list[Volume]) -> list[BrainMask | None]:
    if masks is None:
        return [None] * len(volumes)
    if isinstance(masks, (BrainMask, np.ndarray)) and len(volumes) == 1 and np.ndim(getattr(masks, "mask", masks)) == 3:
        masks = [masks]
    masks = list(masks)
    if len(masks) != len(volumes):
        raise ValueError(f"got {len(masks)} masks for {len(volumes)} volumes")
    out = []
    for m, v in zip(masks, volumes):
        if m is None:
            out.append(None)
            continue
        m = m if isinstance(m, BrainMask) else BrainMask(m)
        if m.dims != v.dims:
            raise ValueError(f"mask dims {m.dims} do not match volume dims {v.dims}")
        if not m.mask.any():
            raise ValueError("empty brain mask")
        out.append(m)
    return out
