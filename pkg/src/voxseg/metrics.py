"""Post-processing, overlap/distance metrics and the majority-voting baseline."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .io import LabelMap

__all__ = [
    "STRUCTURE_NAMES",
    "largest_component_filter",
    "dsc",
    "mhd",
    "majority_vote_baseline",
    "StructureScore",
    "EvalReport",
    "evaluate",
    "aggregate",
    "mean_foreground_dsc",
]

STRUCTURE_NAMES = {
    1: "thalamus_l",
    2: "thalamus_r",
    3: "caudate_l",
    4: "caudate_r",
    5: "putamen_l",
    6: "putamen_r",
    7: "pallidum_l",
    8: "pallidum_r",
}


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 26:
        return np.ones((3, 3, 3), dtype=bool)
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")


def largest_component_filter(labels: LabelMap, connectivity: int = 26) -> LabelMap:
    """Keep only each foreground class's largest connected component.

    Other components of that class become background. Equal-size components
    are resolved in favour of the one reached first in C-order scan.
    """
    structure = _structure(connectivity)
    out = labels.labels.copy()
    for c in np.unique(out):
        if c == 0:
            continue
        # scipy numbers components in order of their first voxel in raster scan
        comp, n = ndimage.label(out == c, structure=structure)
        if n <= 1:
            continue
        sizes = np.bincount(comp.ravel())[1:]
        keep = int(np.argmax(sizes)) + 1
        out[(comp > 0) & (comp != keep)] = 0
    return labels.with_labels(out)


def dsc(ref: np.ndarray, auto: np.ndarray) -> float:
    """Dice overlap of two binary masks; both empty gives 1."""
    ref = np.asarray(ref, dtype=bool)
    auto = np.asarray(auto, dtype=bool)
    if ref.shape != auto.shape:
        raise ValueError(f"mask dims differ: {ref.shape} vs {auto.shape}")
    total = int(ref.sum()) + int(auto.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ref, auto).sum()) / total


def _directed(src: np.ndarray, dst: np.ndarray, spacing) -> float:
    # distance from every voxel to the nearest voxel of dst, read off at src
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return float(dist[src].max())


def mhd(ref: np.ndarray, auto: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """Symmetric max of the directed max-min Euclidean distances, in mm.

    This is the classical Hausdorff construction (max over both directions of
    the largest nearest-neighbour distance), computed between voxel centers.
    """
    ref = np.asarray(ref, dtype=bool)
    auto = np.asarray(auto, dtype=bool)
    if ref.shape != auto.shape:
        raise ValueError(f"mask dims differ: {ref.shape} vs {auto.shape}")
    if not ref.any() or not auto.any():
        raise ValueError("undefined distance: empty voxel set")
    spacing = tuple(float(s) for s in spacing)
    return max(_directed(ref, auto, spacing), _directed(auto, ref, spacing))


def majority_vote_baseline(training_labelmaps, dims=None) -> LabelMap:
    """Per-voxel modal class over pre-aligned label maps (ties to the lowest class)."""
    maps = list(training_labelmaps)
    if not maps:
        raise ValueError("need at least one label map")
    dims = tuple(dims) if dims is not None else maps[0].dims
    for m in maps:
        if m.dims != dims:
            raise ValueError(f"label map dims {m.dims} do not match {dims}")
    num_classes = max(m.num_classes for m in maps)
    counts = np.zeros((num_classes,) + dims, dtype=np.int32)
    for m in maps:
        for c in range(num_classes):
            counts[c] += m.labels == c
    first = maps[0]
    return LabelMap(np.argmax(counts, axis=0), num_classes, first.spacing, first.affine)


@dataclass
class StructureScore:
    label: int
    name: str
    dsc: float
    mhd_mm: float  # nan when undefined


@dataclass
class EvalReport:
    """Per-structure scores for one subject."""

    subject: str
    scores: list[StructureScore] = field(default_factory=list)

    def __getitem__(self, label: int) -> StructureScore:
        for s in self.scores:
            if s.label == label:
                return s
        raise KeyError(label)

    @property
    def mean_dsc(self) -> float:
        return float(np.mean([s.dsc for s in self.scores])) if self.scores else float("nan")

    def rows(self):
        for s in self.scores:
            yield {"subject": self.subject, "structure": s.name, "dsc": s.dsc, "mhd_mm": s.mhd_mm}


def evaluate(ref: LabelMap, auto: LabelMap, structures=None, subject: str = "") -> EvalReport:
    """DSC and MHD per structure on class-binarized masks.

    A structure missing from either map gets DSC by the empty-mask convention
    and an undefined (NaN) MHD.
    """
    if ref.dims != auto.dims:
        raise ValueError(f"label map dims differ: {ref.dims} vs {auto.dims}")
    if not np.allclose(ref.spacing, auto.spacing):
        raise ValueError(f"spacing differs: {ref.spacing} vs {auto.spacing}")
    if structures is None:
        structures = range(1, ref.num_classes)
    report = EvalReport(subject)
    for c in structures:
        r = ref.labels == c
        a = auto.labels == c
        d = dsc(r, a)
        h = mhd(r, a, ref.spacing) if r.any() and a.any() else math.nan
        report.scores.append(StructureScore(int(c), STRUCTURE_NAMES.get(int(c), f"class_{c}"), d, h))
    return report


def aggregate(reports) -> dict[str, dict[str, float]]:
    """Mean and population std of DSC/MHD per structure over subjects.

    Undefined MHD values are excluded and counted in ``mhd_undefined``.
    """
    by_name: dict[str, list[StructureScore]] = {}
    for rep in reports:
        for s in rep.scores:
            by_name.setdefault(s.name, []).append(s)
    summary = {}
    for name, scores in by_name.items():
        d = np.array([s.dsc for s in scores])
        h = np.array([s.mhd_mm for s in scores])
        defined = h[~np.isnan(h)]
        summary[name] = {
            "dsc_mean": float(d.mean()),
            "dsc_std": float(d.std()),
            "mhd_mean": float(defined.mean()) if defined.size else math.nan,
            "mhd_std": float(defined.std()) if defined.size else math.nan,
            "n": int(d.size),
            "mhd_undefined": int(d.size - defined.size),
        }
    return summary


def mean_foreground_dsc(ref: LabelMap, auto: LabelMap) -> float:
    """Mean DSC over the foreground classes present in ``ref``."""
    present = [c for c in range(1, ref.num_classes) if (ref.labels == c).any()]
    if not present:
        return 1.0
    return float(np.mean([dsc(ref.labels == c, auto.labels == c) for c in present]))
