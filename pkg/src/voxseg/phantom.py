"""Deterministic 9-class synthetic head phantoms.

Each subject is a spherical "brain" holding four left/right pairs of
ellipsoids (classes 1..8, ordered thalamus, caudate, putamen, pallidum with
left before right). Intensities are a per-class mean, scaled by a smooth
multiplicative bias field, plus Gaussian noise. Geometry is given in voxels
of a 48^3 reference grid and scaled to ``dims``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io import BrainMask, LabelMap, Volume

__all__ = ["Ellipsoid", "PhantomSpec", "generate", "generate_with_masks", "paint_labels"]

_REF = 48.0


@dataclass(frozen=True)
class Ellipsoid:
    """Center offset from the volume center and semi-axes, in reference voxels."""

    center: tuple[float, float, float]
    radii: tuple[float, float, float]


def _pair(center, radii):
    x, y, z = center
    return Ellipsoid((-x, y, z), radii), Ellipsoid((x, y, z), radii)


_DEFAULT_STRUCTURES = (
    *_pair((6.0, -2.0, 0.0), (3.5, 5.0, 4.0)),  # thalamus
    *_pair((7.0, 11.0, 4.0), (3.0, 4.0, 3.5)),  # caudate
    *_pair((16.0, 2.0, 0.0), (2.5, 5.0, 4.0)),  # putamen
    *_pair((7.0, -2.0, -11.0), (3.2, 4.0, 3.5)),  # pallidum
)

# tissue-class means, index 0 is brain background; outside the brain is 0
_DEFAULT_MEANS = (100.0, 20.0, 45.0, 140.0, 165.0, 190.0, 215.0, 240.0, 265.0)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (48, 48, 48)
    num_subjects: int = 4
    structures: tuple[Ellipsoid, ...] = _DEFAULT_STRUCTURES
    class_means: tuple[float, ...] = _DEFAULT_MEANS
    noise_sigma: float = 4.0
    bias_amplitude: float = 0.02
    brain_radius: float = 21.0
    center_jitter: float = 1.0
    radius_jitter: float = 0.05
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        if len(self.structures) != 8:
            raise ValueError("phantoms carry exactly 8 structure classes")
        if len(self.class_means) != 9:
            raise ValueError("class_means needs 9 entries (background + 8 structures)")
        if self.num_subjects < 0:
            raise ValueError("num_subjects must be >= 0")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"invalid dims {self.dims}")


def _jittered(spec: PhantomSpec, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    scale = np.asarray(spec.dims, dtype=np.float64) / _REF
    center = (np.asarray(spec.dims, dtype=np.float64) - 1) / 2
    out = []
    for e in spec.structures:
        c = center + np.asarray(e.center) * scale + rng.uniform(-1, 1, 3) * spec.center_jitter
        r = np.asarray(e.radii) * scale * (1 + rng.uniform(-1, 1, 3) * spec.radius_jitter)
        out.append((c, r))
    return out


def paint_labels(spec: PhantomSpec, geometry) -> np.ndarray:
    """Rasterize jittered ellipsoids; raises if they leave the volume or overlap."""
    dims = np.asarray(spec.dims)
    labels = np.zeros(spec.dims, dtype=np.int64)
    for cls, (c, r) in enumerate(geometry, 1):
        if np.any(c - r < 0) or np.any(c + r > dims - 1):
            raise ValueError(f"structure {cls} overflows the volume (center {c}, radii {r})")
        lo = np.floor(c - r).astype(int)
        hi = np.ceil(c + r).astype(int) + 1
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        grid = np.indices(hi - lo, dtype=np.float64) + lo.reshape(3, 1, 1, 1)
        inside = sum(((grid[i] - c[i]) / r[i]) ** 2 for i in range(3)) <= 1.0
        region = labels[box]
        if np.any(region[inside] != 0):
            raise ValueError(f"structure {cls} overlaps another structure")
        region[inside] = cls
    return labels


def _bias_field(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.bias_amplitude == 0:
        return np.ones(spec.dims)
    grid = np.indices(spec.dims, dtype=np.float64)
    field_ = np.zeros(spec.dims)
    for _ in range(3):
        k = rng.uniform(0.5, 1.0, 3) * 2 * np.pi / np.asarray(spec.dims)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.cos(sum(k[i] * grid[i] for i in range(3)) + phase)
    field_ /= np.abs(field_).max()
    return 1.0 + spec.bias_amplitude * field_


def _subject(spec: PhantomSpec, rng: np.random.Generator):
    labels = paint_labels(spec, _jittered(spec, rng))
    grid = np.indices(spec.dims, dtype=np.float64)
    center = (np.asarray(spec.dims, dtype=np.float64) - 1) / 2
    scale = np.asarray(spec.dims, dtype=np.float64) / _REF
    rad = spec.brain_radius * scale
    brain = sum(((grid[i] - center[i]) / rad[i]) ** 2 for i in range(3)) <= 1.0
    brain |= labels > 0

    means = np.asarray(spec.class_means)
    clean = np.where(brain, means[labels], 0.0)
    bias = _bias_field(spec, rng)
    noise = rng.normal(0.0, spec.noise_sigma, spec.dims) if spec.noise_sigma > 0 else 0.0
    # stored as float32 on disk; quantize now so fixtures round-trip exactly
    data = (clean * bias + noise).astype(np.float32).astype(np.float64)
    return (
        Volume(data, spec.spacing),
        LabelMap(labels, 9, spec.spacing),
        BrainMask(brain),
    )


def generate_with_masks(spec: PhantomSpec) -> list[tuple[Volume, LabelMap, BrainMask]]:
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(spec.num_subjects)]
    return [_subject(spec, rng) for rng in rngs]


def generate(spec: PhantomSpec) -> list[tuple[Volume, LabelMap]]:
    """One ``(Volume, LabelMap)`` pair per subject, fully determined by ``spec.seed``."""
    return [(v, l) for v, l, _ in generate_with_masks(spec)]
