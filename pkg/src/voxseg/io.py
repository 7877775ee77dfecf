"""Volumes, label maps and a single-file NIfTI-1 subset reader/writer.

Supported on read: little-endian ``.nii`` files with ``dim[0] == 3`` and
datatype uint8, int16 or float32. Volumes are written as float32, label maps
as uint8 with the NIfTI label intent.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Volume",
    "LabelMap",
    "BrainMask",
    "NiftiError",
    "HEADER_DTYPE",
    "read_nifti",
    "write_nifti",
    "normalize_intensity",
]

HEADER_DTYPE = np.dtype(
    [
        ("sizeof_hdr", "<i4"),
        ("data_type", "S10"),
        ("db_name", "S18"),
        ("extents", "<i4"),
        ("session_error", "<i2"),
        ("regular", "S1"),
        ("dim_info", "u1"),
        ("dim", "<i2", (8,)),
        ("intent_p1", "<f4"),
        ("intent_p2", "<f4"),
        ("intent_p3", "<f4"),
        ("intent_code", "<i2"),
        ("datatype", "<i2"),
        ("bitpix", "<i2"),
        ("slice_start", "<i2"),
        ("pixdim", "<f4", (8,)),
        ("vox_offset", "<f4"),
        ("scl_slope", "<f4"),
        ("scl_inter", "<f4"),
        ("slice_end", "<i2"),
        ("slice_code", "u1"),
        ("xyzt_units", "u1"),
        ("cal_max", "<f4"),
        ("cal_min", "<f4"),
        ("slice_duration", "<f4"),
        ("toffset", "<f4"),
        ("glmax", "<i4"),
        ("glmin", "<i4"),
        ("descrip", "S80"),
        ("aux_file", "S24"),
        ("qform_code", "<i2"),
        ("sform_code", "<i2"),
        ("quatern_b", "<f4"),
        ("quatern_c", "<f4"),
        ("quatern_d", "<f4"),
        ("qoffset_x", "<f4"),
        ("qoffset_y", "<f4"),
        ("qoffset_z", "<f4"),
        ("srow_x", "<f4", (4,)),
        ("srow_y", "<f4", (4,)),
        ("srow_z", "<f4", (4,)),
        ("intent_name", "S16"),
        ("magic", "S4"),
    ]
)
assert HEADER_DTYPE.itemsize == 348

_DATATYPES = {2: np.dtype("u1"), 4: np.dtype("<i2"), 16: np.dtype("<f4")}
_INTENT_LABEL = 1002
_VOX_OFFSET = 352


class NiftiError(ValueError):
    """Malformed or unsupported NIfTI file; ``offset`` is the byte offset at fault."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


def _check_geometry(dims, spacing, affine):
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise ValueError(f"dims must be three positive counts, got {dims}")
    if len(spacing) != 3 or any(not s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive values, got {spacing}")
    if affine.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got {affine.shape}")


def _default_affine(spacing) -> np.ndarray:
    return np.diag([float(s) for s in spacing] + [1.0])


@dataclass(eq=False)
class Volume:
    """3D scalar grid with per-axis voxel spacing (mm) and voxel-to-world affine."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.affine = (
            _default_affine(self.spacing)
            if self.affine is None
            else np.asarray(self.affine, dtype=np.float64)
        )
        _check_geometry(self.dims, self.spacing, self.affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.spacing, self.affine.copy())

    def __eq__(self, other):
        return (
            isinstance(other, Volume)
            and self.dims == other.dims
            and self.spacing == other.spacing
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.affine, other.affine)
        )


@dataclass(eq=False)
class LabelMap:
    """3D grid of class indices ``0..num_classes-1``."""

    labels: np.ndarray
    num_classes: int = 9
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {labels.shape}")
        if labels.size and not np.issubdtype(labels.dtype, np.integer):
            if not np.all(labels == np.round(labels)):
                raise ValueError("labels must be integral")
        self.labels = labels.astype(np.int64)
        self.num_classes = int(self.num_classes)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(
                f"labels must lie in [0, {self.num_classes - 1}], "
                f"got range [{self.labels.min()}, {self.labels.max()}]"
            )
        self.spacing = tuple(float(s) for s in self.spacing)
        self.affine = (
            _default_affine(self.spacing)
            if self.affine is None
            else np.asarray(self.affine, dtype=np.float64)
        )
        _check_geometry(self.dims, self.spacing, self.affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def with_labels(self, labels: np.ndarray) -> "LabelMap":
        return LabelMap(labels, self.num_classes, self.spacing, self.affine.copy())

    def __eq__(self, other):
        return (
            isinstance(other, LabelMap)
            and self.num_classes == other.num_classes
            and self.spacing == other.spacing
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.affine, other.affine)
        )


@dataclass
class BrainMask:
    mask: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.ndim != 3:
            raise ValueError(f"mask must be 3D, got shape {self.mask.shape}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.mask.shape)


def _offset(name: str) -> int:
    return HEADER_DTYPE.fields[name][1]


def _quaternion_affine(hdr) -> np.ndarray:
    b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(a) if a > 1e-7 else 0.0
    if a == 0.0:
        norm = np.sqrt(b * b + c * c + d * d)
        b, c, d = b / norm, c / norm, d / norm
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    pix = hdr["pixdim"]
    qfac = -1.0 if pix[0] < 0 else 1.0
    zooms = np.array([pix[1], pix[2], pix[3] * qfac], dtype=np.float64)
    aff = np.eye(4)
    aff[:3, :3] = rot * zooms
    aff[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return aff


def read_nifti(path, kind: str = "auto") -> Volume | LabelMap:
    """Read a single-file NIfTI-1 volume.

    ``kind="auto"`` returns a :class:`LabelMap` for files carrying the label
    intent or uint8 data without intensity scaling, and a :class:`Volume`
    otherwise. ``"volume"`` / ``"labels"`` force the result type.
    """
    if kind not in ("auto", "volume", "labels"):
        raise ValueError(f"kind must be 'auto', 'volume' or 'labels', got {kind!r}")
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_DTYPE.itemsize:
        raise NiftiError(f"truncated header: {len(raw)} of 348 bytes", len(raw))
    hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE)[0]
    if hdr["sizeof_hdr"] != 348:
        if hdr["sizeof_hdr"].byteswap() == 348:
            raise NiftiError("big-endian NIfTI files are not supported", 0)
        raise NiftiError(f"sizeof_hdr is {hdr['sizeof_hdr']}, expected 348", 0)
    if hdr["magic"] != b"n+1":
        raise NiftiError(f"bad magic {bytes(hdr['magic'])!r}, expected 'n+1\\0'", _offset("magic"))
    dim = [int(v) for v in hdr["dim"]]
    if dim[0] != 3:
        raise NiftiError(f"unsupported rank {dim[0]}", _offset("dim"))
    dims = tuple(dim[1:4])
    if any(d < 1 for d in dims):
        raise NiftiError(f"invalid dims {dims}", _offset("dim") + 2)
    code = int(hdr["datatype"])
    if code not in _DATATYPES:
        raise NiftiError(f"unsupported datatype {code}", _offset("datatype"))
    dtype = _DATATYPES[code]

    offset = int(hdr["vox_offset"])
    if offset < 348:
        raise NiftiError(f"vox_offset {hdr['vox_offset']} inside header", _offset("vox_offset"))
    nbytes = int(np.prod(dims)) * dtype.itemsize
    available = len(raw) - offset
    if available < nbytes:
        raise NiftiError(
            f"truncated payload: expected {nbytes} bytes, found {max(available, 0)}", len(raw)
        )
    if available > nbytes:
        raise NiftiError(
            f"dimension mismatch: header dims {dims} imply {nbytes} payload bytes, "
            f"file holds {available}",
            offset + nbytes,
        )
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=offset)
    data = data.reshape(dims, order="F")

    spacing = tuple(float(abs(v)) if v != 0 else 1.0 for v in hdr["pixdim"][1:4])
    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[0], affine[1], affine[2] = hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]
    elif hdr["qform_code"] > 0:
        affine = _quaternion_affine(hdr)
    else:
        affine = _default_affine(spacing)

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    scaled = slope != 0 and not (slope == 1 and inter == 0)
    is_labels = kind == "labels" or (
        kind == "auto"
        and not scaled
        and (int(hdr["intent_code"]) == _INTENT_LABEL or dtype == np.uint8)
    )
    if is_labels:
        labels = data.astype(np.int64)
        n = int(round(float(hdr["cal_max"]))) + 1 if hdr["cal_max"] > 0 else 0
        n = max(n, int(labels.max()) + 1 if labels.size else 1, 2)
        return LabelMap(labels, n, spacing, affine)
    values = data.astype(np.float64)
    if scaled:
        values = values * slope + inter
    return Volume(values, spacing, affine)


def write_nifti(v: Volume | LabelMap, path) -> None:
    """Write ``v`` as a single-file ``.nii`` (352-byte header, little-endian)."""
    hdr = np.zeros((), dtype=HEADER_DTYPE)
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    hdr["dim"][:4] = (3,) + v.dims
    hdr["dim"][4:] = 1
    if isinstance(v, LabelMap):
        if v.num_classes > 256:
            raise ValueError("label range exceeds uint8")
        payload = v.labels.astype(np.uint8)
        hdr["datatype"], hdr["bitpix"] = 2, 8
        hdr["intent_code"] = _INTENT_LABEL
        hdr["cal_min"], hdr["cal_max"] = 0.0, float(v.num_classes - 1)
    elif isinstance(v, Volume):
        payload = v.data.astype("<f4")
        hdr["datatype"], hdr["bitpix"] = 16, 32
    else:
        raise TypeError(f"expected Volume or LabelMap, got {type(v).__name__}")
    hdr["pixdim"][0] = 1.0
    hdr["pixdim"][1:4] = v.spacing
    hdr["pixdim"][4:] = 1.0
    hdr["vox_offset"] = _VOX_OFFSET
    hdr["scl_slope"], hdr["scl_inter"] = 1.0, 0.0
    hdr["xyzt_units"] = 2  # mm
    hdr["sform_code"] = 2
    hdr["srow_x"], hdr["srow_y"], hdr["srow_z"] = v.affine[0], v.affine[1], v.affine[2]
    hdr["magic"] = b"n+1"
    try:
        with open(path, "wb") as fh:
            fh.write(hdr.tobytes())
            fh.write(b"\x00" * (_VOX_OFFSET - 348))
            fh.write(np.asfortranarray(payload).tobytes(order="F"))
    except OSError as exc:
        raise OSError(f"cannot write {os.fspath(path)}: {exc.strerror}") from exc


def normalize_intensity(v: Volume, mask: BrainMask | np.ndarray | None = None) -> Volume:
    """Z-score over the mask (whole volume when absent); outside voxels become 0.

    A constant region maps to all zeros.
    """
    if mask is None:
        m = np.ones(v.dims, dtype=bool)
    else:
        m = mask.mask if isinstance(mask, BrainMask) else np.asarray(mask, dtype=bool)
        if m.shape != v.dims:
            raise ValueError(f"mask dims {m.shape} do not match volume dims {v.dims}")
        if not m.any():
            raise ValueError("empty mask: no voxels to normalize over")
    values = v.data[m]
    mean = values.mean()
    std = values.std()
    out = np.zeros(v.dims)
    # relative guard: rounding noise on a constant input must not be amplified
    if np.isfinite(std) and std > 1e-12 * max(1.0, abs(mean)):
        out[m] = (values - mean) / std
    return v.with_data(out)
