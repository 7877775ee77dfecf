import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from voxseg.io import (
    HEADER_DTYPE,
    BrainMask,
    LabelMap,
    NiftiError,
    Volume,
    normalize_intensity,
    read_nifti,
    write_nifti,
)
from voxseg.phantom import PhantomSpec, generate


def assemble(dims, datatype, bitpix, payload, *, magic=b"n+1\x00", rank=3, pixdim=(1, 1, 1),
             vox_offset=352, intent=0, cal_max=0.0, slope=0.0, inter=0.0, sform=None):
    """Build a NIfTI-1 header field by field at the standard byte offsets."""
    h = bytearray(348)
    struct.pack_into("<i", h, 0, 348)
    struct.pack_into("<8h", h, 40, rank, *dims, 1, 1, 1, 1)
    struct.pack_into("<h", h, 68, intent)
    struct.pack_into("<hh", h, 70, datatype, bitpix)
    struct.pack_into("<8f", h, 76, 1.0, *pixdim, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", h, 108, float(vox_offset))
    struct.pack_into("<ff", h, 112, slope, inter)
    struct.pack_into("<ff", h, 124, cal_max, 0.0)
    if sform is not None:
        struct.pack_into("<h", h, 254, 2)
        struct.pack_into("<12f", h, 280, *np.asarray(sform, dtype=np.float64)[:3].ravel())
    h[344:348] = magic
    return bytes(h) + b"\x00" * (vox_offset - 348) + payload


def test_header_dtype_layout():
    assert HEADER_DTYPE.itemsize == 348
    offsets = {name: HEADER_DTYPE.fields[name][1] for name in HEADER_DTYPE.names}
    assert offsets["dim"] == 40
    assert offsets["datatype"] == 70
    assert offsets["pixdim"] == 76
    assert offsets["vox_offset"] == 108
    assert offsets["scl_slope"] == 112
    assert offsets["cal_max"] == 124
    assert offsets["sform_code"] == 254
    assert offsets["srow_x"] == 280
    assert offsets["magic"] == 344


def test_int16_fixture(tmp_path):
    values = np.arange(-13, 14, dtype="<i2")
    path = tmp_path / "int16.nii"
    path.write_bytes(assemble((3, 3, 3), 4, 16, values.tobytes()))
    assert path.stat().st_size == 352 + 54
    v = read_nifti(path)
    assert isinstance(v, Volume)
    # payload is x-fastest (Fortran) order
    np.testing.assert_array_equal(v.data.ravel(order="F"), values.astype(np.float64))
    assert v.data[1, 0, 0] == -12
    assert v.data[0, 1, 0] == -10
    assert v.data[0, 0, 1] == -4


def test_uint8_and_scaling(tmp_path):
    payload = bytes(range(8))
    (tmp_path / "u8.nii").write_bytes(assemble((2, 2, 2), 2, 8, payload))
    lab = read_nifti(tmp_path / "u8.nii")
    assert isinstance(lab, LabelMap) and lab.labels.max() == 7
    (tmp_path / "scaled.nii").write_bytes(assemble((2, 2, 2), 2, 8, payload, slope=0.5, inter=1.0))
    vol = read_nifti(tmp_path / "scaled.nii")
    assert isinstance(vol, Volume)
    np.testing.assert_allclose(vol.data.ravel(order="F"), np.arange(8) * 0.5 + 1.0)


def test_sform_and_pixdim(tmp_path):
    sform = np.array([[0, 2.0, 0, -10], [1.5, 0, 0, 5], [0, 0, 3.0, 0], [0, 0, 0, 1]])
    data = np.zeros(8, dtype="<f4").tobytes()
    (tmp_path / "s.nii").write_bytes(assemble((2, 2, 2), 16, 32, data, pixdim=(1.5, 2.0, 3.0), sform=sform))
    v = read_nifti(tmp_path / "s.nii")
    np.testing.assert_allclose(v.affine, sform)
    assert v.spacing == (1.5, 2.0, 3.0)


@pytest.mark.parametrize(
    "mutate, message, offset",
    [
        (lambda b: b[:200], "truncated header", 200),
        (lambda b: b"\x00\x00\x01\x5c" + b[4:], "big-endian", 0),
        (lambda b: struct.pack("<i", 540) + b[4:], "sizeof_hdr", 0),
        (lambda b: b[:344] + b"ni1\x00" + b[348:], "bad magic", 344),
        (lambda b: b[:40] + struct.pack("<h", 4) + b[42:], "unsupported rank 4", 40),
        (lambda b: b[:70] + struct.pack("<h", 64) + b[72:], "unsupported datatype 64", 70),
        (lambda b: b[:-3], "truncated payload", None),
        (lambda b: b + b"\x00\x00", "dimension mismatch", 406),
    ],
)
def test_malformed_files(tmp_path, mutate, message, offset):
    good = assemble((3, 3, 3), 4, 16, np.zeros(27, dtype="<i2").tobytes())
    path = tmp_path / "bad.nii"
    path.write_bytes(mutate(good))
    with pytest.raises(NiftiError, match=message) as info:
        read_nifti(path)
    if offset is not None:
        assert info.value.offset == offset
        assert f"byte offset {offset}" in str(info.value)


def test_labelmap_file_size(tmp_path):
    write_nifti(LabelMap(np.zeros((2, 2, 2), dtype=int)), tmp_path / "z.nii")
    assert (tmp_path / "z.nii").stat().st_size == 352 + 8


def test_writer_header_matches_struct_decoding(tmp_path):
    lab = LabelMap(np.ones((3, 4, 5), dtype=int), 9, (0.5, 1.0, 2.0))
    write_nifti(lab, tmp_path / "l.nii")
    raw = (tmp_path / "l.nii").read_bytes()
    assert struct.unpack_from("<i", raw, 0)[0] == 348
    assert struct.unpack_from("<8h", raw, 40)[:4] == (3, 3, 4, 5)
    assert struct.unpack_from("<hh", raw, 70) == (2, 8)
    assert struct.unpack_from("<3f", raw, 80) == (0.5, 1.0, 2.0)
    assert struct.unpack_from("<f", raw, 108)[0] == 352.0
    assert struct.unpack_from("<f", raw, 124)[0] == 8.0
    assert raw[344:348] == b"n+1\x00"
    assert raw[348:352] == b"\x00" * 4


def test_too_many_classes_for_uint8(tmp_path):
    with pytest.raises(ValueError, match="exceeds uint8"):
        write_nifti(LabelMap(np.zeros((2, 2, 2), dtype=int), 300), tmp_path / "x.nii")


def test_phantom_fixtures_round_trip_bit_exact(tmp_path):
    for i, (vol, lab) in enumerate(generate(PhantomSpec(dims=(24, 20, 22), num_subjects=2, seed=5))):
        write_nifti(vol, tmp_path / f"v{i}.nii")
        write_nifti(lab, tmp_path / f"l{i}.nii")
        assert read_nifti(tmp_path / f"v{i}.nii") == vol
        assert read_nifti(tmp_path / f"l{i}.nii") == lab
        write_nifti(read_nifti(tmp_path / f"v{i}.nii"), tmp_path / "again.nii")
        assert (tmp_path / "again.nii").read_bytes() == (tmp_path / f"v{i}.nii").read_bytes()


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.tuples(*[st.integers(1, 5)] * 3),
              elements=st.floats(-1e6, 1e6, width=32)),
       st.tuples(*[st.floats(0.1, 4.0)] * 3))
def test_volume_round_trip_property(tmp_path_factory, data, spacing):
    path = tmp_path_factory.mktemp("rt") / "v.nii"
    spacing = tuple(float(np.float32(s)) for s in spacing)
    v = Volume(data.astype(np.float64), spacing)
    write_nifti(v, path)
    assert read_nifti(path) == v


def test_read_kind_override(tmp_path):
    write_nifti(LabelMap(np.eye(3, dtype=int)[None].repeat(2, 0), 2), tmp_path / "m.nii")
    assert isinstance(read_nifti(tmp_path / "m.nii", kind="volume"), Volume)
    with pytest.raises(ValueError):
        read_nifti(tmp_path / "m.nii", kind="image")


def test_normalize_intensity(rng):
    data = rng.normal(50, 10, size=(6, 6, 6))
    mask = np.zeros((6, 6, 6), dtype=bool)
    mask[1:5, 1:5, 1:5] = True
    out = normalize_intensity(Volume(data), BrainMask(mask)).data
    assert out[mask].mean() == pytest.approx(0, abs=1e-12)
    assert out[mask].std() == pytest.approx(1, abs=1e-12)
    assert np.all(out[~mask] == 0)
    assert np.all(normalize_intensity(Volume(np.full((3, 3, 3), 7.3))).data == 0)
    with pytest.raises(ValueError, match="empty mask"):
        normalize_intensity(Volume(data), np.zeros((6, 6, 6), dtype=bool))


def test_labelmap_validation():
    with pytest.raises(ValueError):
        LabelMap(np.full((2, 2, 2), 9), 9)
    with pytest.raises(ValueError):
        LabelMap(np.full((2, 2, 2), 0.5), 9)
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2)))
