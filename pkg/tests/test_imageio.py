import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from voxelbench.errors import FormatError, GeometryError, ManifestError
from voxelbench.imageio import (
    CaseEntry,
    DatasetManifest,
    format_header,
    load_manifest,
    parse_header,
    read_volume,
    validate_case,
    write_manifest,
    write_volume,
)
from voxelbench.volgrid import LabelMask, Volume, orientation_codes

shapes = st.tuples(*(st.integers(1, 6),) * 3)
geometry = st.tuples(
    st.tuples(*(st.floats(0.01, 10),) * 3),
    st.tuples(*(st.floats(-500, 500),) * 3),
    st.sampled_from(orientation_codes()),
)


def volumes():
    int16 = hnp.arrays(np.int16, shapes, elements=st.integers(-32768, 32767))
    uint8 = hnp.arrays(np.uint8, shapes)
    f32 = hnp.arrays(np.float32, shapes, elements=st.floats(width=32, allow_nan=False))
    return st.one_of(int16, uint8, f32)


def build(arr, geom):
    cls = LabelMask if arr.dtype == np.uint8 else Volume
    return cls(arr, *geom)


@given(volumes(), geometry)
@settings(max_examples=80, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
def test_round_trip_bit_exact(tmp_path, arr, geom):
    v = build(arr, geom)
    path = tmp_path / "v.raster"
    write_volume(v, path)
    back = read_volume(path)
    assert type(back) is type(v)
    assert back.voxels.dtype == arr.dtype
    assert back.voxels.tobytes() == arr.tobytes()
    assert back.geometry == v.geometry


def test_negative_int16_payload_bytes(tmp_path):
    v = Volume(np.array([1, -1], np.int16).reshape(2, 1, 1))
    path = tmp_path / "v.raster"
    write_volume(v, path)
    raw = path.read_bytes()
    assert raw.endswith(b"\x01\x00\xff\xff")
    assert len(raw) == len(format_header(v)) + 4


def test_payload_is_x_fastest(tmp_path):
    arr = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
    path = tmp_path / "m.raster"
    write_volume(LabelMask(arr), path)
    assert path.read_bytes()[-8:] == bytes(arr.ravel(order="F"))


def test_write_is_deterministic_and_a_fixpoint(tmp_path):
    v = Volume(np.random.default_rng(0).normal(size=(3, 4, 5)).astype(np.float32), (1, 2, 3), (4, 5, 6), "LPS")
    write_volume(v, tmp_path / "a")
    write_volume(v, tmp_path / "b")
    write_volume(read_volume(tmp_path / "a"), tmp_path / "c")
    a = (tmp_path / "a").read_bytes()
    assert a == (tmp_path / "b").read_bytes() == (tmp_path / "c").read_bytes()


HEADER = b"FORMAT voxelbench-raster-1\nsizes: 2 1 1\nspacings: 1 1 1\norigin: 0 0 0\ntype: int16\norientation: RAI\n\n"


@pytest.mark.parametrize(
    "raw, msg",
    [
        (HEADER.replace(b"FORMAT voxelbench-raster-1", b"NRRD0004"), "line 1"),
        (HEADER.replace(b"int16", b"int32"), "unsupported type"),
        (HEADER.replace(b"sizes: 2 1 1", b"sizes: 2 1"), "sizes needs 3"),
        (HEADER.replace(b"sizes: 2 1 1", b"sizes: 2 0 1"), "sizes must be"),
        (HEADER.replace(b"spacings: 1 1 1", b"spacings: 1 -1 1"), "spacings must be"),
        (HEADER.replace(b"origin: 0 0 0", b"origin: 0 x 0"), "bad origin"),
        (HEADER.replace(b"orientation: RAI\n", b""), "missing"),
        (HEADER.replace(b"type: int16\n", b"type: int16\ntype: int16\n"), "duplicate"),
        (HEADER.replace(b"type: int16\n", b"endian: big\n"), "malformed"),
        (HEADER[:-1], "not terminated"),
    ],
)
def test_header_errors(tmp_path, raw, msg):
    path = tmp_path / "bad.raster"
    path.write_bytes(raw + b"\0" * 4)
    with pytest.raises(FormatError, match=msg):
        read_volume(path)


def test_payload_length_must_match(tmp_path):
    for payload in (b"\0" * 3, b"\0" * 5):
        path = tmp_path / "p.raster"
        path.write_bytes(HEADER + payload)
        with pytest.raises(FormatError, match="payload size"):
            read_volume(path)
    header, offset = parse_header(HEADER)
    assert header.sizes == (2, 1, 1) and offset == len(HEADER)


def test_bad_orientation_in_header_is_format_error(tmp_path):
    path = tmp_path / "o.raster"
    path.write_bytes(HEADER.replace(b"RAI", b"RAX") + b"\0" * 4)
    with pytest.raises(FormatError):
        read_volume(path)


# ---------------------------------------------------------------------------
# manifests


def make_files(tmp_path, names):
    for n in names:
        write_volume(Volume(np.zeros((2, 2, 2), np.int16)), tmp_path / f"{n}_img.raster")
        write_volume(LabelMask(np.zeros((2, 2, 2), np.uint8)), tmp_path / f"{n}_lbl.raster")


def test_manifest_round_trip_preserves_order(tmp_path):
    names = ["c3", "c1", "c2"]
    make_files(tmp_path, names)
    entries = [
        CaseEntry(n, tmp_path / f"{n}_img.raster", tmp_path / f"{n}_lbl.raster", {"liver": 1, "spleen": 4})
        for n in names
    ]
    write_manifest(DatasetManifest(entries, tmp_path), tmp_path / "manifest.txt")
    m = load_manifest(tmp_path / "manifest.txt")
    assert m.case_ids == names
    assert m.case("c1").organ_label_map == {"liver": 1, "spleen": 4}
    assert m.case("c2").intensity_path == (tmp_path / "c2_img.raster").resolve()
    with pytest.raises(ManifestError):
        m.case("zz")


def test_empty_manifest_is_valid(tmp_path):
    (tmp_path / "m.txt").write_text("voxelbench-manifest-1\n")
    assert load_manifest(tmp_path / "m.txt").cases == []


@pytest.mark.parametrize(
    "body, msg",
    [
        ("case c01 c01_img.raster c01_lbl.raster liver=1\ncase c01 c01_img.raster c01_lbl.raster", "duplicate case_id 'c01'"),
        ("case c01 c01_img.raster nothere.raster", "missing file nothere.raster"),
        ("case c01 c01_img.raster c01_lbl.raster heart=2", "unknown organ 'heart'"),
        ("case c01 c01_img.raster c01_lbl.raster liver", "bad organ mapping"),
        ("case c01 c01_img.raster c01_lbl.raster liver=x", "bad label"),
        ("scan c01 a b", "malformed"),
    ],
)
def test_manifest_errors_name_the_entry(tmp_path, body, msg):
    make_files(tmp_path, ["c01"])
    (tmp_path / "m.txt").write_text("voxelbench-manifest-1\n" + body + "\n")
    with pytest.raises(ManifestError, match=msg):
        load_manifest(tmp_path / "m.txt")


def test_manifest_magic_required(tmp_path):
    (tmp_path / "m.txt").write_text("case a b c\n")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "m.txt")


# ---------------------------------------------------------------------------
# validate_case


def test_validate_case_tolerance_and_fields():
    v = Volume(np.zeros((4, 4, 4), np.int16), (1, 1, 1), (0, 0, 0))
    validate_case(v, LabelMask(np.zeros((4, 4, 4), np.uint8)), "c")
    validate_case(v, LabelMask(np.zeros((4, 4, 4), np.uint8), (1 + 1e-9, 1, 1)))
    with pytest.raises(GeometryError, match="dims mismatch"):
        validate_case(v, LabelMask(np.zeros((4, 4, 5), np.uint8)))
    with pytest.raises(GeometryError, match="spacing mismatch.*origin mismatch.*orientation mismatch"):
        validate_case(v, LabelMask(np.zeros((4, 4, 4), np.uint8), (1, 2, 1), (0, 0, 1e-3), "LPS"))
