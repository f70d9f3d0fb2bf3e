"""Raster files (a strict NRRD-like subset) and dataset manifests.

Raster layout::

    FORMAT voxelbench-raster-1
    sizes: <nx> <ny> <nz>
    spacings: <sx> <sy> <sz>
    origin: <ox> <oy> <oz>
    type: int16|uint8|float32
    orientation: <3-letter code>
    <empty line>
    <raw little-endian payload, x fastest>

Manifest layout::

    voxelbench-manifest-1
    case <id> <intensity_path> <label_path> <organ>=<int> [...]
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ORGANS
from .errors import FormatError, GeometryError, ManifestError
from .volgrid import GEOMETRY_TOL_MM, LabelMask, Volume, parse_orientation

MAGIC = "FORMAT voxelbench-raster-1"
MANIFEST_MAGIC = "voxelbench-manifest-1"

_TYPES = {"int16": np.dtype("<i2"), "uint8": np.dtype("u1"), "float32": np.dtype("<f4")}
_FIELDS = ("sizes", "spacings", "origin", "type", "orientation")


@dataclass(frozen=True)
class GridHeader:
    sizes: tuple[int, int, int]
    spacings: tuple[float, float, float]
    origin: tuple[float, float, float]
    element_type: str
    orientation_code: str
    dimension: int = 3
    endianness: str = "little"
    encoding: str = "raw"

    @property
    def payload_bytes(self) -> int:
        nx, ny, nz = self.sizes
        return nx * ny * nz * _TYPES[self.element_type].itemsize


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def format_header(volume: Volume) -> bytes:
    type_name = volume.voxels.dtype.name
    if type_name not in _TYPES:
        raise FormatError(f"unsupported element type {type_name!r}")
    lines = [
        MAGIC,
        "sizes: " + " ".join(str(n) for n in volume.dims),
        "spacings: " + _fmt(volume.spacing),
        "origin: " + _fmt(volume.origin),
        f"type: {type_name}",
        f"orientation: {volume.orientation}",
        "",
    ]
    return ("\n".join(lines) + "\n").encode("ascii")


def write_volume(volume: Volume, path) -> None:
    header = format_header(volume)
    payload = np.asarray(volume.voxels, dtype=_TYPES[volume.voxels.dtype.name])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes(order="F"))


def _parse_numbers(text: str, cast, lineno: int, name: str) -> tuple:
    parts = text.split()
    if len(parts) != 3:
        raise FormatError(f"line {lineno}: {name} needs 3 values, got {text!r}")
    try:
        return tuple(cast(p) for p in parts)
    except ValueError:
        raise FormatError(f"line {lineno}: bad {name} value {text!r}") from None


def parse_header(raw: bytes) -> tuple[GridHeader, int]:
    """Parse the text header; return it with the payload offset."""
    pos = 0
    values = {}
    lineno = 0
    while True:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"line {lineno + 1}: header not terminated by an empty line")
        lineno += 1
        try:
            line = raw[pos:end].decode("ascii")
        except UnicodeDecodeError:
            raise FormatError(f"line {lineno}: non-ASCII header bytes") from None
        pos = end + 1
        if lineno == 1:
            if line != MAGIC:
                raise FormatError(f"line 1: expected {MAGIC!r}, got {line!r}")
            continue
        if line == "":
            break
        key, sep, rest = line.partition(":")
        key = key.strip()
        if not sep or key not in _FIELDS:
            raise FormatError(f"line {lineno}: malformed header line {line!r}")
        if key in values:
            raise FormatError(f"line {lineno}: duplicate field {key!r}")
        rest = rest.strip()
        if key == "sizes":
            sizes = _parse_numbers(rest, int, lineno, key)
            if min(sizes) < 1:
                raise FormatError(f"line {lineno}: sizes must be >= 1, got {sizes}")
            values[key] = sizes
        elif key in ("spacings", "origin"):
            vals = _parse_numbers(rest, float, lineno, key)
            if key == "spacings" and min(vals) <= 0:
                raise FormatError(f"line {lineno}: spacings must be positive, got {vals}")
            values[key] = vals
        elif key == "type":
            if rest not in _TYPES:
                raise FormatError(f"line {lineno}: unsupported type {rest!r}")
            values[key] = rest
        else:
            try:
                parse_orientation(rest)
            except GeometryError:
                raise FormatError(f"line {lineno}: unknown orientation {rest!r}") from None
            values[key] = rest.upper()
    missing = [k for k in _FIELDS if k not in values]
    if missing:
        raise FormatError(f"header missing field(s): {', '.join(missing)}")
    header = GridHeader(
        sizes=values["sizes"],
        spacings=values["spacings"],
        origin=values["origin"],
        element_type=values["type"],
        orientation_code=values["orientation"],
    )
    return header, pos


def read_volume(path) -> Volume | LabelMask:
    raw = Path(path).read_bytes()
    header, offset = parse_header(raw)
    actual = len(raw) - offset
    if actual != header.payload_bytes:
        raise FormatError(
            f"{path}: payload size mismatch, expected {header.payload_bytes} bytes, got {actual}"
        )
    dtype = _TYPES[header.element_type]
    arr = np.frombuffer(raw, dtype=dtype, offset=offset).reshape(header.sizes, order="F")
    arr = arr.astype(dtype.newbyteorder("="))
    cls = LabelMask if header.element_type == "uint8" else Volume
    try:
        return cls(arr, header.spacings, header.origin, header.orientation_code)
    except GeometryError as exc:
        raise FormatError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class CaseEntry:
    case_id: str
    intensity_path: Path
    label_path: Path
    organ_label_map: dict[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetManifest:
    cases: list[CaseEntry]
    root_dir: Path

    def case(self, case_id: str) -> CaseEntry:
        for c in self.cases:
            if c.case_id == case_id:
                return c
        raise ManifestError(f"no case {case_id!r} in manifest")

    @property
    def case_ids(self) -> list[str]:
        return [c.case_id for c in self.cases]


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    root = path.resolve().parent
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != MANIFEST_MAGIC:
        raise ManifestError(f"{path}: first line must be {MANIFEST_MAGIC!r}")
    cases, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] != "case" or len(parts) < 4:
            raise ManifestError(f"{path}:{lineno}: malformed entry {line!r}")
        case_id, ipath, lpath = parts[1:4]
        if case_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate case_id {case_id!r}")
        seen.add(case_id)
        organs = {}
        for item in parts[4:]:
            name, sep, value = item.partition("=")
            if not sep:
                raise ManifestError(f"{path}:{lineno}: bad organ mapping {item!r}")
            if name not in ORGANS:
                raise ManifestError(f"{path}:{lineno}: unknown organ {name!r} in case {case_id!r}")
            try:
                organs[name] = int(value)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: bad label {item!r}") from None
        resolved = []
        for p in (ipath, lpath):
            full = (root / p).resolve()
            if not full.is_file():
                raise ManifestError(f"{path}:{lineno}: case {case_id!r} missing file {p}")
            resolved.append(full)
        cases.append(CaseEntry(case_id, resolved[0], resolved[1], organs))
    return DatasetManifest(cases, root)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    base = path.resolve().parent
    lines = [MANIFEST_MAGIC]
    for c in manifest.cases:
        organs = " ".join(f"{k}={v}" for k, v in c.organ_label_map.items())
        paths = [os.path.relpath(Path(p).resolve(), base) for p in (c.intensity_path, c.label_path)]
        lines.append(f"case {c.case_id} {paths[0]} {paths[1]} {organs}".rstrip())
    path.write_text("\n".join(lines) + "\n")


def validate_case(intensity: Volume, labels: Volume, case_id: str = "") -> None:
    problems = []
    if intensity.dims != labels.dims:
        problems.append(f"dims mismatch {intensity.dims} vs {labels.dims}")
    for name in ("spacing", "origin"):
        a, b = np.array(getattr(intensity, name)), np.array(getattr(labels, name))
        if np.any(np.abs(a - b) > GEOMETRY_TOL_MM):
            problems.append(f"{name} mismatch {tuple(a.tolist())} vs {tuple(b.tolist())}")
    if intensity.orientation != labels.orientation:
        problems.append(f"orientation mismatch {intensity.orientation} vs {labels.orientation}")
    if problems:
        prefix = f"case {case_id!r}: " if case_id else ""
        raise GeometryError(prefix + "; ".join(problems))
