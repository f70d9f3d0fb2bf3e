"""Volumes, label masks, orientation handling, resampling and VOI extraction.

Arrays are indexed ``[x, y, z]`` and a voxel's world position is
``origin + index * spacing`` (voxel-center convention).  In the canonical
RAI frame x runs left to right, y anterior to posterior and z head to foot,
so the left, anterior and head walls of a box are its minimum walls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import EmptyOrganError, GeometryError

VOLUME_DTYPES = (np.dtype(np.int16), np.dtype(np.float32))
LABEL_DTYPE = np.dtype(np.uint8)

# anatomical axis of each orientation letter
_LETTER_AXIS = {"R": 0, "L": 0, "A": 1, "P": 1, "I": 2, "S": 2}
CANONICAL = "RAI"

GEOMETRY_TOL_MM = 1e-6


class Grid(NamedTuple):
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float]
    orientation: str

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.origin[axis] + np.arange(self.dims[axis]) * self.spacing[axis]


def _triple(values, cast=float) -> tuple:
    values = tuple(cast(v) for v in values)
    if len(values) != 3:
        raise GeometryError(f"expected three components, got {values!r}")
    return values


@dataclass(frozen=True, eq=False)
class Volume:
    """Scalar 3D grid; immutable once built."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation: str = CANONICAL

    _allowed_dtypes = VOLUME_DTYPES

    def __post_init__(self):
        arr = np.array(self.voxels, copy=True)
        if arr.ndim != 3:
            raise GeometryError(f"voxel array must be 3D, got shape {arr.shape}")
        if arr.dtype not in self._allowed_dtypes:
            allowed = ", ".join(str(d) for d in self._allowed_dtypes)
            raise GeometryError(f"{type(self).__name__} dtype {arr.dtype} not in {{{allowed}}}")
        if min(arr.shape) < 1:
            raise GeometryError(f"dims must be >= 1, got {arr.shape}")
        spacing = _triple(self.spacing)
        if min(spacing) <= 0:
            raise GeometryError(f"spacing must be positive, got {spacing}")
        arr.flags.writeable = False
        object.__setattr__(self, "voxels", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", _triple(self.origin))
        code = str(self.orientation).upper()
        parse_orientation(code)
        object.__setattr__(self, "orientation", code)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.voxels.shape)

    @property
    def geometry(self) -> Grid:
        return Grid(self.dims, self.spacing, self.origin, self.orientation)

    def axis_coords(self, axis: int) -> np.ndarray:
        return self.geometry.axis_coords(axis)

    def with_voxels(self, voxels: np.ndarray, **changes) -> "Volume":
        kwargs = dict(spacing=self.spacing, origin=self.origin, orientation=self.orientation)
        kwargs.update(changes)
        return type(self)(voxels, **kwargs)


class LabelMask(Volume):
    """Organ label map (uint8, 0 = background)."""

    _allowed_dtypes = (LABEL_DTYPE,)


@dataclass(frozen=True)
class BoundingBoxMM:
    """Organ VOI as six wall coordinates in mm (voxel-center extremes)."""

    left: float
    right: float
    anterior: float
    posterior: float
    head: float
    foot: float

    def __post_init__(self):
        for name in ("left", "right", "anterior", "posterior", "head", "foot"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for lo, hi, name in (
            (self.left, self.right, "left/right"),
            (self.anterior, self.posterior, "anterior/posterior"),
            (self.head, self.foot, "head/foot"),
        ):
            if not lo <= hi:
                raise GeometryError(f"box walls out of order on {name}: {lo} > {hi}")

    @classmethod
    def from_array(cls, walls) -> "BoundingBoxMM":
        return cls(*(float(w) for w in walls))

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.left, self.right, self.anterior, self.posterior, self.head, self.foot]
        )

    def axis_walls(self, axis: int) -> tuple[float, float]:
        walls = self.as_array()
        return float(walls[2 * axis]), float(walls[2 * axis + 1])

    def extent(self) -> np.ndarray:
        walls = self.as_array()
        return walls[1::2] - walls[0::2]


@dataclass(frozen=True, eq=False)
class VoiPatch:
    intensities: np.ndarray
    labels: np.ndarray | None = None
    source_box: BoundingBoxMM | None = None
    source_case: str = ""
    source_geometry: Grid | None = field(default=None, compare=False)
    probabilities: np.ndarray | None = None

    def __post_init__(self):
        if self.labels is not None and self.labels.shape != self.intensities.shape:
            raise GeometryError(
                f"patch labels {self.labels.shape} != intensities {self.intensities.shape}"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return self.intensities.shape


# ---------------------------------------------------------------------------
# orientation


def parse_orientation(code: str) -> tuple[int, ...]:
    """Return the anatomical axis for each array axis, validating ``code``."""
    code = str(code).upper()
    if len(code) != 3 or any(c not in _LETTER_AXIS for c in code):
        raise GeometryError(f"unknown orientation code {code!r}")
    axes = tuple(_LETTER_AXIS[c] for c in code)
    if sorted(axes) != [0, 1, 2]:
        raise GeometryError(f"unknown orientation code {code!r}")
    return axes


def orientation_codes() -> list[str]:
    """All 48 signed axis-permutation codes."""
    import itertools

    pairs = ("RL", "AP", "IS")
    codes = []
    for perm in itertools.permutations(range(3)):
        for signs in itertools.product((0, 1), repeat=3):
            codes.append("".join(pairs[perm[i]][signs[i]] for i in range(3)))
    return codes


def reorient(volume: Volume, target: str) -> Volume:
    """Permute/flip voxels so the array axes follow ``target``; origin is zeroed."""
    src_axes = parse_orientation(volume.orientation)
    tgt_axes = parse_orientation(target)
    src, tgt = volume.orientation.upper(), target.upper()
    perm = [src_axes.index(a) for a in tgt_axes]
    arr = np.transpose(volume.voxels, perm)
    flips = [i for i, s in enumerate(perm) if src[s] != tgt[i]]
    if flips:
        arr = np.flip(arr, axis=flips)
    spacing = tuple(volume.spacing[s] for s in perm)
    return volume.with_voxels(
        np.ascontiguousarray(arr), spacing=spacing, origin=(0.0, 0.0, 0.0), orientation=tgt
    )


def reorient_to_rai(volume: Volume) -> Volume:
    return reorient(volume, CANONICAL)


# ---------------------------------------------------------------------------
# sampling


def _sample_axis(arr: np.ndarray, axis: int, pos: np.ndarray, mode: str) -> np.ndarray:
    """Sample ``arr`` along ``axis`` at continuous indices ``pos`` (edge-clamped)."""
    n = arr.shape[axis]
    pos = np.clip(pos, 0.0, n - 1)
    if mode == "nearest":
        idx = np.clip(np.floor(pos + 0.5).astype(np.intp), 0, n - 1)
        return np.take(arr, idx, axis=axis)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    w = pos - i0
    shape = [1] * arr.ndim
    shape[axis] = len(pos)
    w = w.reshape(shape)
    a = np.take(arr, i0, axis=axis).astype(np.float64, copy=False)
    b = np.take(arr, i1, axis=axis).astype(np.float64, copy=False)
    return a + w * (b - a)


def sample_lattice(arr: np.ndarray, positions: list[np.ndarray], mode: str) -> np.ndarray:
    """Separable trilinear / nearest sampling on a tensor-product lattice.

    ``positions[a]`` holds continuous voxel indices along axis ``a``.
    """
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    out = arr
    for axis, pos in enumerate(positions):
        out = _sample_axis(out, axis, np.asarray(pos, dtype=np.float64), mode)
    return out


def resample_isotropic(volume: Volume, target: float = 2.0, mode: str | None = None) -> Volume:
    if not target > 0:
        raise GeometryError(f"target spacing must be positive, got {target}")
    is_label = isinstance(volume, LabelMask)
    if mode is None:
        mode = "nearest" if is_label else "trilinear"
    if is_label and mode != "nearest":
        raise GeometryError("label masks must be resampled with mode='nearest'")
    dims = [
        max(1, math.ceil(n * s / target - 1e-9)) for n, s in zip(volume.dims, volume.spacing)
    ]
    positions = [np.arange(d) * target / s for d, s in zip(dims, volume.spacing)]
    out = sample_lattice(volume.voxels, positions, mode)
    if mode == "trilinear":
        out = out.astype(np.float32)
    return volume.with_voxels(out, spacing=(target, target, target))


# ---------------------------------------------------------------------------
# bounding boxes and VOI patches


def extract_gt_bbox(labels: LabelMask, organ_label: int, case_id: str = "") -> BoundingBoxMM:
    if organ_label <= 0:
        raise ValueError(f"organ label must be positive, got {organ_label}")
    hit = labels.voxels == organ_label
    walls = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(hit.any(axis=other))
        if idx.size == 0:
            raise EmptyOrganError(case_id, organ_label)
        o, s = labels.origin[axis], labels.spacing[axis]
        walls += [o + idx[0] * s, o + idx[-1] * s]
    return BoundingBoxMM(*walls)


def _lattice_positions(volume: Volume, box: BoundingBoxMM, shape: int) -> list[np.ndarray]:
    t = np.arange(shape) / (shape - 1)
    positions = []
    for axis in range(3):
        lo, hi = box.axis_walls(axis)
        if not hi - lo > 0:
            raise GeometryError(f"degenerate box: zero extent on axis {axis} ({lo}..{hi})")
        world = lo + t * (hi - lo)
        positions.append((world - volume.origin[axis]) / volume.spacing[axis])
    return positions


def crop_resample_voi(
    volume: Volume,
    box: BoundingBoxMM,
    shape: int = 96,
    mode: str = "trilinear",
    labels: LabelMask | None = None,
    organ_label: int | None = None,
    case_id: str = "",
) -> VoiPatch:
    """Sample the box content on a ``shape``^3 lattice spanning wall to wall."""
    if shape < 8:
        raise GeometryError(f"VOI shape must be >= 8, got {shape}")
    positions = _lattice_positions(volume, box, shape)
    intens = sample_lattice(volume.voxels, positions, mode).astype(np.float32)
    patch_labels = None
    if labels is not None:
        if organ_label is None:
            raise ValueError("organ_label is required when labels are given")
        raw = sample_lattice(labels.voxels, positions, "nearest")
        patch_labels = (raw == organ_label).astype(np.uint8)
    return VoiPatch(intens, patch_labels, box, case_id, volume.geometry)


def reconstruct_mask(
    patch_mask: VoiPatch | np.ndarray,
    box: BoundingBoxMM,
    target_geometry: Grid,
    case_id: str | None = None,
    label_value: int = 1,
) -> LabelMask:
    """Nearest-neighbour back-projection of a binary patch into ``target_geometry``."""
    if isinstance(patch_mask, VoiPatch):
        if case_id is not None and patch_mask.source_case and patch_mask.source_case != case_id:
            raise GeometryError(
                f"patch belongs to case {patch_mask.source_case!r}, not {case_id!r}"
            )
        if patch_mask.source_box is not None and patch_mask.source_box != box:
            raise GeometryError("patch was cropped from a different box")
        mask = patch_mask.labels
        if mask is None:
            raise ValueError("patch carries no mask")
    else:
        mask = np.asarray(patch_mask)
    if mask.ndim != 3 or len(set(mask.shape)) != 1:
        raise GeometryError(f"patch mask must be a cube, got {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("patch mask must be binary")
    s = mask.shape[0]
    grid = Grid(*target_geometry)
    out = np.zeros(grid.dims, dtype=np.uint8)
    index = []
    for axis in range(3):
        lo, hi = box.axis_walls(axis)
        world = grid.axis_coords(axis)
        inside = np.flatnonzero(
            (world >= lo - GEOMETRY_TOL_MM) & (world <= hi + GEOMETRY_TOL_MM)
        )
        if inside.size == 0:
            raise GeometryError(f"box lies outside the target geometry on axis {axis}")
        t = (world[inside] - lo) / (hi - lo) * (s - 1) if hi > lo else np.zeros(inside.size)
        src = np.clip(np.floor(t + 0.5).astype(np.intp), 0, s - 1)
        index.append((inside, src))
    block = mask[np.ix_(index[0][1], index[1][1], index[2][1])]
    out[np.ix_(index[0][0], index[1][0], index[2][0])] = block.astype(np.uint8) * label_value
    return LabelMask(out, grid.spacing, grid.origin, grid.orientation)
