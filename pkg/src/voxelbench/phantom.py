"""Synthetic CT-like abdominal phantoms with analytically known labels.

Each case is a body cylinder with a bright posterior "spine" landmark and five
ellipsoidal organ analogues.  The whole anatomy shifts per case and each organ
adds a small displacement of its own, so box positions move mostly together
with their intensity context.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ORGANS
from .errors import DataError
from .imageio import CaseEntry, DatasetManifest, write_manifest, write_volume
from .kvfile import read_kv, split_list
from .volgrid import BoundingBoxMM, LabelMask, Volume, extract_gt_bbox

AIR_HU = -1000.0


@dataclass(frozen=True)
class OrganSpec:
    name: str
    label: int
    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    intensity: float
    intensity_std: float = 6.0
    scale_range: tuple[float, float] = (0.9, 1.1)
    # per-organ displacement on top of the shared anatomy shift
    center_jitter: float = 2.0


DEFAULT_ORGANS = (
    OrganSpec("liver", 1, (84.0, 56.0, 46.0), (20.0, 22.0, 20.0), 60.0),
    OrganSpec("kidney_left", 2, (38.0, 86.0, 80.0), (11.0, 11.0, 15.0), 160.0),
    OrganSpec("kidney_right", 3, (88.0, 86.0, 82.0), (11.0, 11.0, 15.0), 160.0),
    OrganSpec("spleen", 4, (36.0, 68.0, 40.0), (12.0, 13.0, 15.0), 50.0),
    OrganSpec("pancreas", 5, (60.0, 62.0, 72.0), (22.0, 8.0, 9.0), 90.0),
)


@dataclass(frozen=True)
class PhantomSpec:
    volume_dims: tuple[int, int, int] = (64, 64, 64)
    spacing: float = 2.0
    organs: tuple[OrganSpec, ...] = DEFAULT_ORGANS
    background: float = -80.0
    noise_std: float = 15.0
    difficulty: str = "easy"
    global_jitter: float = 8.0
    body_center: tuple[float, float] = (63.0, 63.0)
    body_semi_axes: tuple[float, float] = (60.0, 56.0)
    spine_center: tuple[float, float] = (63.0, 112.0)
    spine_radius: float = 6.0
    spine_intensity: float = 400.0
    # hard-mode knobs; ignored for difficulty == "easy"
    hard_contrast: float = 0.35
    hard_noise_std: float = 30.0
    hard_rotation_deg: float = 15.0
    hard_distractors: int = 3

    @property
    def extent_mm(self) -> np.ndarray:
        return (np.array(self.volume_dims) - 1) * self.spacing

    def validate(self) -> None:
        if self.difficulty not in ("easy", "hard"):
            raise DataError(f"difficulty must be easy or hard, got {self.difficulty!r}")
        if self.spacing <= 0 or min(self.volume_dims) < 1:
            raise DataError("phantom dims and spacing must be positive")
        rot = self.difficulty == "hard" and self.hard_rotation_deg > 0
        hi = self.extent_mm
        for organ in self.organs:
            if min(organ.semi_axes) <= 0:
                raise DataError(f"organ {organ.name}: semi-axes must be positive")
            semi = np.array(organ.semi_axes) * organ.scale_range[1]
            if rot:
                semi = np.full(3, semi.max())
            reach = semi + organ.center_jitter + self.global_jitter
            c = np.array(organ.center)
            if np.any(c - reach < 0) or np.any(c + reach > hi):
                raise DataError(f"organ {organ.name} cannot fit inside the volume for all jitters")


@dataclass(frozen=True)
class Ellipsoid:
    center: np.ndarray
    semi_axes: np.ndarray
    angle: float = 0.0  # rotation about z, radians

    def contains(self, x, y, z) -> np.ndarray:
        dx, dy, dz = x - self.center[0], y - self.center[1], z - self.center[2]
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = c * dx + s * dy
        v = -s * dx + c * dy
        a = self.semi_axes
        return (u / a[0]) ** 2 + (v / a[1]) ** 2 + (dz / a[2]) ** 2 <= 1.0


@dataclass(frozen=True, eq=False)
class PhantomCase:
    case_id: str
    volume: Volume
    labels: LabelMask
    gt_boxes: dict[str, BoundingBoxMM]
    seed: int
    organ_labels: dict[str, int] = field(default_factory=dict)
    ellipsoids: dict[str, Ellipsoid] = field(default_factory=dict)


def generate_case(spec: PhantomSpec, seed: int, case_id: str = "case") -> PhantomCase:
    spec.validate()
    hard = spec.difficulty == "hard"
    rng = np.random.default_rng(seed)
    sp = spec.spacing
    x, y, z = (np.arange(n) * sp for n in spec.volume_dims)
    X, Y, Z = x[:, None, None], y[None, :, None], z[None, None, :]
    shift = rng.uniform(-spec.global_jitter, spec.global_jitter, size=3)

    img = np.full(spec.volume_dims, AIR_HU)
    bx, by = spec.body_center[0] + shift[0], spec.body_center[1] + shift[1]
    body = ((X - bx) / spec.body_semi_axes[0]) ** 2 + ((Y - by) / spec.body_semi_axes[1]) ** 2 <= 1
    img = np.where(np.broadcast_to(body, img.shape), spec.background, img)
    sx, sy = spec.spine_center[0] + shift[0], spec.spine_center[1] + shift[1]
    spine = (X - sx) ** 2 + (Y - sy) ** 2 <= spec.spine_radius**2
    img = np.where(np.broadcast_to(spine, img.shape), spec.spine_intensity, img)

    contrast = spec.hard_contrast if hard else 1.0
    ellipsoids = {}
    for organ in spec.organs:
        scale = rng.uniform(*organ.scale_range, size=3)
        center = np.array(organ.center) + shift + rng.uniform(
            -organ.center_jitter, organ.center_jitter, size=3
        )
        angle = np.deg2rad(rng.uniform(-1, 1) * spec.hard_rotation_deg) if hard else 0.0
        ellipsoids[organ.name] = Ellipsoid(center, np.array(organ.semi_axes) * scale, angle)

    if hard:
        # unlabeled look-alike blobs touching random organs
        for _ in range(spec.hard_distractors):
            host = spec.organs[rng.integers(len(spec.organs))]
            e = ellipsoids[host.name]
            offset = rng.normal(size=3)
            offset *= e.semi_axes.max() / np.linalg.norm(offset)
            blob = Ellipsoid(e.center + offset, e.semi_axes * rng.uniform(0.3, 0.5, size=3))
            level = spec.background + contrast * (host.intensity - spec.background)
            img = np.where(blob.contains(X, Y, Z), level, img)

    labels = np.zeros(spec.volume_dims, dtype=np.uint8)
    for organ in spec.organs:
        inside = ellipsoids[organ.name].contains(X, Y, Z)
        labels[inside] = organ.label
        level = spec.background + contrast * (organ.intensity - spec.background)
        texture = rng.normal(0.0, organ.intensity_std, size=img.shape)
        img = np.where(inside, level + texture, img)

    noise_std = spec.hard_noise_std if hard else spec.noise_std
    if noise_std > 0:
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    img = np.clip(np.rint(img), -32768, 32767).astype(np.int16)

    spacing = (sp, sp, sp)
    volume = Volume(img, spacing)
    label_mask = LabelMask(labels, spacing)
    boxes = {o.name: extract_gt_bbox(label_mask, o.label, case_id) for o in spec.organs}
    return PhantomCase(
        case_id,
        volume,
        label_mask,
        boxes,
        seed,
        {o.name: o.label for o in spec.organs},
        ellipsoids,
    )


def case_seed(master_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, index]).generate_state(1)[0])


def generate_dataset(spec: PhantomSpec, n: int, seed: int, out_dir) -> DatasetManifest:
    if n < 1:
        raise DataError(f"need at least one case, got n={n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        case = generate_case(spec, case_seed(seed, i), f"case{i:03d}")
        ipath = out_dir / f"{case.case_id}_img.raster"
        lpath = out_dir / f"{case.case_id}_lbl.raster"
        write_volume(case.volume, ipath)
        write_volume(case.labels, lpath)
        entries.append(CaseEntry(case.case_id, ipath, lpath, dict(case.organ_labels)))
    manifest = DatasetManifest(entries, out_dir.resolve())
    write_manifest(manifest, out_dir / "manifest.txt")
    return manifest


def load_phantom_spec(path) -> PhantomSpec:
    """Read a ``key = value`` phantom description; unknown keys are rejected."""
    kv = read_kv(path)
    spec = PhantomSpec()
    changes = {}
    for key, value in kv.items():
        if key == "volume_dims":
            dims = tuple(int(v) for v in split_list(value))
            changes[key] = dims if len(dims) == 3 else dims * 3
        elif key == "organs":
            names = split_list(value)
            unknown = [n for n in names if n not in ORGANS]
            if unknown:
                raise DataError(f"{path}: unknown organ(s) {unknown}")
            changes[key] = tuple(o for o in DEFAULT_ORGANS if o.name in names)
        elif key == "difficulty":
            changes[key] = value
        elif key in ("spacing", "background", "noise_std", "global_jitter"):
            changes[key] = float(value)
        else:
            raise DataError(f"{path}: unknown phantom key {key!r}")
    spec = dataclasses.replace(spec, **changes)
    spec.validate()
    return spec
