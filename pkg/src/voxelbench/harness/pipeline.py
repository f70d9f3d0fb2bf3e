"""End-to-end pipeline: preprocessing, VOI extraction, two-rank cross-validation."""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError, VoxelBenchError
from ..evalstat import DiceRecord, ResourceRecord, dsc, measure_resources, write_report
from ..evalstat.report import ComparisonReport
from ..imageio import CaseEntry, load_manifest, read_volume, validate_case
from ..neuralseg import UNetModel, predict_voi, save_model, threshold_mask, train_unet
from ..volgrid import (
    BoundingBoxMM,
    Grid,
    LabelMask,
    Volume,
    VoiPatch,
    crop_resample_voi,
    extract_gt_bbox,
    reconstruct_mask,
    reorient,
    reorient_to_rai,
    resample_isotropic,
)
from ..voiforest import Forest, predict_bbox, save_forest, train_forest
from .config import ExperimentConfig
from .folds import FoldAssignment, make_folds

log = logging.getLogger(__name__)

RANKS = (2, 3)


def arch_name(rank: int) -> str:
    return f"rank{rank}"


class StageFailure(VoxelBenchError):
    """A pipeline stage failed for one case and organ."""

    def __init__(self, case_id: str, organ: str, stage: str, cause: Exception):
        self.case_id, self.organ, self.stage, self.cause = case_id, organ, stage, cause
        super().__init__(f"case {case_id!r}, organ {organ}, stage {stage}: {cause}")

    @property
    def is_data_error(self) -> bool:
        return isinstance(self.cause, DataError)


@contextlib.contextmanager
def stage(case_id: str, organ: str, name: str):
    try:
        yield
    except StageFailure:
        raise
    except Exception as exc:
        raise StageFailure(case_id, organ, name, exc) from exc


def derived_seed(master: int, *parts) -> int:
    """Stable 63-bit seed from the master seed and a job identity."""
    key = "|".join(str(p) for p in (master,) + parts).encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little") & (2**63 - 1)


# ---------------------------------------------------------------------------
# cases


@dataclass(frozen=True, eq=False)
class PreparedCase:
    case_id: str
    organ_labels: dict[str, int]
    original: Grid  # geometry of the input files
    volume: Volume  # canonical orientation, isotropic spacing
    labels: LabelMask | None  # same grid as ``volume``
    reference: LabelMask | None  # canonical orientation, original resolution
    full_grid: Grid  # geometry of ``reference`` (masks are reconstructed here)

    def label_of(self, organ: str) -> int:
        if organ not in self.organ_labels:
            raise DataError(f"case {self.case_id!r} has no label for organ {organ}")
        return self.organ_labels[organ]

    def reference_box(self, organ: str) -> BoundingBoxMM:
        if self.reference is None:
            raise DataError(f"case {self.case_id!r} has no reference labels")
        return extract_gt_bbox(self.reference, self.label_of(organ), self.case_id)


def prepare_volumes(
    intensity: Volume,
    labels: LabelMask | None = None,
    case_id: str = "",
    organ_labels: dict | None = None,
    spacing: float = 2.0,
) -> PreparedCase:
    """Reorient to the canonical frame and resample to isotropic ``spacing``."""
    if labels is not None:
        validate_case(intensity, labels, case_id)
    rai = reorient_to_rai(intensity)
    iso = resample_isotropic(rai, spacing)
    ref = iso_labels = None
    if labels is not None:
        ref = reorient_to_rai(labels)
        iso_labels = resample_isotropic(ref, spacing)
    return PreparedCase(
        case_id, dict(organ_labels or {}), intensity.geometry, iso, iso_labels, ref, rai.geometry
    )


def prepare_case(entry: CaseEntry, spacing: float = 2.0) -> PreparedCase:
    intensity = read_volume(entry.intensity_path)
    labels = read_volume(entry.label_path)
    if not isinstance(labels, LabelMask):
        raise DataError(f"case {entry.case_id!r}: label file is not uint8")
    return prepare_volumes(intensity, labels, entry.case_id, entry.organ_label_map, spacing)


def make_patch(case: PreparedCase, organ: str, box: BoundingBoxMM, extent: int, with_labels: bool):
    labels = case.labels if with_labels else None
    label = case.label_of(organ) if with_labels else None
    patch = crop_resample_voi(case.volume, box, extent, "trilinear", labels, label, case.case_id)
    for arr in (patch.intensities, patch.labels):
        if arr is not None:
            arr.flags.writeable = False
    return patch


def patch_checksum(patches) -> str:
    h = hashlib.sha256()
    for p in patches:
        h.update(p.source_case.encode())
        h.update(np.ascontiguousarray(p.intensities).tobytes())
        if p.labels is not None:
            h.update(np.ascontiguousarray(p.labels).tobytes())
        if p.source_box is not None:
            h.update(p.source_box.as_array().tobytes())
    return h.hexdigest()


def to_original_geometry(mask: LabelMask, original: Grid) -> LabelMask:
    back = reorient(mask, original.orientation)
    return back.with_voxels(back.voxels, origin=original.origin)


# ---------------------------------------------------------------------------
# application path


@dataclass(frozen=True, eq=False)
class SingleResult:
    case_id: str
    organ: str
    arch: str
    box: BoundingBoxMM
    mask: LabelMask  # in the input file geometry
    dsc: float | None
    resources: ResourceRecord


def run_single(
    case: PreparedCase,
    organ: str,
    model: UNetModel,
    threshold: float,
    box: BoundingBoxMM | None = None,
    forest: Forest | None = None,
    patch: VoiPatch | None = None,
) -> SingleResult:
    """Apply one trained network to one case: VOI, probabilities, mask, DSC."""
    arch = arch_name(model.config.rank)
    cid = case.case_id
    if box is None:
        with stage(cid, organ, "detect-voi"):
            box = predict_bbox(forest, case.volume)[0] if forest is not None else case.reference_box(organ)
    if patch is None:
        with stage(cid, organ, "crop"):
            patch = make_patch(case, organ, box, model.config.input_extent, with_labels=False)
    with stage(cid, organ, "segment"):
        record, prob = measure_resources(
            lambda: threshold_mask(predict_voi(model, patch), threshold), "application", arch, organ
        )
    with stage(cid, organ, "reconstruct"):
        mask = reconstruct_mask(prob, box, case.full_grid, cid)
    score = None
    if case.reference is not None and organ in case.organ_labels:
        score = dsc(mask.voxels == 1, case.reference.voxels == case.label_of(organ))
    return SingleResult(cid, organ, arch, box, to_original_geometry(mask, case.original), score, record)


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class JobResult:
    fold: int
    organ: str
    records: dict[int, list[DiceRecord]]
    resources: dict[int, list[ResourceRecord]]
    checksum: str
    boxes: list[tuple[str, str, np.ndarray]] = field(default_factory=list)


def run_fold_organ(
    cfg: ExperimentConfig, fold: FoldAssignment, organ: str, cases: dict, models_dir: Path | None
) -> JobResult:
    """Train and evaluate both ranks on one fold for one organ."""
    train_cases = [cases[i] for i in fold.train_ids]
    test_cases = [cases[i] for i in fold.test_ids]
    extent = cfg.unet_config(2).input_extent
    f = fold.fold_index

    train_patches = []
    for c in train_cases:
        with stage(c.case_id, organ, "training-voi"):
            train_patches.append(make_patch(c, organ, c.reference_box(organ), extent, True))

    forest = None
    if cfg.voi_source == "rrf":
        rrf_cfg = dataclasses.replace(cfg.rrf, seed=derived_seed(cfg.seed, f, organ, "rrf"))
        with stage(",".join(fold.train_ids), organ, "train-rrf"):
            forest = train_forest(
                [(c.volume, c.reference_box(organ)) for c in train_cases], organ, rrf_cfg
            )
        if models_dir is not None:
            save_forest(forest, models_dir / f"fold{f}_{organ}.forest")

    tests, boxes = [], []
    for c in test_cases:
        with stage(c.case_id, organ, "detect-voi"):
            box = predict_bbox(forest, c.volume)[0] if forest is not None else c.reference_box(organ)
        with stage(c.case_id, organ, "crop"):
            tests.append((c, box, make_patch(c, organ, box, extent, False)))
        boxes.append((c.case_id, cfg.voi_source, box.as_array()))

    checksum = patch_checksum(train_patches + [t[2] for t in tests])
    records, resources = {}, {}
    for rank in RANKS:
        if patch_checksum(train_patches + [t[2] for t in tests]) != checksum:
            raise VoxelBenchError(f"fold {f} {organ}: VOI data changed between architectures")
        arch = arch_name(rank)
        ucfg = cfg.unet_config(rank)
        tcfg = cfg.train_config(derived_seed(cfg.seed, f, organ, rank))
        log.info("fold %d organ %s %s: training on %d VOIs", f, organ, arch, len(train_patches))
        with stage(",".join(fold.train_ids), organ, f"train-{arch}"):
            rec, (model, _) = measure_resources(
                lambda: train_unet(ucfg, train_patches, tcfg), "training", arch, organ
            )
        if models_dir is not None:
            save_model(model, models_dir / f"fold{f}_{organ}_{arch}.unet")
        resources[rank] = [rec]
        records[rank] = []
        for c, box, patch in tests:
            res = run_single(c, organ, model, cfg.threshold(organ), box=box, patch=patch)
            records[rank].append(DiceRecord(c.case_id, organ, arch, res.dsc))
            resources[rank].append(res.resources)
    return JobResult(f, organ, records, resources, checksum, boxes)


def _job(args):
    return run_fold_organ(*args)


@dataclass
class CrossvalResult:
    records: list[DiceRecord]
    resources: list[ResourceRecord]
    report: ComparisonReport
    folds: list[FoldAssignment]
    out_dir: Path


def load_cases(cfg: ExperimentConfig) -> dict[str, PreparedCase]:
    if cfg.manifest is None:
        raise DataError("experiment config names no manifest")
    manifest = load_manifest(cfg.manifest)
    cases = {}
    for entry in manifest.cases:
        with stage(entry.case_id, "-", "preprocess"):
            cases[entry.case_id] = prepare_case(entry, cfg.spacing)
    return cases


def run_crossval(cfg: ExperimentConfig, out_dir, cases: dict | None = None) -> CrossvalResult:
    """Cross-validate both ranks and write CSV reports, tables and models to ``out_dir``."""
    if cfg.unet_config(2).input_extent != cfg.unet_config(3).input_extent:
        raise DataError("both ranks must use the same VOI extent")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    models_dir = None
    if cfg.save_models:
        models_dir = out / "models"
        models_dir.mkdir(exist_ok=True)
    if cases is None:
        cases = load_cases(cfg)
    folds = make_folds(list(cases), cfg.folds, cfg.seed, cfg.independent_draws)
    jobs = []
    for fold in folds:
        for organ in cfg.organs:
            subset = {i: cases[i] for i in fold.train_ids + fold.test_ids}
            jobs.append((cfg, fold, organ, subset, models_dir))
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_job, jobs))
    else:
        results = [_job(j) for j in jobs]

    # serial merge ordered by (organ, rank, fold)
    by_key = {(r.organ, r.fold): r for r in results}
    records, resources = [], []
    for organ in cfg.organs:
        for rank in RANKS:
            for fold in folds:
                r = by_key[(organ, fold.fold_index)]
                records += r.records[rank]
                resources += r.resources[rank]
    report = write_report(out, records, resources)
    _write_rows(
        out / "folds.csv",
        ("fold", "case_id", "role"),
        [(f.fold_index, c, role) for f in folds for role, ids in (("train", f.train_ids), ("test", f.test_ids)) for c in ids],
    )
    _write_rows(
        out / "parity.csv",
        ("fold", "organ", "sha256"),
        [(r.fold, r.organ, r.checksum) for r in sorted(results, key=lambda r: (r.fold, r.organ))],
    )
    box_rows = []
    for organ in cfg.organs:
        for fold in folds:
            for cid, source, walls in by_key[(organ, fold.fold_index)].boxes:
                box_rows.append((fold.fold_index, organ, cid, source) + tuple(repr(float(w)) for w in walls))
    _write_rows(
        out / "boxes.csv",
        ("fold", "organ", "case_id", "source", "left", "right", "anterior", "posterior", "head", "foot"),
        box_rows,
    )
    return CrossvalResult(records, resources, report, folds, out)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
