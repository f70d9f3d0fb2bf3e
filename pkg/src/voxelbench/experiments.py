"""Desk-scale experiments shared by the scripts and the acceptance suite."""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ORGANS
from .evalstat import ResourceRecord, measure_resources, performance_comparison
from .harness import ExperimentConfig, make_patch, prepare_volumes, run_crossval
from .imageio import load_manifest
from .neuralseg import TrainConfig, UNetConfig, model_footprint, predict_voi, threshold_mask, train_unet
from .phantom import PhantomSpec, generate_case, generate_dataset
from .voiforest import ForestConfig, box_iou, predict_walls, train_forest

ACCEPTANCE_UNET = UNetConfig(depth=2, base_channels=8, input_extent=48)


def ensure_phantoms(out_dir, n: int, seed: int = 0, spec: PhantomSpec | None = None) -> Path:
    """Generate ``n`` phantoms under ``out_dir`` unless a matching manifest exists."""
    out_dir = Path(out_dir)
    manifest = out_dir / "manifest.txt"
    if manifest.exists() and len(load_manifest(manifest).cases) == n:
        return manifest
    generate_dataset(spec or PhantomSpec(), n, seed, out_dir)
    return manifest


def acceptance_config(manifest, epochs: int = 10, seed: int = 0, workers: int = 1, **changes) -> ExperimentConfig:
    return ExperimentConfig(
        manifest=Path(manifest).resolve(),
        unet=ACCEPTANCE_UNET,
        train=TrainConfig(epochs=epochs),
        seed=seed,
        workers=workers,
        **changes,
    )


@dataclass
class CrossvalSummary:
    elapsed_seconds: float
    mean_dsc: dict[str, float]  # per architecture, over every organ and case
    organ_mean_dsc: dict[tuple[str, str], float]
    records_per_organ_arch: dict[tuple[str, str], int]
    out_dir: Path


def crossval_experiment(data_dir, out_dir, n_cases: int = 40, **config) -> CrossvalSummary:
    """Five-fold crossval of both ranks on easy phantoms, timed end to end."""
    start = time.perf_counter()
    manifest = ensure_phantoms(data_dir, n_cases)
    result = run_crossval(acceptance_config(manifest, **config), out_dir)
    elapsed = time.perf_counter() - start
    counts, per_organ = {}, {}
    for organ in ORGANS:
        for arch in ("rank2", "rank3"):
            vals = [r.dsc for r in result.records if r.organ == organ and r.arch == arch]
            counts[(organ, arch)] = len(vals)
            per_organ[(organ, arch)] = float(np.mean(vals)) if vals else float("nan")
    means = {
        arch: float(np.mean([r.dsc for r in result.records if r.arch == arch]))
        for arch in ("rank2", "rank3")
    }
    return CrossvalSummary(elapsed, means, per_organ, counts, Path(out_dir))


# ---------------------------------------------------------------------------
# resources


@dataclass
class ResourceSummary:
    training_peak_mib: dict[int, float]
    footprint_elements: dict[int, int]
    application_seconds: dict[int, float]  # median per VOI
    performance_text: str
    performance_rows: list[list[str]]


def resource_experiment(
    n_train: int = 8,
    n_apply: int = 4,
    organs=("liver", "kidney_left"),
    unet: UNetConfig = ACCEPTANCE_UNET,
    train: TrainConfig = TrainConfig(epochs=1),
    seed: int = 0,
) -> ResourceSummary:
    """Train and apply both ranks on byte-identical VOIs and compare resources."""
    cases = []
    for i in range(n_train + n_apply):
        c = generate_case(PhantomSpec(), seed + i, f"r{i:02d}")
        cases.append(prepare_volumes(c.volume, c.labels, c.case_id, c.organ_labels))
    records: list[ResourceRecord] = []
    peak, app = {2: [], 3: []}, {2: [], 3: []}
    for organ in organs:
        patches = [make_patch(c, organ, c.reference_box(organ), unet.input_extent, True) for c in cases]
        train_set, apply_set = patches[:n_train], patches[n_train:]
        for rank in (2, 3):
            cfg = dataclasses.replace(unet, rank=rank)
            arch = f"rank{rank}"
            rec, (model, _) = measure_resources(
                lambda: train_unet(cfg, train_set, train), "training", arch, organ
            )
            records.append(rec)
            peak[rank].append(rec.peak_memory_mib)
            for p in apply_set:
                rec, _ = measure_resources(
                    lambda: threshold_mask(predict_voi(model, p), 0.5), "application", arch, organ
                )
                records.append(rec)
                app[rank].append(rec.wall_time_seconds)
    text, rows = performance_comparison(records)
    return ResourceSummary(
        {r: float(np.mean(v)) for r, v in peak.items()},
        {r: model_footprint(dataclasses.replace(unet, rank=r))["activation_elements"] for r in (2, 3)},
        {r: float(np.median(v)) for r, v in app.items()},
        text,
        rows,
    )


# ---------------------------------------------------------------------------
# box localization


@dataclass
class LocalizationSummary:
    wall_errors: dict[str, np.ndarray]  # (n_test, 6) absolute errors in mm
    ious: dict[str, np.ndarray]
    ordering_violations: int

    @property
    def pooled_median_error(self) -> float:
        return float(np.median(np.concatenate([e.ravel() for e in self.wall_errors.values()])))

    @property
    def pooled_mean_iou(self) -> float:
        return float(np.mean(np.concatenate(list(self.ious.values()))))


def localization_experiment(
    n_train: int = 32, n_test: int = 8, organs=ORGANS, seed: int = 0, forest: ForestConfig | None = None
) -> LocalizationSummary:
    """Train one forest per organ on phantoms and score held-out predicted boxes."""
    phantoms = [generate_case(PhantomSpec(), seed + i, f"l{i:02d}") for i in range(n_train + n_test)]
    train_set, test_set = phantoms[:n_train], phantoms[n_train:]
    errors, ious, bad = {}, {}, 0
    for organ in organs:
        model = train_forest([(c.volume, c.gt_boxes[organ]) for c in train_set], organ, forest)
        errs, scores = [], []
        for c in test_set:
            gt = c.gt_boxes[organ]
            pred = predict_walls(model, c.volume)
            errs.append(np.abs(pred.walls - gt.as_array()))
            # a box with crossed walls has no volume and scores zero overlap
            if pred.ordering_violations:
                bad += 1
                scores.append(0.0)
            else:
                scores.append(box_iou(pred.box(), gt))
        errors[organ] = np.array(errs).reshape(-1, 6)
        ious[organ] = np.array(scores)
    return LocalizationSummary(errors, ious, bad)
