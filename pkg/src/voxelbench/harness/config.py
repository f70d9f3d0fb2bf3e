"""Experiment configuration read from line-oriented ``key = value`` files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .. import ORGANS
from ..errors import DataError
from ..kvfile import parse_kv, split_list
from ..neuralseg import TrainConfig, UNetConfig
from ..voiforest import ForestConfig

DEFAULT_THRESHOLD = 0.5
DEFAULT_THRESHOLDS = {"pancreas": 0.3}
VOI_SOURCES = ("ground_truth", "rrf")

_UNET_KEYS = {"depth": int, "base_channels": int, "input_extent": int}
_TRAIN_KEYS = {"batch_size": int, "epochs": int, "learning_rate": float, "dtype": str}
_RRF_KEYS = {
    "n_trees": int,
    "max_depth": int,
    "min_leaf": int,
    "candidate_splits": int,
    "bootstrap_fraction": float,
    "sample_radius": float,
    "train_stride": int,
    "predict_stride": int,
}


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    manifest: Path | None = None
    organs: tuple[str, ...] = ORGANS
    thresholds: dict[str, float] = field(default_factory=dict)
    folds: int = 5
    seed: int = 0
    voi_source: str = "ground_truth"
    unet: UNetConfig = field(default_factory=UNetConfig)
    rank_overrides: dict[int, dict] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    rrf: ForestConfig = field(default_factory=ForestConfig)
    # five independent random test draws instead of a partition
    independent_draws: bool = False
    workers: int = 1
    spacing: float = 2.0
    save_models: bool = True

    def __post_init__(self):
        unknown = [o for o in self.organs if o not in ORGANS]
        if unknown or not self.organs:
            raise DataError(f"unknown or empty organ list: {list(self.organs)}")
        for organ, theta in self.thresholds.items():
            if not 0.0 < theta < 1.0:
                raise DataError(f"threshold for {organ} must lie in (0, 1), got {theta}")
        if self.folds < 2:
            raise DataError(f"folds must be >= 2, got {self.folds}")
        if self.voi_source not in VOI_SOURCES:
            raise DataError(f"voi_source must be one of {VOI_SOURCES}, got {self.voi_source!r}")
        if self.workers < 1 or self.spacing <= 0:
            raise DataError("workers must be >= 1 and spacing positive")

    def threshold(self, organ: str) -> float:
        if organ in self.thresholds:
            return self.thresholds[organ]
        return DEFAULT_THRESHOLDS.get(organ, DEFAULT_THRESHOLD)

    def unet_config(self, rank: int) -> UNetConfig:
        return dataclasses.replace(self.unet, rank=rank, **self.rank_overrides.get(rank, {}))

    def train_config(self, seed: int) -> TrainConfig:
        return dataclasses.replace(self.train, seed=seed)


def parse_experiment_config(text: str, source: str = "<string>", base_dir=None) -> ExperimentConfig:
    kv = parse_kv(text, source)
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    top, thresholds, unet, overrides, train, rrf = {}, {}, {}, {2: {}, 3: {}}, {}, {}
    for key, value in kv.items():
        try:
            head, _, tail = key.partition(".")
            if key == "manifest":
                top["manifest"] = (base_dir / value).resolve()
            elif key == "organs":
                top["organs"] = tuple(split_list(value))
            elif key in ("folds", "seed", "workers"):
                top[key] = int(value)
            elif key == "spacing":
                top[key] = float(value)
            elif key == "voi_source":
                top[key] = value
            elif key in ("independent_draws", "save_models"):
                top[key] = _bool(value)
            elif head == "threshold" and tail:
                thresholds[tail] = float(value)
            elif head in ("unet", "rank2", "rank3") and tail == "intensity_window":
                lo, hi = (float(v) for v in split_list(value))
                target = unet if head == "unet" else overrides[int(head[-1])]
                target[tail] = (lo, hi)
            elif head in ("unet", "rank2", "rank3") and tail in _UNET_KEYS:
                target = unet if head == "unet" else overrides[int(head[-1])]
                target[tail] = _UNET_KEYS[tail](value)
            elif head == "train" and tail in _TRAIN_KEYS:
                train[tail] = _TRAIN_KEYS[tail](value)
            elif head == "rrf" and tail in _RRF_KEYS:
                rrf[tail] = _RRF_KEYS[tail](value)
            else:
                raise DataError(f"{source}: unknown config key {key!r}")
        except ValueError as exc:
            raise DataError(f"{source}: bad value for {key!r}: {exc}") from None
    try:
        unet_cfg = UNetConfig(**unet)
        for rank, changes in overrides.items():
            dataclasses.replace(unet_cfg, rank=rank, **changes)
        train_cfg = TrainConfig(**train)
        rrf_cfg = ForestConfig(**rrf)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{source}: {exc}") from None
    return ExperimentConfig(
        thresholds=thresholds,
        unet=unet_cfg,
        rank_overrides={r: c for r, c in overrides.items() if c},
        train=train_cfg,
        rrf=rrf_cfg,
        **top,
    )


def load_experiment_config(path) -> ExperimentConfig:
    path = Path(path)
    return parse_experiment_config(path.read_text(), str(path), path.resolve().parent)
