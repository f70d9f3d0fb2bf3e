"""U-Net training loop, VOI inference and thresholding."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from ..errors import ShapeError, TrainingError
from ..volgrid import VoiPatch
from .layers import bce_loss
from .optim import AdamState, adam_step
from .unet import (
    UNetConfig,
    UNetModel,
    init_unet,
    normalize_intensities,
    unet_backward,
    unet_forward,
)

log = logging.getLogger(__name__)

# slices per forward pass when applying a rank-2 net to a volume
SLICE_BATCH = 16


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    epochs: int = 100
    seed: int = 0
    learning_rate: float = 1e-3
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


def _check_patch(config: UNetConfig, patch: VoiPatch) -> None:
    want = (config.input_extent,) * 3
    if patch.intensities.shape != want:
        raise ShapeError(f"patch shape {patch.intensities.shape} != configured {want}")


def axial_slices(volume: np.ndarray) -> np.ndarray:
    """[x, y, z] patch -> (z, x, y) stack of axial slices."""
    return np.moveaxis(volume, 2, 0)


def build_samples(
    config: UNetConfig, patches: list[VoiPatch], dtype=np.float32
) -> tuple[np.ndarray, np.ndarray]:
    """Network-ready inputs and targets; rank 2 turns every axial slice into a sample."""
    xs, ys = [], []
    for patch in patches:
        _check_patch(config, patch)
        if patch.labels is None:
            raise TrainingError(f"patch of case {patch.source_case!r} has no labels")
        x = normalize_intensities(patch.intensities, config, dtype)
        y = patch.labels.astype(dtype)
        if config.rank == 2:
            xs.append(axial_slices(x))
            ys.append(axial_slices(y))
        else:
            xs.append(x[None])
            ys.append(y[None])
    return np.concatenate(xs)[:, None], np.concatenate(ys)[:, None]


def epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def train_unet(
    config: UNetConfig, train: list[VoiPatch], tcfg: TrainConfig
) -> tuple[UNetModel, list[float]]:
    if not train:
        raise TrainingError("empty training set")
    dtype = np.dtype(tcfg.dtype)
    x, y = build_samples(config, train, dtype)
    init_seed, shuffle_seed = np.random.SeedSequence(tcfg.seed).generate_state(2)
    model = init_unet(config, int(init_seed), dtype)
    model.seed = tcfg.seed
    rng = np.random.default_rng(int(shuffle_seed))
    state = AdamState.for_weights(model.params, learning_rate=tcfg.learning_rate)
    history = []
    for epoch in range(tcfg.epochs):
        total = 0.0
        for idx in epoch_batches(len(x), tcfg.batch_size, rng):
            prob, cache = unet_forward(model, x[idx], keep_cache=True)
            loss, dprob = bce_loss(prob, y[idx])
            grads, _ = unet_backward(model, cache, dprob)
            adam_step(state, model.params, grads)
            total += loss * len(idx)
        history.append(total / len(x))
        log.debug("epoch %d/%d rank %d loss %.5f", epoch + 1, tcfg.epochs, config.rank, history[-1])
    return model, history


def predict_voi(model: UNetModel, patch: VoiPatch) -> VoiPatch:
    """Probability patch; rank-2 models run slice by slice and restack along z."""
    cfg = model.config
    _check_patch(cfg, patch)
    x = normalize_intensities(patch.intensities, cfg, model.dtype)
    if cfg.rank == 3:
        prob = unet_forward(model, x[None, None])[0, 0]
    else:
        slices = axial_slices(x)[:, None]
        out = np.empty(slices.shape, dtype=model.dtype)
        for i in range(0, len(slices), SLICE_BATCH):
            out[i : i + SLICE_BATCH] = unet_forward(model, slices[i : i + SLICE_BATCH])
        prob = np.moveaxis(out[:, 0], 0, 2)
    return dataclasses.replace(patch, probabilities=np.ascontiguousarray(prob), labels=None)


def threshold_mask(prob: VoiPatch, theta: float) -> VoiPatch:
    if not 0.0 < theta < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {theta}")
    if prob.probabilities is None:
        raise ValueError("patch carries no probabilities")
    mask = (prob.probabilities >= theta).astype(np.uint8)
    return dataclasses.replace(prob, labels=mask)
