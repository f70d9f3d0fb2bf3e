"""Dimension-generic U-Net: configuration, weights, forward/backward, footprint, files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from ..errors import FormatError, ShapeError
from . import layers

MODEL_MAGIC = "voxelbench-unet-1"


@dataclass(frozen=True)
class UNetConfig:
    rank: int = 3
    depth: int = 4
    base_channels: int = 8
    in_channels: int = 1
    out_channels: int = 1
    input_extent: int = 96
    # HU window mapped linearly onto [-1, 1] before the first layer
    intensity_window: tuple[float, float] = (-250.0, 250.0)

    def __post_init__(self):
        if self.rank not in (2, 3):
            raise ShapeError(f"rank must be 2 or 3, got {self.rank}")
        if self.depth < 1 or self.base_channels < 1:
            raise ShapeError("depth and base_channels must be positive")
        if self.in_channels != 1 or self.out_channels != 1:
            raise ShapeError("only single-channel input and output are supported")
        if self.input_extent % (2**self.depth):
            raise ShapeError(
                f"input extent {self.input_extent} not divisible by 2**depth = {2 ** self.depth}"
            )
        lo, hi = self.intensity_window
        if not hi > lo:
            raise ShapeError(f"bad intensity window {self.intensity_window}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2**level


def layer_plan(config: UNetConfig) -> list[tuple[str, str, tuple[int, ...]]]:
    """Ordered ``(name, kind, kernel_shape)`` for every weighted layer."""
    r = config.rank
    k3, k2, k1 = (3,) * r, (2,) * r, (1,) * r
    plan = []
    c_in = config.in_channels
    for i in range(config.depth):
        c = config.channels(i)
        plan.append((f"enc{i}.conv1", "conv", (c, c_in) + k3))
        plan.append((f"enc{i}.conv2", "conv", (c, c) + k3))
        c_in = c
    c = config.channels(config.depth)
    plan.append(("bottom.conv1", "conv", (c, c_in) + k3))
    plan.append(("bottom.conv2", "conv", (c, c) + k3))
    for i in reversed(range(config.depth)):
        c_up, c = config.channels(i + 1), config.channels(i)
        plan.append((f"dec{i}.up", "upconv", (c_up, c) + k2))
        plan.append((f"dec{i}.conv1", "conv", (c, 2 * c) + k3))
        plan.append((f"dec{i}.conv2", "conv", (c, c) + k3))
    plan.append(("head", "conv", (config.out_channels, config.channels(0)) + k1))
    return plan


def _bias_size(kind: str, shape: tuple[int, ...]) -> int:
    return shape[1] if kind == "upconv" else shape[0]


def _fan_in(kind: str, shape: tuple[int, ...]) -> int:
    # a transposed 2-stride kernel feeds each output from one tap per input channel
    return shape[0] if kind == "upconv" else int(np.prod(shape[1:]))


@dataclass(eq=False)
class UNetModel:
    config: UNetConfig
    params: dict[str, np.ndarray]
    seed: int = 0

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype


def init_unet(config: UNetConfig, seed: int = 0, dtype=np.float32) -> UNetModel:
    """He-normal kernels, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, kind, shape in layer_plan(config):
        std = np.sqrt(2.0 / _fan_in(kind, shape))
        params[f"{name}.w"] = (rng.standard_normal(shape) * std).astype(dtype)
        params[f"{name}.b"] = np.zeros(_bias_size(kind, shape), dtype=dtype)
    return UNetModel(config, params, seed)


def zero_unet(config: UNetConfig, dtype=np.float64) -> UNetModel:
    model = init_unet(config, 0, dtype)
    for v in model.params.values():
        v[...] = 0
    return model


def normalize_intensities(values: np.ndarray, config: UNetConfig, dtype=np.float32) -> np.ndarray:
    lo, hi = config.intensity_window
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    return ((np.clip(values, lo, hi) - mid) / half).astype(dtype)


def check_input(config: UNetConfig, x: np.ndarray) -> None:
    if x.ndim != config.rank + 2 or x.shape[1] != config.in_channels:
        raise ShapeError(
            f"rank-{config.rank} network expects (N, {config.in_channels}, ...), got {x.shape}"
        )
    step = 2**config.depth
    if any(s % step for s in x.shape[2:]):
        raise ShapeError(f"spatial extents {x.shape[2:]} not divisible by 2**depth = {step}")


@dataclass
class ForwardCache:
    entries: list = field(default_factory=list)
    prob: np.ndarray | None = None


def unet_forward(
    model: UNetModel, x: np.ndarray, keep_cache: bool = False
) -> np.ndarray | tuple[np.ndarray, ForwardCache]:
    """Probability map with the input's shape; optionally the tape for backward."""
    cfg, p = model.config, model.params
    check_input(cfg, x)
    tape = []

    def conv(name, h):
        if keep_cache:
            tape.append(("conv", name, h))
        return layers.conv_forward(h, p[name + ".w"], p[name + ".b"])

    def relu(h):
        out, mask = layers.relu_forward(h)
        if keep_cache:
            tape.append(("relu", mask))
        return out

    h = x.astype(model.dtype, copy=False)
    skips = []
    for i in range(cfg.depth):
        h = relu(conv(f"enc{i}.conv2", relu(conv(f"enc{i}.conv1", h))))
        skips.append(h)
        if keep_cache:
            tape.append(("skip",))
        h, arg = layers.maxpool_forward(h)
        if keep_cache:
            tape.append(("pool", arg, skips[-1].shape))
    h = relu(conv("bottom.conv2", relu(conv("bottom.conv1", h))))
    for i in reversed(range(cfg.depth)):
        name = f"dec{i}.up"
        if keep_cache:
            tape.append(("upconv", name, h))
        h = layers.upconv_forward(h, p[name + ".w"], p[name + ".b"])
        if keep_cache:
            tape.append(("concat", h.shape[1]))
        h = np.concatenate([h, skips.pop()], axis=1)
        h = relu(conv(f"dec{i}.conv2", relu(conv(f"dec{i}.conv1", h))))
    prob = layers.sigmoid(conv("head", h))
    if not keep_cache:
        return prob
    return prob, ForwardCache(tape, prob)


def unet_backward(
    model: UNetModel, cache: ForwardCache, dprob: np.ndarray, need_input_grad: bool = False
) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    """Weight gradients (and optionally the input gradient) given dL/dprob."""
    p = model.params
    grads = {}
    g = layers.sigmoid_backward(dprob, cache.prob)
    pending_skips = []
    entries = cache.entries
    for idx in range(len(entries) - 1, -1, -1):
        entry = entries[idx]
        kind = entry[0]
        if kind == "conv":
            _, name, h = entry
            first = idx == 0
            dx, dw, db = layers.conv_backward(
                h, p[name + ".w"], g, need_dx=need_input_grad or not first
            )
            grads[name + ".w"], grads[name + ".b"] = dw, db
            g = dx
        elif kind == "relu":
            g = layers.relu_backward(g, entry[1])
        elif kind == "pool":
            g = layers.maxpool_backward(g, entry[1], entry[2])
        elif kind == "skip":
            g = g + pending_skips.pop()
        elif kind == "concat":
            c_up = entry[1]
            pending_skips.append(g[:, c_up:])
            g = g[:, :c_up]
        elif kind == "upconv":
            _, name, h = entry
            g, dw, db = layers.upconv_backward(h, p[name + ".w"], g)
            grads[name + ".w"], grads[name + ".b"] = dw, db
    return grads, (g if need_input_grad else None)


def model_footprint(config: UNetConfig, batch_size: int = 1, bytes_per_element: int = 4) -> dict:
    """Closed-form parameter and activation counts.

    ``activation_elements`` counts, per batch item, every tensor the forward
    pass keeps for backward (input, conv/relu outputs, pool outputs, upconv
    outputs, concatenations, logits and probabilities).
    ``estimated_bytes`` covers weights, gradients, both Adam moments and the
    activations of one batch.
    """
    params = 0
    for _, kind, shape in layer_plan(config):
        params += int(np.prod(shape)) + _bias_size(kind, shape)
    vox = [(config.input_extent // 2**i) ** config.rank for i in range(config.depth + 1)]
    act = vox[0]  # input
    for i in range(config.depth):
        c = config.channels(i)
        act += 4 * c * vox[i] + c * vox[i + 1]
    act += 4 * config.channels(config.depth) * vox[config.depth]
    for i in range(config.depth):
        act += 7 * config.channels(i) * vox[i]
    act += 2 * config.out_channels * vox[0]
    return {
        "parameter_count": params,
        "activation_elements": act,
        "estimated_bytes": bytes_per_element * (4 * params + batch_size * act),
    }


# ---------------------------------------------------------------------------
# model files

_CONFIG_KEYS = ("rank", "depth", "base_channels", "in_channels", "out_channels", "input_extent")


def save_model(model: UNetModel, path) -> None:
    cfg = model.config
    meta = [MODEL_MAGIC]
    meta += [f"{k} = {getattr(cfg, k)}" for k in _CONFIG_KEYS]
    meta.append("intensity_window = " + " ".join(repr(float(v)) for v in cfg.intensity_window))
    meta.append(f"seed = {model.seed}")
    meta.append(f"blobs = {len(model.params)}")
    meta.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(meta) + "\n").encode("ascii"))
        for name, arr in model.params.items():
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            shape = ",".join(str(s) for s in arr.shape)
            head = f"blob {name} {arr.dtype.name} {shape} {le.nbytes}\n"
            fh.write(head.encode("ascii"))
            fh.write(np.ascontiguousarray(le).tobytes())
            fh.write(b"\n")


def load_model(path) -> UNetModel:
    raw = open(path, "rb").read()
    pos = 0

    def next_line() -> str:
        nonlocal pos
        end = raw.find(b"\n", pos)
        if end < 0:
            raise FormatError(f"{path}: truncated model file")
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        return line

    if next_line() != MODEL_MAGIC:
        raise FormatError(f"{path}: not a {MODEL_MAGIC} file")
    meta = {}
    while (line := next_line()) != "end":
        key, _, value = line.partition("=")
        meta[key.strip()] = value.strip()
    try:
        cfg = UNetConfig(
            **{k: int(meta[k]) for k in _CONFIG_KEYS},
            intensity_window=tuple(float(v) for v in meta["intensity_window"].split()),
        )
        n_blobs, seed = int(meta["blobs"]), int(meta["seed"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad model header ({exc})") from None
    params = {}
    for _ in range(n_blobs):
        parts = next_line().split()
        if len(parts) != 5 or parts[0] != "blob":
            raise FormatError(f"{path}: malformed blob header {parts}")
        _, name, dtype, shape, nbytes = parts
        shape = tuple(int(s) for s in shape.split(",")) if shape else ()
        nbytes = int(nbytes)
        dt = np.dtype(dtype).newbyteorder("<")
        arr = np.frombuffer(raw, dtype=dt, count=nbytes // dt.itemsize, offset=pos)
        params[name] = arr.reshape(shape).astype(np.dtype(dtype))
        pos += nbytes + 1
    expected = {f"{n}.{s}" for n, _, _ in layer_plan(cfg) for s in ("w", "b")}
    if set(params) != expected:
        raise FormatError(f"{path}: weight names do not match the configured architecture")
    return UNetModel(cfg, params, seed)


def with_config(config: UNetConfig, **changes) -> UNetConfig:
    return dataclasses.replace(config, **changes)
