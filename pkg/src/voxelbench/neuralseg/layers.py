"""Rank-generic (2D/3D) network layers with explicit forward and backward passes.

Tensors are laid out ``(batch, channels, *spatial)``.  Convolutions use
same-padding and stride 1; kernels are ``(out, in, k, ..., k)``.  Transposed
convolutions use kernel 2 / stride 2 with kernels ``(in, out, 2, ..., 2)``.

The convolution works on a zero-padded copy of the batch flattened into one
long row per channel.  A kernel tap then becomes a constant shift along that
row, so im2col is a handful of contiguous slice copies followed by one GEMM;
outputs anchored in the padding ring are computed and discarded.
"""

from __future__ import annotations

import itertools

import numpy as np

from ..errors import ShapeError

# elements per im2col chunk; bounds transient memory independently of batch size
COL_BUDGET = 16 * 1024 * 1024


def _check_conv(x: np.ndarray, w: np.ndarray) -> tuple[int, int]:
    rank = x.ndim - 2
    if rank not in (2, 3):
        raise ShapeError(f"expected a rank-2 or rank-3 batch, got shape {x.shape}")
    if w.ndim != rank + 2:
        raise ShapeError(f"kernel rank {w.ndim - 2} does not match input rank {rank}")
    k = w.shape[2]
    if any(s != k for s in w.shape[2:]) or k % 2 == 0:
        raise ShapeError(f"kernel spatial extent must be odd and isotropic, got {w.shape[2:]}")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}")
    return rank, k


class _FlatGrid:
    """Index bookkeeping for the padded, flattened batch layout.

    Taps along the leading spatial axis are not expanded by im2col: their
    contributions come out of one GEMM as ``k`` partial outputs that are
    summed with a shift of ``lead_stride`` each.
    """

    def __init__(self, spatial: tuple[int, ...], k: int, n: int):
        self.spatial = spatial
        self.k = k
        self.pad = k // 2
        self.padded = tuple(s + 2 * self.pad for s in spatial)
        self.block = int(np.prod(self.padded))
        self.lead_stride = int(np.prod(self.padded[1:]))
        inner = self.padded[1:]
        strides = np.cumprod((1,) + inner[::-1])[:-1][::-1]
        self.offsets = [
            int(np.dot(o, strides)) for o in itertools.product(range(k), repeat=len(inner))
        ]
        self.n = n
        self.inner_length = n * self.block - self.offsets[-1]
        self.length = self.inner_length - (k - 1) * self.lead_stride

    def lead_slice(self, dz: int) -> slice:
        start = dz * self.lead_stride
        return slice(start, start + self.length)

    def flatten(self, x: np.ndarray) -> np.ndarray:
        """(n, C, *S) -> zero-padded (C, n * block)."""
        n, c = x.shape[:2]
        out = np.zeros((c, n) + self.padded, dtype=x.dtype)
        p = self.pad
        out[(slice(None), slice(None)) + tuple(slice(p, p + s) for s in self.spatial)] = (
            x.swapaxes(0, 1)
        )
        return out.reshape(c, n * self.block)

    def anchor_rows(self, y: np.ndarray) -> np.ndarray:
        """(n, C, *S) -> (C, length) with values at window anchors, zeros elsewhere."""
        n, c = y.shape[:2]
        out = np.zeros((c, n) + self.padded, dtype=y.dtype)
        out[(slice(None), slice(None)) + tuple(slice(0, s) for s in self.spatial)] = y.swapaxes(
            0, 1
        )
        return out.reshape(c, n * self.block)[:, : self.length]

    def from_anchor_rows(self, rows: np.ndarray) -> np.ndarray:
        """(C, length) anchored outputs -> (n, C, *S)."""
        c = rows.shape[0]
        full = np.empty((c, self.n * self.block), dtype=rows.dtype)
        full[:, : self.length] = rows
        full = full.reshape((c, self.n) + self.padded)
        full = full[(slice(None), slice(None)) + tuple(slice(0, s) for s in self.spatial)]
        return full.swapaxes(0, 1)

    def crop_padded(self, flat: np.ndarray) -> np.ndarray:
        """Zero-padded (C, n * block) -> interior (n, C, *S)."""
        c = flat.shape[0]
        p = self.pad
        full = flat.reshape((c, self.n) + self.padded)
        full = full[(slice(None), slice(None)) + tuple(slice(p, p + s) for s in self.spatial)]
        return full.swapaxes(0, 1)

    def im2col(self, flat: np.ndarray) -> np.ndarray:
        c = flat.shape[0]
        cols = np.empty((c, len(self.offsets), self.inner_length), dtype=flat.dtype)
        for j, off in enumerate(self.offsets):
            cols[:, j, :] = flat[:, off : off + self.inner_length]
        return cols.reshape(c * len(self.offsets), self.inner_length)

    def col2im(self, dcols: np.ndarray, channels: int) -> np.ndarray:
        dcols = dcols.reshape(channels, len(self.offsets), self.inner_length)
        acc = np.zeros((channels, self.n * self.block), dtype=dcols.dtype)
        for j, off in enumerate(self.offsets):
            acc[:, off : off + self.inner_length] += dcols[:, j, :]
        return acc


def _chunks(x: np.ndarray, k: int, rank: int):
    n, c = x.shape[:2]
    per_sample = c * k ** (rank - 1) * int(np.prod([s + k - 1 for s in x.shape[2:]]))
    step = max(1, COL_BUDGET // max(per_sample, 1))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def _lead_major(w: np.ndarray) -> np.ndarray:
    """(Co, C, k, *rest) -> (k, Co, C * k**(rank-1))."""
    co, c, k = w.shape[:3]
    return np.ascontiguousarray(np.moveaxis(w, 2, 0)).reshape(k, co, -1)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    rank, k = _check_conv(x, w)
    n, co = x.shape[0], w.shape[0]
    if k == 1:
        y = np.tensordot(w.reshape(co, -1), x, axes=([1], [1])).swapaxes(0, 1)
    else:
        wz = _lead_major(w)
        wall = wz.reshape(k * co, -1)
        y = np.empty((n, co) + x.shape[2:], dtype=np.result_type(x, w))
        for sl in _chunks(x, k, rank):
            grid = _FlatGrid(x.shape[2:], k, sl.stop - sl.start)
            part = wall @ grid.im2col(grid.flatten(x[sl]))
            rows = part[:co, grid.lead_slice(0)].copy()
            for dz in range(1, k):
                rows += part[dz * co : (dz + 1) * co, grid.lead_slice(dz)]
            y[sl] = grid.from_anchor_rows(rows)
    if b is not None:
        y = y + b.reshape((1, co) + (1,) * rank)
    return np.ascontiguousarray(y)


def conv_backward(
    x: np.ndarray, w: np.ndarray, dy: np.ndarray, need_dx: bool = True
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients ``(dx, dw, db)`` of a same-padded convolution."""
    rank, k = _check_conv(x, w)
    co, c = w.shape[:2]
    if dy.shape != (x.shape[0], co) + x.shape[2:]:
        raise ShapeError(f"output gradient shape {dy.shape} does not match the forward output")
    spatial_axes = (0,) + tuple(range(2, rank + 2))
    db = dy.sum(axis=spatial_axes)
    if k == 1:
        w2 = w.reshape(co, -1)
        dw = np.tensordot(dy, x, axes=(spatial_axes, spatial_axes)).reshape(w.shape)
        dx = np.tensordot(w2, dy, axes=([0], [1])).swapaxes(0, 1) if need_dx else None
        return (None if dx is None else np.ascontiguousarray(dx)), dw, db
    wz = _lead_major(w)
    dwz = np.zeros(wz.shape, dtype=np.result_type(x, dy))
    for sl in _chunks(x, k, rank):
        grid = _FlatGrid(x.shape[2:], k, sl.stop - sl.start)
        cols = grid.im2col(grid.flatten(x[sl]))
        rows = grid.anchor_rows(dy[sl])
        for dz in range(k):
            dwz[dz] += rows @ cols[:, grid.lead_slice(dz)].T
    dw = np.moveaxis(dwz.reshape((k, co, c) + (k,) * (rank - 1)), 0, 2)
    dx = None
    if need_dx:
        # adjoint of a same-padded correlation: correlate with the flipped, transposed kernel
        flipped = np.flip(w, axis=tuple(range(2, rank + 2))).swapaxes(0, 1)
        dx = conv_forward(dy, np.ascontiguousarray(flipped))
    return dx, np.ascontiguousarray(dw), db


def _window_view(x: np.ndarray) -> np.ndarray:
    """(N, C, *S) -> (N, C, *S/2, 2**rank) without copying data order semantics."""
    rank = x.ndim - 2
    n, c = x.shape[:2]
    split = []
    for s in x.shape[2:]:
        split += [s // 2, 2]
    r = x.reshape((n, c) + tuple(split))
    order = (0, 1) + tuple(2 + 2 * i for i in range(rank)) + tuple(3 + 2 * i for i in range(rank))
    return r.transpose(order).reshape((n, c) + tuple(s // 2 for s in x.shape[2:]) + (2**rank,))


def _unwindow(r: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    rank = len(shape) - 2
    n, c = shape[:2]
    half = tuple(s // 2 for s in shape[2:])
    r = r.reshape((n, c) + half + (2,) * rank)
    order = [0, 1]
    for i in range(rank):
        order += [2 + i, 2 + rank + i]
    return r.transpose(order).reshape(shape)


def maxpool_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2-per-axis max pooling; returns output and window-local argmax (first max wins)."""
    if x.ndim not in (4, 5):
        raise ShapeError(f"expected a rank-2 or rank-3 batch, got shape {x.shape}")
    if any(s % 2 for s in x.shape[2:]):
        raise ShapeError(f"max-pool needs even spatial extents, got {x.shape[2:]}")
    win = _window_view(x)
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return y, arg


def maxpool_backward(dy: np.ndarray, arg: np.ndarray, input_shape: tuple[int, ...]) -> np.ndarray:
    rank = len(input_shape) - 2
    win = np.zeros(dy.shape + (2**rank,), dtype=dy.dtype)
    np.put_along_axis(win, arg[..., None], dy[..., None], axis=-1)
    return _unwindow(win, tuple(input_shape))


def _check_upconv(x: np.ndarray, w: np.ndarray) -> int:
    rank = x.ndim - 2
    if rank not in (2, 3) or w.ndim != rank + 2:
        raise ShapeError(f"upconv rank mismatch: input {x.shape}, kernel {w.shape}")
    if any(s != 2 for s in w.shape[2:]):
        raise ShapeError(f"transposed kernel must be 2 per axis, got {w.shape[2:]}")
    if w.shape[0] != x.shape[1]:
        raise ShapeError(f"channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[0]}")
    return rank


def upconv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    rank = _check_upconv(x, w)
    n, co = x.shape[0], w.shape[1]
    y = np.tensordot(x, w, axes=([1], [0]))  # (N, *S, Co, 2, ...)
    order = [0, rank + 1]
    for i in range(rank):
        order += [1 + i, rank + 2 + i]
    y = y.transpose(order).reshape((n, co) + tuple(2 * s for s in x.shape[2:]))
    if b is not None:
        y = y + b.reshape((1, co) + (1,) * rank)
    return np.ascontiguousarray(y)


def upconv_backward(
    x: np.ndarray, w: np.ndarray, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rank = _check_upconv(x, w)
    n, co = x.shape[0], w.shape[1]
    split = [n, co]
    for s in x.shape[2:]:
        split += [s, 2]
    # (N, Co, S0, 2, S1, 2, ...) -> (N, S0, S1, ..., Co, 2, 2, ...)
    order = [0] + [2 + 2 * i for i in range(rank)] + [1] + [3 + 2 * i for i in range(rank)]
    dyr = dy.reshape(split).transpose(order)
    tail = list(range(rank + 1, 2 * rank + 2))
    dx = np.tensordot(dyr, w, axes=(tail, list(range(1, rank + 2))))
    dx = np.ascontiguousarray(np.moveaxis(dx, -1, 1))
    dw = np.tensordot(x, dyr, axes=([0] + list(range(2, rank + 2)), list(range(rank + 1))))
    db = dy.sum(axis=(0,) + tuple(range(2, rank + 2)))
    return dx, dw, db


def relu_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic function, clipped one ulp inside (0, 1) for the array dtype."""
    p = 0.5 * (1.0 + np.tanh(0.5 * z))
    eps = np.finfo(p.dtype).eps
    return np.clip(p, eps, 1.0 - eps)


def sigmoid_backward(dp: np.ndarray, p: np.ndarray) -> np.ndarray:
    return dp * p * (1.0 - p)


BCE_CLAMP = 1e-7


def bce_loss(prob: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy and its gradient with respect to ``prob``.

    The loss is a Python float except for extended-precision input, whose
    loss stays a ``np.longdouble`` so precise gradient checks keep their digits.
    """
    if prob.shape != target.shape:
        raise ShapeError(f"prob {prob.shape} and target {target.shape} differ")
    p = np.clip(prob, BCE_CLAMP, 1.0 - BCE_CLAMP)
    t = target.astype(p.dtype, copy=False)
    loss = -np.mean(t * np.log(p) + (1.0 - t) * np.log1p(-p))
    inside = (prob > BCE_CLAMP) & (prob < 1.0 - BCE_CLAMP)
    grad = np.where(inside, (p - t) / (p * (1.0 - p)), 0.0).astype(p.dtype) / p.size
    return (loss if p.dtype.itemsize > 8 else float(loss)), grad
