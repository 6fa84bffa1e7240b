"""Dense 2D/3D numeric grids and the small kernel set shared by the pipeline.

Grids wrap float64 numpy arrays in row-major, channel-last layout. The axis
convention everywhere in this package is ``x`` = columns, ``y`` = rows.
All operations are pure functions: inputs are never mutated and equal inputs
produce bit-identical outputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Grid2",
    "Grid3",
    "conv2d_multi",
    "max_pool",
    "avg_pool",
    "concat_channels",
    "resample_bilinear",
    "bilinear_sample",
]


def _validated(data, ndim: int) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != ndim:
        raise ValueError(f"expected {ndim}-d grid data, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("grid dimensions must be positive")
    if not np.isfinite(arr).all():
        raise ValueError("grid data must be finite")
    return arr


@dataclass(frozen=True)
class Grid2:
    """Single-channel height x width grid of finite values."""

    data: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", _validated(self.data, 2))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Grid3:
    """Height x width x channels grid, channel-last."""

    data: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "data", _validated(self.data, 3))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def channel(self, index: int) -> Grid2:
        """One channel slice as an independent Grid2."""
        return Grid2(self.data[:, :, index].copy())

    @classmethod
    def from_channels(cls, channels: Sequence[Grid2]) -> "Grid3":
        if not channels:
            raise ValueError("at least one channel required")
        return cls(np.stack([c.data for c in channels], axis=2))


def _int_pair(value, name: str) -> tuple[int, int]:
    if isinstance(value, int):
        value = (value, value)
    a, b = int(value[0]), int(value[1])
    if a < 1 or b < 1:
        raise ValueError(f"{name} must be a positive integer pair, got {value}")
    return a, b


def conv2d_multi(
    input: Grid3,
    kernels: Sequence[Grid3],
    biases: Sequence[float],
    stride: int | tuple[int, int] = (1, 1),
    padding: int = 0,
) -> Grid3:
    """Multi-channel 2D cross-correlation.

    Each kernel spans a spatial window over *all* input channels and yields
    one output channel: ``out[i, j, k] = bias[k] + sum over window of
    input * kernel``. Output spatial size is
    ``floor((in + 2*padding - k) / stride) + 1`` per axis.
    """
    sy, sx = _int_pair(stride, "stride")
    if padding < 0:
        raise ValueError("padding must be nonnegative")
    if not kernels:
        raise ValueError("at least one kernel required")
    if len(biases) != len(kernels):
        raise ValueError("one bias per kernel required")
    kh, kw = kernels[0].height, kernels[0].width
    for k in kernels:
        if (k.height, k.width) != (kh, kw):
            raise ValueError("kernels must share spatial extent")
        if k.channels != input.channels:
            raise ValueError(
                f"kernel channels {k.channels} != input channels {input.channels}"
            )
    ph, pw = input.height + 2 * padding, input.width + 2 * padding
    if kh > ph or kw > pw:
        raise ValueError("kernel spatial extent exceeds padded input")

    x = np.pad(input.data, ((padding, padding), (padding, padding), (0, 0)))
    # windows: (i, j, c, a, b) with (a, b) the kernel-window offsets
    win = sliding_window_view(x, (kh, kw), axis=(0, 1))[::sy, ::sx]
    w = np.stack([k.data for k in kernels])  # (k, a, b, c)
    out = np.einsum("ijcab,kabc->ijk", win, w, optimize=True)
    out += np.asarray(biases, dtype=np.float64)
    return Grid3(out)


def max_pool(
    input: Grid3,
    window: int | tuple[int, int],
    stride: int | tuple[int, int],
    padding: int = 0,
) -> Grid3:
    """Per-channel max over sliding windows.

    Padded cells never win: they participate with -inf, so all-negative
    feature maps pool correctly.
    """
    wh, ww = _int_pair(window, "window")
    sy, sx = _int_pair(stride, "stride")
    if padding < 0:
        raise ValueError("padding must be nonnegative")
    ph, pw = input.height + 2 * padding, input.width + 2 * padding
    if wh > ph or ww > pw:
        raise ValueError("window exceeds padded input")
    x = np.pad(
        input.data,
        ((padding, padding), (padding, padding), (0, 0)),
        constant_values=-np.inf,
    )
    win = sliding_window_view(x, (wh, ww), axis=(0, 1))[::sy, ::sx]
    return Grid3(win.max(axis=(3, 4)))


def avg_pool(
    input: Grid3,
    window: int | tuple[int, int],
    stride: int | tuple[int, int],
) -> Grid3:
    """Per-channel arithmetic mean over sliding windows (no padding).

    The window/stride combination must cover the input exactly, with no
    trailing pixels left over.
    """
    wh, ww = _int_pair(window, "window")
    sy, sx = _int_pair(stride, "stride")
    h, w = input.height, input.width
    if wh > h or ww > w:
        raise ValueError("window exceeds input")
    if (h - wh) % sy != 0 or (w - ww) % sx != 0:
        raise ValueError("window/stride combination does not cover the input")
    win = sliding_window_view(input.data, (wh, ww), axis=(0, 1))[::sy, ::sx]
    return Grid3(win.mean(axis=(3, 4)))


def concat_channels(parts: Sequence[Grid3]) -> Grid3:
    """Stack grids channel-wise, in argument order."""
    if not parts:
        raise ValueError("at least one part required")
    h, w = parts[0].height, parts[0].width
    for p in parts:
        if (p.height, p.width) != (h, w):
            raise ValueError("parts must share spatial extent")
    return Grid3(np.concatenate([p.data for p in parts], axis=2))


def bilinear_sample(data: np.ndarray, rows, cols) -> np.ndarray:
    """Sample a 2D array at fractional (row, col) positions.

    Positions are clamped to the border, so out-of-range samples repeat the
    nearest edge value. ``rows`` and ``cols`` broadcast against each other.
    """
    h, w = data.shape
    rows = np.clip(rows, 0.0, h - 1.0)
    cols = np.clip(cols, 0.0, w - 1.0)
    r0 = np.floor(rows).astype(np.intp)
    c0 = np.floor(cols).astype(np.intp)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = rows - r0
    fc = cols - c0
    top = data[r0, c0] * (1.0 - fc) + data[r0, c1] * fc
    bottom = data[r1, c0] * (1.0 - fc) + data[r1, c1] * fc
    return top * (1.0 - fr) + bottom * fr


def _axis_positions(n_in: int, n_out: int) -> np.ndarray:
    # corner-aligned; a single output sample falls on the input center
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))


def resample_bilinear(input: Grid2, out_height: int, out_width: int) -> Grid2:
    """Resize by bilinear interpolation with corner-aligned sampling."""
    if out_height < 1 or out_width < 1:
        raise ValueError("output extent must be positive")
    rows = _axis_positions(input.height, out_height)[:, None]
    cols = _axis_positions(input.width, out_width)[None, :]
    return Grid2(bilinear_sample(input.data, rows, cols))
