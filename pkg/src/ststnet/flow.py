"""Dense optical flow between onset and apex frames, the derived strain
field, and assembly of the normalized 28x28x3 network input cube.

The flow solver minimizes a total-variation-regularized L1 data-fidelity
energy with the duality-based fixed-point scheme: an auxiliary field is
updated in closed form by thresholding the linearized brightness residual,
then re-coupled to the flow through a dual-variable projection step, all
inside a warping loop on a coarse-to-fine pyramid. Axis convention:
``u`` is horizontal (columns, x), ``v`` is vertical (rows, y).
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from .data import EmotionClass, FrameSequence
from .grids import Grid2, Grid3, bilinear_sample, resample_bilinear

__all__ = [
    "FlowParams",
    "FlowField",
    "StrainField",
    "FlowCube",
    "DegenerateClipError",
    "CacheFormatError",
    "CUBE_SIZE",
    "estimate_flow",
    "optical_strain",
    "build_flow_cube",
    "write_cube_cache",
    "read_cube_cache",
]

CUBE_SIZE = 28

_CACHE_MAGIC = b"STST"
_CACHE_VERSION = 1


class DegenerateClipError(ValueError):
    """Onset and apex coincide, so the flow carries no class signal."""


class CacheFormatError(ValueError):
    """Cube cache file is corrupt, truncated, or from another version."""


@dataclass(frozen=True)
class FlowParams:
    """Solver configuration; all fields deterministic knobs."""

    data_weight: float = 0.15  # weight of the L1 data term
    coupling: float = 0.3  # tightness between flow and auxiliary field
    dual_step: float = 0.25  # time step of the dual projection
    warps: int = 5
    inner_iters: int = 50
    levels: int = 3
    scale: float = 0.5
    stop_tol: float = 1e-4  # mean squared update that counts as converged

    def validate(self) -> None:
        if self.data_weight <= 0 or self.coupling <= 0 or self.dual_step <= 0:
            raise ValueError("flow weights must be positive")
        if self.warps < 1 or self.inner_iters < 1 or self.levels < 1:
            raise ValueError("iteration counts must be positive")
        if not (0.0 < self.scale < 1.0):
            raise ValueError("pyramid scale must lie in (0, 1)")


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacement between two frames, in pixels."""

    u: Grid2
    v: Grid2
    converged: bool = True

    def __post_init__(self) -> None:
        if (self.u.height, self.u.width) != (self.v.height, self.v.width):
            raise ValueError("u and v must share extents")


@dataclass(frozen=True)
class StrainField:
    """Symmetric gradient tensor of a flow field plus its magnitude."""

    exx: Grid2
    eyy: Grid2
    exy: Grid2
    eyx: Grid2
    magnitude: Grid2


@dataclass(frozen=True)
class FlowCube:
    """Normalized (u, v, strain) stack ready for the classifier."""

    data: Grid3
    label: EmotionClass
    subject_key: str  # "dataset/subject/video"
    channel_ranges: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        if self.data.channels != 3:
            raise ValueError("cube must have exactly 3 channels")
        if len(self.channel_ranges) != 3:
            raise ValueError("one (min, max) pair per channel required")

    @property
    def dataset_id(self) -> str:
        return self.subject_key.split("/", 2)[0]

    @property
    def subject_id(self) -> str:
        return self.subject_key.split("/", 2)[1]

    @property
    def video_id(self) -> str:
        return self.subject_key.split("/", 2)[2]


# ---------------------------------------------------------------------------
# TV-L1 solver internals
# ---------------------------------------------------------------------------

def _gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = max(1, int(round(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    from numpy.lib.stride_tricks import sliding_window_view

    k = _gaussian_kernel1d(sigma)
    r = len(k) // 2
    p = np.pad(img, ((r, r), (0, 0)), mode="reflect")
    img = np.einsum("ijw,w->ij", sliding_window_view(p, len(k), axis=0), k)
    p = np.pad(img, ((0, 0), (r, r)), mode="reflect")
    return np.einsum("ijw,w->ij", sliding_window_view(p, len(k), axis=1), k)


def _resize(img: np.ndarray, h: int, w: int) -> np.ndarray:
    return resample_bilinear(Grid2(img), h, w).data


def _forward_grad(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    gx = np.zeros_like(a)
    gy = np.zeros_like(a)
    gx[:, :-1] = a[:, 1:] - a[:, :-1]
    gy[:-1, :] = a[1:, :] - a[:-1, :]
    return gx, gy


def _divergence(px: np.ndarray, py: np.ndarray) -> np.ndarray:
    div = np.zeros_like(px)
    div[:, 0] += px[:, 0]
    div[:, 1:-1] += px[:, 1:-1] - px[:, :-2]
    div[:, -1] -= px[:, -2]
    div[0, :] += py[0, :]
    div[1:-1, :] += py[1:-1, :] - py[:-2, :]
    div[-1, :] -= py[-2, :]
    return div


def _tvl1_level(
    i0: np.ndarray,
    i1: np.ndarray,
    u: np.ndarray,
    v: np.ndarray,
    params: FlowParams,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Run the warping + fixed-point iterations at one pyramid level.

    Returns the refined flow and the last mean-squared update (the
    convergence residual of the final inner loop).
    """
    h, w = i0.shape
    lt = params.data_weight * params.coupling
    step = params.dual_step / params.coupling
    rows = np.arange(h, dtype=np.float64)[:, None] * np.ones((1, w))
    cols = np.ones((h, 1)) * np.arange(w, dtype=np.float64)[None, :]
    i1y, i1x = np.gradient(i1)
    # dual fields: one 2-vector field per flow component
    p = np.zeros((2, 2, h, w))
    err = np.inf
    for _ in range(params.warps):
        ys, xs = rows + v, cols + u
        i1w = bilinear_sample(i1, ys, xs)
        i1wx = bilinear_sample(i1x, ys, xs)
        i1wy = bilinear_sample(i1y, ys, xs)
        grad_sq = i1wx * i1wx + i1wy * i1wy
        safe_grad = np.maximum(grad_sq, 1e-12)
        rho_const = i1w - i1wx * u - i1wy * v - i0
        for _ in range(params.inner_iters):
            rho = rho_const + i1wx * u + i1wy * v
            th = lt * grad_sq
            scale = np.where(
                rho < -th, lt, np.where(rho > th, -lt, -rho / safe_grad)
            )
            aux_u = u + scale * i1wx
            aux_v = v + scale * i1wy
            new_u = aux_u + params.coupling * _divergence(p[0, 0], p[0, 1])
            new_v = aux_v + params.coupling * _divergence(p[1, 0], p[1, 1])
            for comp, field in ((0, new_u), (1, new_v)):
                gx, gy = _forward_grad(field)
                den = 1.0 + step * np.sqrt(gx * gx + gy * gy)
                p[comp, 0] = (p[comp, 0] + step * gx) / den
                p[comp, 1] = (p[comp, 1] + step * gy) / den
            err = float(np.mean((new_u - u) ** 2 + (new_v - v) ** 2))
            u, v = new_u, new_v
            if err < params.stop_tol:
                break
    return u, v, err


def estimate_flow(onset: Grid2, apex: Grid2, params: FlowParams | None = None) -> FlowField:
    """Dense displacement field carrying onset-frame content to the apex.

    Both frames are jointly rescaled to [0, 255] before solving, so the
    default weights behave identically for any positive intensity scaling
    of the input pair.
    """
    params = params or FlowParams()
    params.validate()
    if (onset.height, onset.width) != (apex.height, apex.width):
        raise ValueError("onset and apex frames must share extents")
    i0 = onset.data
    i1 = apex.data
    lo = min(i0.min(), i1.min())
    hi = max(i0.max(), i1.max())
    if hi - lo <= 1e-12:
        zero = Grid2(np.zeros_like(i0))
        return FlowField(u=zero, v=zero, converged=True)
    i0 = (i0 - lo) * (255.0 / (hi - lo))
    i1 = (i1 - lo) * (255.0 / (hi - lo))
    i0 = _blur(i0, 0.8)
    i1 = _blur(i1, 0.8)

    # pyramid sizes, finest first; stop shrinking below a workable extent
    shapes = [(onset.height, onset.width)]
    for _ in range(1, params.levels):
        h = int(round(shapes[-1][0] * params.scale))
        w = int(round(shapes[-1][1] * params.scale))
        if min(h, w) < 12:
            break
        shapes.append((h, w))
    pyr0, pyr1 = [i0], [i1]
    for h, w in shapes[1:]:
        pyr0.append(_resize(_blur(pyr0[-1], 1.0), h, w))
        pyr1.append(_resize(_blur(pyr1[-1], 1.0), h, w))

    u = np.zeros(shapes[-1])
    v = np.zeros(shapes[-1])
    err = 0.0
    for level in range(len(shapes) - 1, -1, -1):
        h, w = shapes[level]
        if u.shape != (h, w):
            prev_h, prev_w = u.shape
            u = _resize(u, h, w) * (w / prev_w)
            v = _resize(v, h, w) * (h / prev_h)
        u, v, err = _tvl1_level(pyr0[level], pyr1[level], u, v, params)
    converged = err <= params.stop_tol
    if not converged:
        warnings.warn(
            f"flow solver stopped at residual {err:.3g} > {params.stop_tol:.3g}",
            RuntimeWarning,
            stacklevel=2,
        )
    return FlowField(u=Grid2(u), v=Grid2(v), converged=converged)


# ---------------------------------------------------------------------------
# Optical strain
# ---------------------------------------------------------------------------

def optical_strain(flow: FlowField) -> StrainField:
    """Symmetric gradient tensor of the displacement field.

    Derivatives use central differences in the interior and one-sided
    differences at the borders. The magnitude is the root sum of squares of
    all four tensor entries, so a simple shear u = a*y has magnitude
    a / sqrt(2).
    """
    if flow.u.height < 2 or flow.u.width < 2:
        raise ValueError("flow extents must be at least 2x2")
    du_dy, du_dx = np.gradient(flow.u.data)
    dv_dy, dv_dx = np.gradient(flow.v.data)
    exx = du_dx
    eyy = dv_dy
    exy = 0.5 * (du_dy + dv_dx)
    magnitude = np.sqrt(exx * exx + eyy * eyy + 2.0 * exy * exy)
    return StrainField(
        exx=Grid2(exx),
        eyy=Grid2(eyy),
        exy=Grid2(exy),
        eyx=Grid2(exy.copy()),
        magnitude=Grid2(magnitude),
    )


# ---------------------------------------------------------------------------
# Cube assembly
# ---------------------------------------------------------------------------

def _normalize_channel(arr: np.ndarray, what: str) -> tuple[np.ndarray, float, float]:
    lo = float(arr.min())
    hi = float(arr.max())
    if hi - lo <= 1e-12:
        warnings.warn(f"constant {what} channel normalized to 0.5", RuntimeWarning, stacklevel=3)
        return np.full_like(arr, 0.5), lo, hi
    return (arr - lo) / (hi - lo), lo, hi


def build_flow_cube(
    sequence: FrameSequence,
    spotted_apex: int,
    flow_params: FlowParams | None = None,
) -> FlowCube:
    """Flow + strain features for one clip, resampled and normalized.

    The onset->apex flow components and the strain magnitude are each
    bilinearly resampled to 28x28, then min-max normalized to [0, 1] with
    the per-channel ranges recorded for invertibility.
    """
    if not (1 <= spotted_apex <= len(sequence.frames)):
        raise ValueError(f"apex index {spotted_apex} outside sequence")
    if spotted_apex == sequence.onset_index:
        raise DegenerateClipError(
            f"{'/'.join(sequence.video_key)}: apex equals onset, no motion to encode"
        )
    field = estimate_flow(
        sequence.frame_at(sequence.onset_index),
        sequence.frame_at(spotted_apex),
        flow_params,
    )
    strain = optical_strain(field)
    channels = []
    ranges = []
    for grid, name in ((field.u, "u"), (field.v, "v"), (strain.magnitude, "strain")):
        small = resample_bilinear(grid, CUBE_SIZE, CUBE_SIZE).data
        normalized, lo, hi = _normalize_channel(small, name)
        channels.append(normalized)
        ranges.append((lo, hi))
    return FlowCube(
        data=Grid3(np.stack(channels, axis=2)),
        label=sequence.label,
        subject_key="/".join(sequence.video_key),
        channel_ranges=tuple(ranges),
    )


# ---------------------------------------------------------------------------
# Cube cache (the contract between preprocessing and training)
# ---------------------------------------------------------------------------

def write_cube_cache(path: str | Path, cubes: Sequence[FlowCube]) -> None:
    """Binary cache: magic ``STST``, version byte, then per record the
    subject key (u16 length + UTF-8 bytes), label byte, three (min, max)
    float64 pairs, and 28x28x3 float64 values, row-major channel-last."""
    with Path(path).open("wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(bytes([_CACHE_VERSION]))
        for cube in cubes:
            key = cube.subject_key.encode("utf-8")
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(bytes([int(cube.label)]))
            for lo, hi in cube.channel_ranges:
                fh.write(struct.pack("<dd", lo, hi))
            fh.write(cube.data.data.astype("<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CacheFormatError("truncated cube cache")
    return buf


def read_cube_cache(path: str | Path) -> list[FlowCube]:
    with Path(path).open("rb") as fh:
        if fh.read(len(_CACHE_MAGIC)) != _CACHE_MAGIC:
            raise CacheFormatError("not a cube cache (bad magic bytes)")
        version = fh.read(1)
        if len(version) != 1:
            raise CacheFormatError("truncated cube cache")
        if version[0] != _CACHE_VERSION:
            raise CacheFormatError(
                f"cube cache version {version[0]} not supported (expected {_CACHE_VERSION})"
            )
        cubes = []
        while True:
            head = fh.read(2)
            if not head:
                return cubes
            if len(head) != 2:
                raise CacheFormatError("truncated cube cache")
            (key_len,) = struct.unpack("<H", head)
            key = _read_exact(fh, key_len).decode("utf-8")
            label = EmotionClass(_read_exact(fh, 1)[0])
            ranges = tuple(
                struct.unpack("<dd", _read_exact(fh, 16)) for _ in range(3)
            )
            raw = _read_exact(fh, CUBE_SIZE * CUBE_SIZE * 3 * 8)
            values = np.frombuffer(raw, dtype="<f8").reshape(CUBE_SIZE, CUBE_SIZE, 3)
            cubes.append(
                FlowCube(
                    data=Grid3(values.copy()),
                    label=label,
                    subject_key=key,
                    channel_ranges=ranges,
                )
            )
