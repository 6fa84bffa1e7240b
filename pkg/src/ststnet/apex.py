"""Apex-frame spotting for clips without apex annotation.

Texture change is measured per region of interest as the rate of difference
``1 - d`` between the LBP histogram of the first frame and each later frame,
where ``d`` is the cosine similarity of the two histograms. The region with
the largest mean rate drives a divide-and-conquer search over the frame
interval: bisect, keep the half with the larger mean rate, stop once the
interval has at most three frames, then take the argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FrameSequence
from .grids import Grid2

__all__ = [
    "LbpHistogram",
    "Roi",
    "RoiSet",
    "SpotResult",
    "SpottingError",
    "N_BINS",
    "lbp_code_map",
    "region_histogram",
    "histogram_correlation",
    "difference_rates",
    "dc_search",
    "spot_apex",
    "default_rois",
]

N_BINS = 256

# 8 neighbors clockwise from top-left; bit b set when neighbor_b >= center
_NEIGHBOR_OFFSETS = (
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
    (1, 0),
    (1, -1),
    (0, -1),
)


class SpottingError(ValueError):
    """Spotting cannot proceed (degenerate sequence or empty histogram)."""


@dataclass(frozen=True)
class LbpHistogram:
    """256-bin count histogram of 8-neighbor, radius-1 LBP codes."""

    bins: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.bins, dtype=np.int64)
        if arr.shape != (N_BINS,):
            raise ValueError(f"expected {N_BINS} bins, got shape {arr.shape}")
        if (arr < 0).any():
            raise ValueError("bin counts must be nonnegative")
        object.__setattr__(self, "bins", arr)

    @property
    def total(self) -> int:
        return int(self.bins.sum())


@dataclass(frozen=True)
class Roi:
    """Rectangle in frame coordinates, half-open [row0, row1) x [col0, col1)."""

    name: str
    row0: int
    row1: int
    col0: int
    col1: int

    def validate(self, height: int, width: int) -> None:
        if not (0 <= self.row0 < self.row1 <= height and 0 <= self.col0 < self.col1 <= width):
            raise ValueError(f"region {self.name} outside frame or empty")


@dataclass(frozen=True)
class RoiSet:
    """The three spotting regions: both eye-with-eyebrow boxes and the mouth."""

    left_eye: Roi
    right_eye: Roi
    mouth: Roi

    def __iter__(self):
        return iter((self.left_eye, self.right_eye, self.mouth))

    def validate(self, height: int, width: int) -> None:
        for roi in self:
            roi.validate(height, width)


def default_rois(height: int, width: int) -> RoiSet:
    """Fixed fractional rectangles of a pre-cropped face box."""

    def rect(name, r0, r1, c0, c1):
        return Roi(
            name,
            int(round(r0 * height)),
            int(round(r1 * height)),
            int(round(c0 * width)),
            int(round(c1 * width)),
        )

    return RoiSet(
        left_eye=rect("left_eye", 0.15, 0.45, 0.10, 0.45),
        right_eye=rect("right_eye", 0.15, 0.45, 0.55, 0.90),
        mouth=rect("mouth", 0.60, 0.90, 0.25, 0.75),
    )


def lbp_code_map(frame: Grid2) -> np.ndarray:
    """8-bit LBP code per interior pixel, shape (height-2, width-2).

    Bit b is set when the b-th neighbor (clockwise from top-left) is >= the
    center value.
    """
    if frame.height < 3 or frame.width < 3:
        raise ValueError("frame must be at least 3x3")
    data = frame.data
    center = data[1:-1, 1:-1]
    codes = np.zeros(center.shape, dtype=np.int64)
    for bit, (dy, dx) in enumerate(_NEIGHBOR_OFFSETS):
        neighbor = data[1 + dy : data.shape[0] - 1 + dy, 1 + dx : data.shape[1] - 1 + dx]
        codes |= (neighbor >= center).astype(np.int64) << bit
    return codes


def region_histogram(codes: np.ndarray, roi: Roi) -> LbpHistogram:
    """Histogram of codes whose center pixel lies inside the region.

    ``codes`` is the full-frame interior code map, so code (i, j) belongs to
    frame pixel (i+1, j+1); the region is intersected with the frame
    interior accordingly.
    """
    r0 = max(roi.row0 - 1, 0)
    r1 = min(roi.row1 - 1, codes.shape[0])
    c0 = max(roi.col0 - 1, 0)
    c1 = min(roi.col1 - 1, codes.shape[1])
    if r0 >= r1 or c0 >= c1:
        raise SpottingError(f"region {roi.name} has no interior pixels")
    region = codes[r0:r1, c0:c1]
    return LbpHistogram(np.bincount(region.ravel(), minlength=N_BINS))


def histogram_correlation(h1: LbpHistogram, h2: LbpHistogram) -> float:
    """Cosine similarity of two count histograms, in [0, 1]."""
    a = h1.bins.astype(np.float64)
    b = h2.bins.astype(np.float64)
    denom_sq = (a * a).sum() * (b * b).sum()
    if denom_sq <= 0.0:
        raise SpottingError("correlation undefined for an all-zero histogram")
    return float((a * b).sum() / np.sqrt(denom_sq))


def difference_rates(sequence: FrameSequence, rois: RoiSet) -> np.ndarray:
    """Per-region, per-frame rate of difference against the first frame.

    Returns shape (3, n_frames) in region order (left eye, right eye,
    mouth); the first frame has rate 0 by definition.
    """
    if len(sequence.frames) < 2:
        raise SpottingError("need at least 2 frames for difference rates")
    h, w = sequence.frames[0].height, sequence.frames[0].width
    rois.validate(h, w)
    roi_list = list(rois)
    ref_codes = lbp_code_map(sequence.frames[0])
    ref_hists = [region_histogram(ref_codes, roi) for roi in roi_list]
    rates = np.zeros((len(roi_list), len(sequence.frames)))
    for j, frame in enumerate(sequence.frames[1:], start=1):
        codes = lbp_code_map(frame)
        for r, roi in enumerate(roi_list):
            d = histogram_correlation(ref_hists[r], region_histogram(codes, roi))
            rates[r, j] = 1.0 - d
    return rates


def dc_search(series: np.ndarray, lo: int, hi: int) -> int:
    """Divide-and-conquer argmax over ``series[lo..hi]`` (inclusive).

    Bisects the interval, keeps the half with the larger mean (ties go to
    the earlier half), stops at length <= 3, then returns the index of the
    maximum (earliest on ties).
    """
    if lo > hi:
        raise ValueError("empty search interval")
    while hi - lo + 1 > 3:
        mid = (lo + hi) // 2
        left_mean = float(series[lo : mid + 1].mean())
        right_mean = float(series[mid + 1 : hi + 1].mean())
        if right_mean > left_mean:
            lo = mid + 1
        else:
            hi = mid
    window = series[lo : hi + 1]
    return lo + int(np.argmax(window))


@dataclass(frozen=True)
class SpotResult:
    apex_index: int  # 1-based frame index
    roi_name: str
    no_motion: bool


def spot_apex(sequence: FrameSequence, rois: RoiSet) -> SpotResult:
    """Locate the frame of maximal facial change within [onset, offset].

    Any annotated apex index on the sequence is ignored. A static sequence
    yields the onset index with the ``no_motion`` flag set.
    """
    if len(sequence.frames) < 3:
        raise SpottingError("need at least 3 frames to spot an apex")
    rates = difference_rates(sequence, rois)
    lo = sequence.onset_index - 1
    hi = sequence.offset_index - 1
    span = rates[:, lo : hi + 1]
    roi_means = span.mean(axis=1)
    best_roi = int(np.argmax(roi_means))
    series = rates[best_roi]
    index = dc_search(series, lo, hi)
    return SpotResult(
        apex_index=index + 1,
        roi_name=list(rois)[best_roi].name,
        no_motion=bool(span.max() <= 0.0),
    )
