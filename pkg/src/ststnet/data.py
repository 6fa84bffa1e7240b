"""Micro-expression clip data model, annotation/frame I/O, and the seeded
synthetic corpus generator used for desk-scale verification.

Annotations travel as a single CSV with header
``dataset,subject,video,onset,apex,offset,label`` (apex empty when unknown,
indices 1-based). Frames live under
``<frames_root>/<dataset>/<subject>/<video>/<index>.<ext>`` as 8-bit
grayscale or RGB images, sorted numerically.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from PIL import Image

from .grids import Grid2, bilinear_sample

__all__ = [
    "DatasetId",
    "EmotionClass",
    "FrameSequence",
    "CompositeDataset",
    "SynthSpec",
    "ClipTruth",
    "AnnotationError",
    "FrameLoadError",
    "ANNOTATION_HEADER",
    "V_CHANNEL_SEPARATION",
    "crop_and_gray",
    "load_dataset",
    "save_dataset",
    "generate_synthetic",
    "render_motion_clip",
]

ANNOTATION_HEADER = ["dataset", "subject", "video", "onset", "apex", "offset", "label"]

# Designed lower bound on |mean(v-channel)| separation between a Positive
# and a Negative synthetic clip after per-channel normalization.
V_CHANNEL_SEPARATION = 0.15


class AnnotationError(ValueError):
    """Annotation file is malformed or violates sequence invariants."""


class FrameLoadError(OSError):
    """A referenced frame is missing or not an 8-bit image."""


class DatasetId(str, Enum):
    SMIC = "SMIC"
    CASME2 = "CASME2"
    SAMM = "SAMM"
    SYNTH = "SYNTH"


class EmotionClass(IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    SURPRISE = 2

    @classmethod
    def from_token(cls, token: str) -> "EmotionClass":
        try:
            return _LABEL_TOKENS[token.strip().lower()]
        except KeyError:
            raise AnnotationError(f"unknown label token {token!r}") from None

    @property
    def token(self) -> str:
        return self.name.lower()


_LABEL_TOKENS = {
    "negative": EmotionClass.NEGATIVE,
    "positive": EmotionClass.POSITIVE,
    "surprise": EmotionClass.SURPRISE,
}


@dataclass(frozen=True)
class FrameSequence:
    """One clip: ordered grayscale frames plus its annotation.

    Frame indices (onset/apex/offset) are 1-based, matching the annotation
    convention; ``frame_at`` converts at the boundary.
    """

    dataset_id: DatasetId
    subject_id: str
    video_id: str
    frames: tuple[Grid2, ...]
    onset_index: int
    offset_index: int
    apex_index: int | None
    label: EmotionClass

    def validate(self) -> None:
        n = len(self.frames)
        if n == 0:
            raise AnnotationError("sequence has no frames")
        if not (1 <= self.onset_index <= self.offset_index <= n):
            raise AnnotationError(
                f"need 1 <= onset ({self.onset_index}) <= offset "
                f"({self.offset_index}) <= frame count ({n})"
            )
        if self.apex_index is not None and not (
            self.onset_index <= self.apex_index <= self.offset_index
        ):
            raise AnnotationError(
                f"apex {self.apex_index} outside "
                f"[{self.onset_index}, {self.offset_index}]"
            )
        h, w = self.frames[0].height, self.frames[0].width
        for f in self.frames:
            if (f.height, f.width) != (h, w):
                raise AnnotationError("frames must share one resolution")

    def frame_at(self, index_1based: int) -> Grid2:
        return self.frames[index_1based - 1]

    @property
    def subject_key(self) -> tuple[str, str]:
        return (self.dataset_id.value, self.subject_id)

    @property
    def video_key(self) -> tuple[str, str, str]:
        return (self.dataset_id.value, self.subject_id, self.video_id)


@dataclass(frozen=True)
class CompositeDataset:
    """A merged set of sequences; subject identity is (dataset, subject)."""

    sequences: tuple[FrameSequence, ...]
    truths: Mapping[tuple[str, str, str], "ClipTruth"] | None = None

    @property
    def subjects(self) -> tuple[tuple[str, str], ...]:
        return tuple(sorted({s.subject_key for s in self.sequences}))

    def class_counts(self) -> dict[EmotionClass, int]:
        counts = {c: 0 for c in EmotionClass}
        for s in self.sequences:
            counts[s.label] += 1
        return counts


def crop_and_gray(frame: np.ndarray) -> Grid2:
    """Normalize an 8-bit image buffer to a grayscale grid in [0, 1].

    Three-channel input is converted with ITU-R 601 luma weights.
    """
    arr = np.asarray(frame)
    if arr.dtype != np.uint8:
        raise FrameLoadError(f"8-bit input required, got dtype {arr.dtype}")
    if arr.ndim == 2:
        return Grid2(arr.astype(np.float64) / 255.0)
    if arr.ndim == 3 and arr.shape[2] == 3:
        rgb = arr.astype(np.float64) / 255.0
        return Grid2(0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2])
    raise FrameLoadError(f"unsupported channel layout, shape {arr.shape}")


def _load_frame(path: Path) -> Grid2:
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "RGB"):
                raise FrameLoadError(f"unsupported image mode {img.mode!r}: {path}")
            return crop_and_gray(np.asarray(img))
    except FileNotFoundError:
        raise FrameLoadError(f"missing frame file: {path}") from None


def _frame_files(video_dir: Path) -> list[Path]:
    if not video_dir.is_dir():
        raise FrameLoadError(f"missing frame directory: {video_dir}")
    files = []
    for p in sorted(video_dir.iterdir()):
        if not p.is_file():
            continue
        try:
            order = int(p.stem)
        except ValueError:
            raise FrameLoadError(f"frame file not numerically named: {p}") from None
        files.append((order, p))
    if not files:
        raise FrameLoadError(f"no frame files in: {video_dir}")
    files.sort(key=lambda t: t[0])
    return [p for _, p in files]


def _parse_index(text: str, what: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise AnnotationError(f"{what} is not an integer: {text!r}") from None
    if value < 1:
        raise AnnotationError(f"{what} must be >= 1, got {value}")
    return value


def load_dataset(annotation_path: str | Path, frames_root: str | Path) -> CompositeDataset:
    """Load a composite dataset from an annotation CSV plus frame directories.

    Rows violating sequence invariants are rejected with row-numbered
    diagnostics. A zero-byte annotation file yields an empty dataset.
    """
    annotation_path = Path(annotation_path)
    frames_root = Path(frames_root)
    text = annotation_path.read_text(encoding="utf-8")
    if not text.strip():
        return CompositeDataset(sequences=())
    rows = list(csv.reader(text.splitlines()))
    if rows[0] != ANNOTATION_HEADER:
        raise AnnotationError(
            f"bad header {rows[0]!r}, expected {','.join(ANNOTATION_HEADER)}"
        )
    sequences = []
    for row_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            if len(row) != len(ANNOTATION_HEADER):
                raise AnnotationError(f"expected {len(ANNOTATION_HEADER)} fields")
            ds_token, subject, video, onset_s, apex_s, offset_s, label_s = row
            try:
                dataset_id = DatasetId(ds_token)
            except ValueError:
                raise AnnotationError(f"unknown dataset token {ds_token!r}") from None
            seq = FrameSequence(
                dataset_id=dataset_id,
                subject_id=subject,
                video_id=video,
                frames=tuple(
                    _load_frame(p)
                    for p in _frame_files(frames_root / ds_token / subject / video)
                ),
                onset_index=_parse_index(onset_s, "onset"),
                offset_index=_parse_index(offset_s, "offset"),
                apex_index=_parse_index(apex_s, "apex") if apex_s.strip() else None,
                label=EmotionClass.from_token(label_s),
            )
            seq.validate()
        except (AnnotationError, FrameLoadError) as exc:
            raise type(exc)(f"row {row_no}: {exc}") from None
        sequences.append(seq)
    return CompositeDataset(sequences=tuple(sequences))


def save_dataset(
    dataset: CompositeDataset,
    annotation_path: str | Path,
    frames_root: str | Path,
    blank_apex: bool = False,
) -> None:
    """Write annotation CSV and per-video frame directories (8-bit PNG).

    ``blank_apex`` drops apex indices from the CSV, mimicking a corpus
    without apex annotations so the spotting stage has work to do.
    """
    annotation_path = Path(annotation_path)
    frames_root = Path(frames_root)
    annotation_path.parent.mkdir(parents=True, exist_ok=True)
    with annotation_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ANNOTATION_HEADER)
        for seq in dataset.sequences:
            apex = "" if (blank_apex or seq.apex_index is None) else str(seq.apex_index)
            writer.writerow(
                [
                    seq.dataset_id.value,
                    seq.subject_id,
                    seq.video_id,
                    str(seq.onset_index),
                    apex,
                    str(seq.offset_index),
                    seq.label.token,
                ]
            )
            video_dir = frames_root / seq.dataset_id.value / seq.subject_id / seq.video_id
            video_dir.mkdir(parents=True, exist_ok=True)
            for i, frame in enumerate(seq.frames, start=1):
                img = Image.fromarray(
                    np.round(frame.data * 255.0).astype(np.uint8), mode="L"
                )
                img.save(video_dir / f"{i:03d}.png")


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic corpus generator."""

    seed: int = 0
    subjects: int = 3
    clips_per_subject: int = 4
    frames: int = 18
    height: int = 64
    width: int = 64

    def validate(self) -> None:
        if self.subjects < 1 or self.clips_per_subject < 1:
            raise ValueError("subject and clip counts must be positive")
        if self.frames < 6:
            raise ValueError("at least 6 frames per clip required")
        if self.height < 16 or self.width < 16:
            raise ValueError("frame extent must be at least 16x16")


@dataclass(frozen=True)
class ClipTruth:
    """Ground truth recorded by the generator for oracle use."""

    apex_index: int
    displacement_u: np.ndarray
    displacement_v: np.ndarray
    amplitude: float


_DECAY_FLOOR = 0.45  # motion keeps this fraction of peak at the offset frame


def _gauss2d(h: int, w: int, cy: float, cx: float, sy: float, sx: float) -> np.ndarray:
    y = np.arange(h, dtype=np.float64)[:, None]
    x = np.arange(w, dtype=np.float64)[None, :]
    return np.exp(-0.5 * (((y - cy) / sy) ** 2 + ((x - cx) / sx) ** 2))


def _base_texture(h: int, w: int, rng: np.random.Generator) -> Grid2:
    y = np.arange(h, dtype=np.float64)[:, None]
    x = np.arange(w, dtype=np.float64)[None, :]
    tex = np.zeros((h, w))
    for _ in range(6):
        wavelength = rng.uniform(7.0, 18.0)
        angle = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        fx, fy = np.cos(angle) / wavelength, np.sin(angle) / wavelength
        tex += amp * np.sin(2.0 * np.pi * (fx * x + fy * y) + phase)
    tex = (tex - tex.min()) / (tex.max() - tex.min())
    # faint eye/mouth blobs give the base a face-like structure
    face = (
        _gauss2d(h, w, 0.30 * h, 0.275 * w, 0.05 * h, 0.07 * w)
        + _gauss2d(h, w, 0.30 * h, 0.725 * w, 0.05 * h, 0.07 * w)
        + _gauss2d(h, w, 0.75 * h, 0.50 * w, 0.05 * h, 0.12 * w)
    )
    base = 0.15 + 0.7 * (0.8 * tex + 0.2 * (1.0 - np.clip(face, 0.0, 1.0)))
    return Grid2(np.round(base * 255.0) / 255.0)


def _class_displacement(
    label: EmotionClass, h: int, w: int, amplitude: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Per-class displacement field, scaled so the peak magnitude = amplitude.

    Negative converges toward the face center, Positive moves the mouth
    region up and outward, Surprise dilates the face vertically. The three
    patterns are linearly separable in (mean v, mean du/dx, mean dv/dy).
    """
    y = np.arange(h, dtype=np.float64)[:, None]
    x = np.arange(w, dtype=np.float64)[None, :]
    jy = rng.uniform(-0.02, 0.02) * h
    jx = rng.uniform(-0.02, 0.02) * w
    if label is EmotionClass.NEGATIVE:
        cy, cx = 0.50 * h + jy, 0.50 * w + jx
        env = _gauss2d(h, w, cy, cx, 0.30 * h, 0.30 * w)
        du = -((x - cx) / (0.5 * w)) * env
        dv = -((y - cy) / (0.5 * h)) * env
    elif label is EmotionClass.POSITIVE:
        cy, cx = 0.75 * h + jy, 0.50 * w + jx
        env = _gauss2d(h, w, cy, cx, 0.10 * h, 0.16 * w)
        du = 0.5 * ((x - cx) / (0.25 * w)) * env
        dv = -env
    else:  # SURPRISE
        cy, cx = 0.50 * h + jy, 0.50 * w + jx
        env = _gauss2d(h, w, cy, cx, 0.32 * h, 0.28 * w)
        du = 0.15 * ((x - cx) / (0.5 * w)) * env
        dv = ((y - cy) / (0.5 * h)) * env
    peak = max(np.abs(du).max(), np.abs(dv).max())
    scale = amplitude / peak
    return du * scale, dv * scale


def _motion_ramp(n_frames: int, apex: int) -> np.ndarray:
    """Deformation magnitude per frame: cubic rise to 1 at the apex, then a
    linear decay to the floor. The largest frame-to-frame step is the one
    into the apex."""
    j = np.arange(1, n_frames + 1, dtype=np.float64)
    rise = ((j - 1) / (apex - 1)) ** 3
    decay = 1.0 - (1.0 - _DECAY_FLOOR) * (j - apex) / (n_frames - apex)
    return np.where(j <= apex, rise, decay)


def _bisection_lands_on_argmax(series: np.ndarray, rel_margin: float = 0.05) -> bool:
    """True when mean-keeping interval bisection reaches the series argmax
    with the given relative margin at every split (robustness to the
    monotone distortion between deformation magnitude and measured rates)."""
    lo, hi = 0, len(series) - 1
    target = int(np.argmax(series))
    while hi - lo + 1 > 3:
        mid = (lo + hi) // 2
        left = float(series[lo : mid + 1].mean())
        right = float(series[mid + 1 : hi + 1].mean())
        if abs(left - right) < rel_margin * max(left, right):
            return False
        if right > left:
            lo = mid + 1
        else:
            hi = mid
    window = series[lo : hi + 1]
    return lo + int(np.argmax(window)) == target


def _pick_apex(n_frames: int, rng: np.random.Generator) -> int:
    lower = n_frames // 2 + 2
    upper = min(int(0.75 * n_frames), n_frames - 1)
    candidates = [a for a in range(lower, upper + 1)]
    if not candidates:
        candidates = [max(2, min(n_frames - 1, lower))]
    rng.shuffle(candidates)
    for apex in candidates:
        if _bisection_lands_on_argmax(_motion_ramp(n_frames, apex)):
            return apex
    return candidates[0]


def render_motion_clip(
    base: Grid2,
    displacement_u: np.ndarray,
    displacement_v: np.ndarray,
    ramp: Iterable[float],
) -> tuple[Grid2, ...]:
    """Warp a base texture by a displacement field scaled per frame.

    Frame ``j`` shows the base content shifted by ``ramp[j] * (du, dv)``;
    pixel values are quantized to 8-bit levels so in-memory clips match
    their on-disk round trip exactly.
    """
    h, w = base.height, base.width
    rows = np.arange(h, dtype=np.float64)[:, None] * np.ones((1, w))
    cols = np.ones((h, 1)) * np.arange(w, dtype=np.float64)[None, :]
    frames = []
    for m in ramp:
        sampled = bilinear_sample(base.data, rows - m * displacement_v, cols - m * displacement_u)
        frames.append(Grid2(np.round(sampled * 255.0) / 255.0))
    return tuple(frames)


def generate_synthetic(spec: SynthSpec) -> CompositeDataset:
    """Deterministic synthetic corpus with recorded ground truth.

    Each clip warps a smooth per-subject face texture with a class-dependent
    localized motion pattern whose magnitude ramps from onset to a known
    apex and decays toward the offset. Labels cycle through the three
    classes per subject.
    """
    spec.validate()
    sequences = []
    truths: dict[tuple[str, str, str], ClipTruth] = {}
    for s in range(spec.subjects):
        subject_id = f"s{s + 1:02d}"
        base = _base_texture(spec.height, spec.width, np.random.default_rng([spec.seed, s]))
        for k in range(spec.clips_per_subject):
            rng = np.random.default_rng([spec.seed, s, k])
            label = EmotionClass(k % 3)
            amplitude = rng.uniform(2.0, 2.6)
            apex = _pick_apex(spec.frames, rng)
            du, dv = _class_displacement(label, spec.height, spec.width, amplitude, rng)
            frames = render_motion_clip(base, du, dv, _motion_ramp(spec.frames, apex))
            video_id = f"{subject_id}_c{k + 1:02d}"
            seq = FrameSequence(
                dataset_id=DatasetId.SYNTH,
                subject_id=subject_id,
                video_id=video_id,
                frames=frames,
                onset_index=1,
                offset_index=spec.frames,
                apex_index=apex,
                label=label,
            )
            seq.validate()
            sequences.append(seq)
            truths[seq.video_key] = ClipTruth(
                apex_index=apex,
                displacement_u=du,
                displacement_v=dv,
                amplitude=amplitude,
            )
    return CompositeDataset(sequences=tuple(sequences), truths=truths)
