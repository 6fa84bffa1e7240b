"""Leave-one-subject-out evaluation, confusion accumulation, and the
unweighted metric suite (accuracy, F1, UF1, UAR).

Metrics are computed from confusion counts pooled across folds: UF1 is the
mean of per-class F1 scores, UAR the mean of per-class recalls, F1 the
harmonic mean of macro precision and macro recall. Classes with a zero
denominator contribute 0 to the unweighted means and are flagged.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import apex as apex_mod
from .data import CompositeDataset, EmotionClass
from .flow import FlowCube, FlowParams, build_flow_cube
from .model import NetworkParams, TrainConfig, forward_batch, train

__all__ = [
    "Fold",
    "FoldPlan",
    "ConfusionMatrix",
    "MetricReport",
    "SampleRecord",
    "FoldStat",
    "LosoResult",
    "MetricsError",
    "make_loso_plan",
    "plan_for_subjects",
    "accumulate",
    "metrics",
    "run_loso",
    "run_loso_cubes",
]


class MetricsError(ValueError):
    """Metrics are undefined (empty confusion matrix)."""


@dataclass(frozen=True)
class Fold:
    subject: tuple[str, str]
    train_ids: tuple[int, ...]
    test_ids: tuple[int, ...]


@dataclass(frozen=True)
class FoldPlan:
    folds: tuple[Fold, ...]


def plan_for_subjects(subject_keys: Sequence[tuple[str, str]]) -> FoldPlan:
    """One fold per distinct subject key, ordered by sorted key."""
    if not subject_keys:
        raise ValueError("cannot plan folds over an empty dataset")
    ids_by_subject: dict[tuple[str, str], list[int]] = {}
    for i, key in enumerate(subject_keys):
        ids_by_subject.setdefault(key, []).append(i)
    folds = []
    all_ids = set(range(len(subject_keys)))
    for key in sorted(ids_by_subject):
        test = ids_by_subject[key]
        train_ids = sorted(all_ids.difference(test))
        folds.append(Fold(subject=key, train_ids=tuple(train_ids), test_ids=tuple(test)))
    return FoldPlan(folds=tuple(folds))


def make_loso_plan(dataset: CompositeDataset) -> FoldPlan:
    return plan_for_subjects([s.subject_key for s in dataset.sequences])


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows = true class, columns = predicted class."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.counts, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] < 2:
            raise ValueError(f"expected a square matrix, got shape {arr.shape}")
        if (arr < 0).any():
            raise ValueError("counts must be nonnegative")
        object.__setattr__(self, "counts", arr)

    @classmethod
    def zeros(cls, n_classes: int = 3) -> "ConfusionMatrix":
        return cls(np.zeros((n_classes, n_classes), dtype=np.int64))

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def row_percent(self) -> np.ndarray:
        """Row-normalized recognition rates in percent, two decimals."""
        rows = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            pct = np.where(rows > 0, 100.0 * self.counts / rows, 0.0)
        return np.round(pct, 2)


def accumulate(
    cm: ConfusionMatrix,
    truths: Sequence[EmotionClass | int],
    predictions: Sequence[EmotionClass | int],
) -> ConfusionMatrix:
    """New matrix with (truth, prediction) pairs added to the counts."""
    if len(truths) != len(predictions):
        raise ValueError("truths and predictions must have equal length")
    counts = cm.counts.copy()
    for t, p in zip(truths, predictions):
        counts[int(t), int(p)] += 1
    return ConfusionMatrix(counts)


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class MetricReport:
    scope: str
    accuracy: float
    f1: float
    uf1: float
    uar: float
    per_class: tuple[ClassMetrics, ...]
    degenerate: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "scope": self.scope,
            "accuracy": self.accuracy,
            "f1": self.f1,
            "uf1": self.uf1,
            "uar": self.uar,
            "per_class": [
                {"precision": c.precision, "recall": c.recall, "f1": c.f1}
                for c in self.per_class
            ],
            "degenerate": list(self.degenerate),
        }


def _class_name(index: int, n_classes: int) -> str:
    if n_classes == len(EmotionClass):
        return EmotionClass(index).name.capitalize()
    return f"class{index}"


def metrics(cm: ConfusionMatrix, scope: str = "Full") -> MetricReport:
    """Unweighted metric suite from pooled confusion counts."""
    if cm.total == 0:
        raise MetricsError("metrics undefined for an empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    row = counts.sum(axis=1)
    col = counts.sum(axis=0)
    degenerate = []
    per_class = []
    for a in range(cm.n_classes):
        name = _class_name(a, cm.n_classes)
        if row[a] > 0:
            recall = tp[a] / row[a]
        else:
            recall = 0.0
            degenerate.append(f"{name}: no samples")
        if col[a] > 0:
            precision = tp[a] / col[a]
        else:
            precision = 0.0
            degenerate.append(f"{name}: never predicted")
        f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        per_class.append(ClassMetrics(precision=precision, recall=recall, f1=f1))
    macro_p = float(np.mean([c.precision for c in per_class]))
    macro_r = float(np.mean([c.recall for c in per_class]))
    return MetricReport(
        scope=scope,
        accuracy=float(tp.sum() / counts.sum()),
        f1=2.0 * macro_p * macro_r / (macro_p + macro_r) if macro_p + macro_r > 0 else 0.0,
        uf1=float(np.mean([c.f1 for c in per_class])),
        uar=macro_r,
        per_class=tuple(per_class),
        degenerate=tuple(degenerate),
    )


# ---------------------------------------------------------------------------
# LOSO driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampleRecord:
    dataset: str
    subject: str
    video: str
    truth: EmotionClass
    prediction: EmotionClass
    probabilities: tuple[float, float, float]

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "subject": self.subject,
            "video": self.video,
            "truth": self.truth.token,
            "prediction": self.prediction.token,
            "probabilities": list(self.probabilities),
        }


@dataclass(frozen=True)
class FoldStat:
    subject: tuple[str, str]
    n_train: int
    n_test: int
    seconds: float


@dataclass(frozen=True)
class LosoResult:
    full_report: MetricReport
    db_reports: Mapping[str, MetricReport]
    confusions: Mapping[str, ConfusionMatrix]
    samples: tuple[SampleRecord, ...]
    fold_stats: tuple[FoldStat, ...]

    def to_dict(self) -> dict:
        reports = {"Full": self.full_report.to_dict()}
        reports.update({k: r.to_dict() for k, r in self.db_reports.items()})
        return {
            "reports": reports,
            "confusion": {
                k: {
                    "counts": cm.counts.tolist(),
                    "percent": cm.row_percent().tolist(),
                }
                for k, cm in self.confusions.items()
            },
            "samples": [s.to_dict() for s in self.samples],
            "folds": [
                {
                    "subject": "/".join(f.subject),
                    "n_train": f.n_train,
                    "n_test": f.n_test,
                    "seconds": f.seconds,
                }
                for f in self.fold_stats
            ],
        }


def _run_fold(args) -> tuple[int, list[int], list[list[float]], float]:
    fold_index, train_cubes, test_cubes, config = args
    started = time.perf_counter()
    result = train(train_cubes, config)
    probs, _ = forward_batch(result.params, np.stack([c.data.data for c in test_cubes]))
    preds = probs.argmax(axis=1)
    return fold_index, preds.tolist(), probs.tolist(), time.perf_counter() - started


def run_loso_cubes(
    cubes: Sequence[FlowCube],
    train_config: TrainConfig,
    base_seed: int = 0,
    workers: int = 1,
    max_folds: int | None = None,
    progress: Callable[[str], None] | None = None,
) -> LosoResult:
    """LOSO over prebuilt cubes: one training run per held-out subject.

    The fold seed is ``base_seed + fold ordinal`` and fold outputs reduce
    in plan order, so results do not depend on the worker count.
    """
    subject_keys = [(c.dataset_id, c.subject_id) for c in cubes]
    plan = plan_for_subjects(subject_keys)
    folds = plan.folds[:max_folds] if max_folds is not None else plan.folds
    tasks = []
    for i, fold in enumerate(folds):
        config = TrainConfig(
            learning_rate=train_config.learning_rate,
            max_epochs=train_config.max_epochs,
            batch_size=train_config.batch_size,
            seed=base_seed + i,
            optimizer=train_config.optimizer,
        )
        tasks.append(
            (i, [cubes[j] for j in fold.train_ids], [cubes[j] for j in fold.test_ids], config)
        )
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_fold, tasks))
    else:
        outcomes = [_run_fold(t) for t in tasks]
    outcomes.sort(key=lambda o: o[0])

    pooled = ConfusionMatrix.zeros(len(EmotionClass))
    by_db: dict[str, ConfusionMatrix] = {}
    samples = []
    stats = []
    for fold, (index, preds, probs, seconds) in zip(folds, outcomes):
        truths = [cubes[j].label for j in fold.test_ids]
        predictions = [EmotionClass(p) for p in preds]
        pooled = accumulate(pooled, truths, predictions)
        for j, pred, prob in zip(fold.test_ids, predictions, probs):
            cube = cubes[j]
            db = cube.dataset_id
            by_db[db] = accumulate(
                by_db.get(db, ConfusionMatrix.zeros(len(EmotionClass))),
                [cube.label],
                [pred],
            )
            samples.append(
                SampleRecord(
                    dataset=db,
                    subject=cube.subject_id,
                    video=cube.video_id,
                    truth=cube.label,
                    prediction=pred,
                    probabilities=tuple(prob),
                )
            )
        stats.append(
            FoldStat(
                subject=fold.subject,
                n_train=len(fold.train_ids),
                n_test=len(fold.test_ids),
                seconds=seconds,
            )
        )
        if progress is not None:
            progress(f"fold {index + 1}/{len(folds)} ({'/'.join(fold.subject)}) done")
    confusions = {"Full": pooled, **{k: by_db[k] for k in sorted(by_db)}}
    return LosoResult(
        full_report=metrics(pooled, scope="Full"),
        db_reports={k: metrics(by_db[k], scope=k) for k in sorted(by_db)},
        confusions=confusions,
        samples=tuple(samples),
        fold_stats=tuple(stats),
    )


def run_loso(
    dataset: CompositeDataset,
    flow_params: FlowParams | None = None,
    train_config: TrainConfig | None = None,
    base_seed: int = 0,
    workers: int = 1,
) -> LosoResult:
    """Full LOSO from raw sequences: spot missing apexes, build cubes, train.

    Sequences with annotated apex frames bypass spotting.
    """
    cubes = []
    for seq in dataset.sequences:
        if seq.apex_index is not None:
            apex_index = seq.apex_index
        else:
            rois = apex_mod.default_rois(seq.frames[0].height, seq.frames[0].width)
            apex_index = apex_mod.spot_apex(seq, rois).apex_index
        cubes.append(build_flow_cube(seq, apex_index, flow_params))
    return run_loso_cubes(
        cubes, train_config or TrainConfig(), base_seed=base_seed, workers=workers
    )
