"""INI run configuration: typed sections, strict key validation, hashing.

Sections and keys:

    [data]   annotation, frames_root
    [synth]  seed, subjects, clips_per_subject, frames, height, width
    [flow]   data_weight, coupling, dual_step, warps, inner_iters, levels,
             scale, stop_tol
    [train]  lr, epochs, batch, seed, optimizer
    [eval]   seed, workers
    [out]    dir

Unknown sections or keys are rejected before any compute starts. The config
hash covers everything except worker count and output paths, so results
files are comparable across machines and worker counts.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .data import SynthSpec
from .flow import FlowParams
from .model import TrainConfig

__all__ = ["ConfigError", "DataPaths", "EvalSettings", "RunConfig", "load_config"]


class ConfigError(ValueError):
    """Configuration is malformed, unknown, or out of range."""


_SCHEMA = {
    "data": {"annotation", "frames_root"},
    "synth": {"seed", "subjects", "clips_per_subject", "frames", "height", "width"},
    "flow": {
        "data_weight",
        "coupling",
        "dual_step",
        "warps",
        "inner_iters",
        "levels",
        "scale",
        "stop_tol",
    },
    "train": {"lr", "epochs", "batch", "seed", "optimizer"},
    "eval": {"seed", "workers"},
    "out": {"dir"},
}


@dataclass(frozen=True)
class DataPaths:
    annotation: Path
    frames_root: Path


@dataclass(frozen=True)
class EvalSettings:
    seed: int = 0
    workers: int = 0  # 0 = available parallelism

    def resolved_workers(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)


@dataclass(frozen=True)
class RunConfig:
    out_dir: Path
    synth: SynthSpec
    flow: FlowParams
    train: TrainConfig
    eval: EvalSettings
    data: DataPaths | None = None

    @property
    def annotation_path(self) -> Path:
        return self.data.annotation if self.data else self.out_dir / "annotation.csv"

    @property
    def frames_root(self) -> Path:
        return self.data.frames_root if self.data else self.out_dir / "frames"

    @property
    def ground_truth_path(self) -> Path:
        return self.out_dir / "ground_truth.csv"

    @property
    def spotted_path(self) -> Path:
        return self.out_dir / "spotted.csv"

    @property
    def cache_path(self) -> Path:
        return self.out_dir / "cubes.stst"

    @property
    def results_path(self) -> Path:
        return self.out_dir / "results.json"

    @property
    def report_path(self) -> Path:
        return self.out_dir / "report.txt"

    def config_hash(self) -> str:
        payload = {
            "data": {
                "annotation": str(self.data.annotation),
                "frames_root": str(self.data.frames_root),
            }
            if self.data
            else None,
            "synth": None if self.data else vars(self.synth),
            "flow": vars(self.flow),
            "train": {
                "lr": self.train.learning_rate,
                "epochs": self.train.max_epochs,
                "batch": self.train.batch_size,
                "seed": self.train.seed,
                "optimizer": self.train.optimizer,
            },
            "eval_seed": self.eval.seed,
        }
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


class _Section:
    """Typed, range-checked access to one (possibly absent) INI section."""

    def __init__(self, parser: configparser.ConfigParser, name: str):
        self.name = name
        self.values = dict(parser[name]) if parser.has_section(name) else {}

    def get(self, key, cast, default, *, minimum=None, maximum=None):
        if key not in self.values:
            return default
        raw = self.values[key]
        try:
            value = cast(raw)
        except ValueError:
            raise ConfigError(f"[{self.name}] {key}: cannot parse {raw!r}") from None
        if minimum is not None and value < minimum:
            raise ConfigError(f"[{self.name}] {key}: {value} below minimum {minimum}")
        if maximum is not None and value > maximum:
            raise ConfigError(f"[{self.name}] {key}: {value} above maximum {maximum}")
        return value


def load_config(
    path: str | Path,
    *,
    seed: int | None = None,
    out: str | Path | None = None,
    workers: int | None = None,
    synth_overrides: dict | None = None,
) -> RunConfig:
    """Parse and validate a run configuration file.

    ``seed`` overrides both the synthesis and evaluation seeds (one master
    seed for the whole run); other overrides replace single keys.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None

    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key in parser[section]:
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")

    s = _Section(parser, "synth")
    synth_values = {
        "seed": s.get("seed", int, 0),
        "subjects": s.get("subjects", int, 3),
        "clips_per_subject": s.get("clips_per_subject", int, 4),
        "frames": s.get("frames", int, 18),
        "height": s.get("height", int, 64),
        "width": s.get("width", int, 64),
    }
    if synth_overrides:
        synth_values.update(synth_overrides)
    if seed is not None:
        synth_values["seed"] = seed
    synth = SynthSpec(**synth_values)
    try:
        synth.validate()
    except ValueError as exc:
        raise ConfigError(f"[synth] {exc}") from None

    s = _Section(parser, "flow")
    flow = FlowParams(
        data_weight=s.get("data_weight", float, 0.15),
        coupling=s.get("coupling", float, 0.3),
        dual_step=s.get("dual_step", float, 0.25),
        warps=s.get("warps", int, 5, minimum=1),
        inner_iters=s.get("inner_iters", int, 50, minimum=1),
        levels=s.get("levels", int, 3, minimum=1),
        scale=s.get("scale", float, 0.5),
        stop_tol=s.get("stop_tol", float, 1e-4),
    )
    try:
        flow.validate()
    except ValueError as exc:
        raise ConfigError(f"[flow] {exc}") from None

    s = _Section(parser, "train")
    train_config = TrainConfig(
        learning_rate=s.get("lr", float, 5e-5),
        max_epochs=s.get("epochs", int, 500, minimum=1),
        batch_size=s.get("batch", int, 32, minimum=1),
        seed=s.get("seed", int, 0),
        optimizer=s.get("optimizer", str, "adam"),
    )
    try:
        train_config.validate()
    except ValueError as exc:
        raise ConfigError(f"[train] {exc}") from None

    s = _Section(parser, "eval")
    eval_settings = EvalSettings(
        seed=s.get("seed", int, 0),
        workers=s.get("workers", int, 0, minimum=0),
    )
    if seed is not None:
        eval_settings = EvalSettings(seed=seed, workers=eval_settings.workers)
    if workers is not None:
        if workers < 1:
            raise ConfigError("--workers must be >= 1")
        eval_settings = EvalSettings(seed=eval_settings.seed, workers=workers)

    data = None
    if parser.has_section("data"):
        values = parser["data"]
        if "annotation" not in values or "frames_root" not in values:
            raise ConfigError("[data] requires both annotation and frames_root")
        data = DataPaths(
            annotation=Path(values["annotation"]),
            frames_root=Path(values["frames_root"]),
        )

    out_dir = Path(out) if out is not None else None
    if out_dir is None:
        if parser.has_section("out") and "dir" in parser["out"]:
            out_dir = Path(parser["out"]["dir"])
        else:
            raise ConfigError("no output directory ([out] dir or --out)")

    return RunConfig(
        out_dir=out_dir,
        synth=synth,
        flow=flow,
        train=train_config,
        eval=eval_settings,
        data=data,
    )
