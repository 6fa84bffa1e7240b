"""Command-line surface: synth, spot, flow, eval, report.

Exit codes: 0 success, 1 validation error, 2 runtime failure. All
randomness flows from the configured seed (overridable with --seed), so a
rerun with an identical config reproduces every output byte except the
recorded timings.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import apex as apex_mod
from . import data as data_mod
from .config import ConfigError, RunConfig, load_config
from .data import AnnotationError, FrameLoadError, SynthSpec
from .evaluation import LosoResult, MetricReport, run_loso_cubes
from .flow import (
    CacheFormatError,
    DegenerateClipError,
    build_flow_cube,
    read_cube_cache,
    write_cube_cache,
)
from .model import TrainingError

SPOTTED_HEADER = ["dataset", "subject", "video", "spotted_apex"]


class _Parser(argparse.ArgumentParser):
    # usage problems are validation errors -> exit code 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ststnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="run configuration file (INI)")
        p.add_argument("--out", help="override [out] dir")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--workers", type=int, help="override [eval] workers")

    p = sub.add_parser("synth", help="generate a synthetic dataset on disk")
    add_common(p)
    p.add_argument("--subjects", type=int, help="override [synth] subjects")
    p.add_argument("--clips-per-subject", type=int, help="override [synth] clips_per_subject")
    p.add_argument("--frames", type=int, help="override [synth] frames")

    p = sub.add_parser("spot", help="spot apex frames for clips lacking annotations")
    add_common(p)

    p = sub.add_parser("flow", help="build flow cubes and write the cube cache")
    add_common(p)

    p = sub.add_parser("eval", help="run LOSO evaluation over the cube cache")
    add_common(p)
    p.add_argument("--folds", type=int, help="debug: limit to the first N subjects")

    p = sub.add_parser("report", help="re-render the report from results.json")
    add_common(p)
    return parser


def _load(args) -> RunConfig:
    synth_overrides = {}
    for attr, key in (
        ("subjects", "subjects"),
        ("clips_per_subject", "clips_per_subject"),
        ("frames", "frames"),
    ):
        value = getattr(args, attr, None)
        if value is not None:
            synth_overrides[key] = value
    return load_config(
        args.config,
        seed=args.seed,
        out=args.out,
        workers=args.workers,
        synth_overrides=synth_overrides or None,
    )


def cmd_synth(cfg: RunConfig, args) -> int:
    if cfg.data is not None:
        raise ConfigError("synth writes its own dataset; remove the [data] section")
    if cfg.annotation_path.exists() and not args.force:
        print(f"refusing to overwrite {cfg.annotation_path} (use --force)", file=sys.stderr)
        return 1
    dataset = data_mod.generate_synthetic(cfg.synth)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    # apex column left blank so the spotting stage has work to do; the true
    # indices go to ground_truth.csv for verification
    data_mod.save_dataset(dataset, cfg.annotation_path, cfg.frames_root, blank_apex=True)
    with cfg.ground_truth_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "subject", "video", "apex"])
        for seq in dataset.sequences:
            writer.writerow([*seq.video_key, str(seq.apex_index)])
    print(
        f"wrote {len(dataset.sequences)} clips "
        f"({cfg.synth.subjects} subjects x {cfg.synth.clips_per_subject}) "
        f"to {cfg.out_dir}"
    )
    return 0


def cmd_spot(cfg: RunConfig, args) -> int:
    dataset = data_mod.load_dataset(cfg.annotation_path, cfg.frames_root)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    errors = []
    rows = []
    for seq in dataset.sequences:
        if seq.apex_index is not None:
            continue
        try:
            rois = apex_mod.default_rois(seq.frames[0].height, seq.frames[0].width)
            result = apex_mod.spot_apex(seq, rois)
        except apex_mod.SpottingError as exc:
            errors.append(f"{'/'.join(seq.video_key)}: {exc}")
            continue
        if result.no_motion:
            print(f"warning: no motion detected in {'/'.join(seq.video_key)}", file=sys.stderr)
        rows.append([*seq.video_key, str(result.apex_index)])
    with cfg.spotted_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SPOTTED_HEADER)
        writer.writerows(rows)
    print(f"spotted {len(rows)} clips -> {cfg.spotted_path}")
    for message in errors:
        print(f"error: {message}", file=sys.stderr)
    return 2 if errors else 0


def _read_spotted(path: Path) -> dict[tuple[str, str, str], int]:
    if not path.is_file():
        return {}
    spotted = {}
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SPOTTED_HEADER:
            raise AnnotationError(f"bad spotted-apex header in {path}")
        for row in reader:
            spotted[(row[0], row[1], row[2])] = int(row[3])
    return spotted


def cmd_flow(cfg: RunConfig, args) -> int:
    dataset = data_mod.load_dataset(cfg.annotation_path, cfg.frames_root)
    spotted = _read_spotted(cfg.spotted_path)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    cubes = []
    skipped = []
    for seq in dataset.sequences:
        apex_index = seq.apex_index if seq.apex_index is not None else spotted.get(seq.video_key)
        if apex_index is None:
            skipped.append(f"{'/'.join(seq.video_key)}: no annotated or spotted apex")
            continue
        try:
            cubes.append(build_flow_cube(seq, apex_index, cfg.flow))
        except DegenerateClipError as exc:
            skipped.append(str(exc))
    write_cube_cache(cfg.cache_path, cubes)
    counts = {c: 0 for c in data_mod.EmotionClass}
    for cube in cubes:
        counts[cube.label] += 1
    print(f"wrote {len(cubes)} cubes -> {cfg.cache_path}")
    for label, count in counts.items():
        print(f"  {label.token}: {count}")
    for message in skipped:
        print(f"skipped: {message}", file=sys.stderr)
    return 2 if skipped else 0


def _format_report(reports: dict[str, dict], confusion: dict[str, dict]) -> str:
    scopes = ["Full"] + sorted(k for k in reports if k != "Full")
    lines = []
    header = f"{'metric':<8}" + "".join(f"{s:>10}" for s in scopes)
    lines.append(header)
    for metric_key, label in (
        ("accuracy", "Acc"),
        ("f1", "F1"),
        ("uf1", "UF1"),
        ("uar", "UAR"),
    ):
        row = f"{label:<8}" + "".join(f"{reports[s][metric_key]:>10.4f}" for s in scopes)
        lines.append(row)
    class_names = [c.token for c in data_mod.EmotionClass]
    for scope in scopes:
        lines.append("")
        lines.append(f"confusion ({scope}), rows = truth")
        cm = confusion[scope]
        name_width = max(len(n) for n in class_names)
        head = " " * (name_width + 2) + "".join(f"{n:>10}" for n in class_names)
        lines.append(head + "    " + "".join(f"{n + '%':>10}" for n in class_names))
        for i, name in enumerate(class_names):
            counts = "".join(f"{cm['counts'][i][j]:>10}" for j in range(len(class_names)))
            pct = "".join(f"{cm['percent'][i][j]:>10.2f}" for j in range(len(class_names)))
            lines.append(f"{name:<{name_width + 2}}" + counts + "    " + pct)
        degenerate = reports[scope].get("degenerate") or []
        for note in degenerate:
            lines.append(f"  note: {note}")
    return "\n".join(lines) + "\n"


def cmd_eval(cfg: RunConfig, args) -> int:
    if not cfg.cache_path.is_file():
        raise ConfigError(f"cube cache not found: {cfg.cache_path} (run `flow` first)")
    cubes = read_cube_cache(cfg.cache_path)
    workers = cfg.eval.resolved_workers()
    result = run_loso_cubes(
        cubes,
        cfg.train,
        base_seed=cfg.eval.seed,
        workers=workers,
        max_folds=getattr(args, "folds", None),
        progress=lambda msg: print(msg, file=sys.stderr),
    )
    payload = {
        "run": {"seed": cfg.eval.seed, "config_hash": cfg.config_hash()},
        **result.to_dict(),
    }
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with cfg.results_path.open("w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    report_text = _format_report(payload["reports"], payload["confusion"])
    cfg.report_path.write_text(report_text, encoding="utf-8")
    print(report_text, end="")
    for scope in ["Full"] + sorted(k for k in payload["reports"] if k != "Full"):
        r = payload["reports"][scope]
        print(f"{scope}: UF1 {r['uf1']:.4f}  UAR {r['uar']:.4f}")
    print(f"results -> {cfg.results_path}")
    return 0


def cmd_report(cfg: RunConfig, args) -> int:
    if not cfg.results_path.is_file():
        raise ConfigError(f"results file not found: {cfg.results_path} (run `eval` first)")
    payload = json.loads(cfg.results_path.read_text(encoding="utf-8"))
    print(_format_report(payload["reports"], payload["confusion"]), end="")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "spot": cmd_spot,
    "flow": cmd_flow,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        return _COMMANDS[args.command](cfg, args)
    except (CacheFormatError, TrainingError, OSError) as exc:
        # FrameLoadError is an OSError: missing/corrupt artifacts at runtime
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
