"""Command-line interface.

Subcommands: train, sweep, ablate, bench, export-logits, report. Option
precedence is flags over config file over built-in defaults; the
MICROEXP_THREADS environment variable overrides --jobs outright. Every run
writes a run.json with the fully resolved options, and passing that file
back via --config replays the run. Exit codes: 0 success, 1 runtime
failure (with a structured message on stderr), 2 argument errors.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .architecture import ModelSpec, build_model, load_checkpoint, save_checkpoint
from .benchmark import bench_inference
from .data import load_manifest, make_folds
from .distillation import DistillationConfig, TeacherLogits, load_teacher_logits
from .experiment import (
    TEMPERATURE_GRID,
    TrainConfig,
    cross_validate,
    pooling_ablation,
    predict_logits,
    temperature_sweep,
    train_full,
    write_results_csv,
    write_results_jsonl,
)
from .report import (
    render_bench_table,
    render_pooling_table,
    render_results_table,
    render_sweep_table,
)

SIZE_ORDER = ("xxs", "xs", "s", "m")


class UsageError(Exception):
    """Bad or inconsistent arguments; maps to exit code 2."""


_COMMON = {
    "size": "xxs",
    "variant": "p12",
    "mode": "random",
    "epochs": 60,
    "batch_size": 64,
    "learning_rate": 1e-4,
    "dropout": 0.5,
    "seed": 0,
    "lam": 0.5,
    "grad_scale": "none",
    "teacher_logits": None,
    "num_classes": None,
    "folds": 10,
    "jobs": 1,
    "manifest": None,
    "out": None,
}

DEFAULTS = {
    "train": {**_COMMON, "temperature": None, "save_model": None},
    "sweep": {**_COMMON, "temperatures": ",".join(f"{t:g}" for t in TEMPERATURE_GRID)},
    "ablate": {**_COMMON, "mode": "both"},
    "bench": {
        "size": "all",
        "variant": "p12",
        "iterations": 1000,
        "warmup": 50,
        "seed": 0,
        "out": None,
    },
    "export-logits": {
        "checkpoint": None,
        "manifest": None,
        "out_file": None,
        "num_classes": None,
        "out": None,
    },
    "report": {"results": None, "csv": None, "out": None},
}


def _add_dataset_options(p: argparse.ArgumentParser, modes) -> None:
    p.add_argument("--manifest", help="dataset manifest CSV")
    p.add_argument("--size", choices=SIZE_ORDER)
    p.add_argument("--variant", choices=["v", "p1", "p2", "p12"])
    p.add_argument("--mode", choices=modes)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--dropout", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda", type=float, dest="lam", help="soft-loss weight")
    p.add_argument("--grad-scale", choices=["none", "t_squared"], dest="grad_scale")
    p.add_argument("--teacher-logits", dest="teacher_logits", help="teacher logit file")
    p.add_argument("--num-classes", type=int, dest="num_classes")
    p.add_argument("--folds", type=int)
    p.add_argument("--jobs", type=int, help="parallel fold workers")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="microexpnet",
        description="Micro-CNN training, distillation, and benchmarking",
    )
    sub = parser.add_subparsers(dest="command")

    train_p = sub.add_parser("train", help="cross-validate one configuration")
    _add_dataset_options(train_p, ["random", "subject-independent"])
    train_p.add_argument("--temperature", type=float)
    train_p.add_argument("--save-model", dest="save_model", help="checkpoint path")

    sweep_p = sub.add_parser("sweep", help="cross-validate across temperatures")
    _add_dataset_options(sweep_p, ["random", "subject-independent"])
    sweep_p.add_argument("--temperatures", help="comma-separated grid")

    ablate_p = sub.add_parser("ablate", help="compare pooling variants")
    _add_dataset_options(ablate_p, ["random", "subject-independent", "both"])

    bench_p = sub.add_parser("bench", help="measure inference latency")
    bench_p.add_argument("--size", choices=list(SIZE_ORDER) + ["all"])
    bench_p.add_argument("--variant", choices=["v", "p1", "p2", "p12"])
    bench_p.add_argument("--iterations", type=int)
    bench_p.add_argument("--warmup", type=int)
    bench_p.add_argument("--seed", type=int)
    bench_p.add_argument("--out", help="output directory")

    export_p = sub.add_parser("export-logits", help="write per-sample logits")
    export_p.add_argument("--checkpoint", help="model checkpoint")
    export_p.add_argument("--manifest", help="dataset manifest CSV")
    export_p.add_argument("--out-file", dest="out_file", help=".csv or binary path")
    export_p.add_argument("--num-classes", type=int, dest="num_classes")
    export_p.add_argument("--out", help="output directory")

    report_p = sub.add_parser("report", help="render result tables")
    report_p.add_argument("--results", nargs="+", help="results.jsonl paths")
    report_p.add_argument("--csv", help="also write a flat per-fold CSV here")
    report_p.add_argument("--out", help="output directory")

    for p in (train_p, sweep_p, ablate_p, bench_p, export_p, report_p):
        p.add_argument("--config", help="JSON options file (or a prior run.json)")
    return parser


def _load_config(path: str, command: str, defaults: dict) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    if isinstance(data, dict) and isinstance(data.get("options"), dict):
        recorded = data.get("subcommand")
        if recorded is not None and recorded != command:
            raise UsageError(
                f"config {path} was recorded for {recorded!r}, not {command!r}"
            )
        data = data["options"]
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    unknown = sorted(set(data) - set(defaults))
    if unknown:
        raise UsageError(f"config {path} has unknown options: {unknown}")
    return data


def _resolve_options(args: argparse.Namespace) -> dict:
    command = args.command
    defaults = DEFAULTS[command]
    merged = dict(defaults)
    if getattr(args, "config", None):
        merged.update(_load_config(args.config, command, defaults))
    for key, value in vars(args).items():
        if key in ("command", "config") or value is None:
            continue
        merged[key] = value
    env_threads = os.environ.get("MICROEXP_THREADS")
    if env_threads is not None and "jobs" in merged:
        try:
            jobs = int(env_threads)
            if jobs < 1:
                raise ValueError
        except ValueError:
            raise UsageError(
                f"MICROEXP_THREADS must be a positive integer, got {env_threads!r}"
            ) from None
        merged["jobs"] = jobs
    if not merged.get("out"):
        merged["out"] = os.path.join("runs", command)
    return merged


def _require(options: dict, *keys: str) -> None:
    missing = [k for k in keys if not options.get(k)]
    if missing:
        flags = ", ".join("--" + k.replace("_", "-") for k in missing)
        raise UsageError(f"missing required options: {flags}")


def _prepare_out(options: dict, command: str) -> Path:
    out = Path(options["out"])
    out.mkdir(parents=True, exist_ok=True)
    payload = {"subcommand": command, "options": options}
    (out / "run.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return out


def _internal_mode(mode: str) -> str:
    return mode.replace("-", "_")


def _train_config(options: dict, manifest) -> TrainConfig:
    distillation = None
    if options.get("teacher_logits"):
        if options.get("temperature") is None:
            raise UsageError("--teacher-logits requires --temperature")
        teacher = load_teacher_logits(options["teacher_logits"], manifest)
        distillation = DistillationConfig(
            temperature=float(options["temperature"]),
            lam=float(options["lam"]),
            grad_scale_mode=options["grad_scale"],
            teacher=teacher,
        )
    return TrainConfig(
        epochs=int(options["epochs"]),
        batch_size=int(options["batch_size"]),
        learning_rate=float(options["learning_rate"]),
        dropout=float(options["dropout"]),
        seed=int(options["seed"]),
        distillation=distillation,
    )


def cmd_train(options: dict) -> int:
    _require(options, "manifest")
    manifest = load_manifest(options["manifest"], num_classes=options.get("num_classes"))
    spec = ModelSpec(options["size"], options["variant"])
    cfg = _train_config(options, manifest)
    out = _prepare_out(options, "train")
    mode = _internal_mode(options["mode"])
    result = cross_validate(
        spec, manifest, mode, cfg, jobs=int(options["jobs"]), k=int(options["folds"])
    )
    split = make_folds(manifest, mode, cfg.seed, k=int(options["folds"]))
    split.save_csv(out / "folds.csv")
    write_results_jsonl([result], out / "results.jsonl")
    write_results_csv([result], out / "summary.csv")
    print(render_results_table([result.to_record()]))
    if options.get("save_model"):
        model = build_model(spec, cfg.seed)
        train_full(model, manifest, cfg)
        save_checkpoint(model, options["save_model"], seed=cfg.seed, epoch=cfg.epochs)
        print(f"checkpoint written to {options['save_model']}")
    return 0


def cmd_sweep(options: dict) -> int:
    _require(options, "manifest", "teacher_logits")
    manifest = load_manifest(options["manifest"], num_classes=options.get("num_classes"))
    spec = ModelSpec(options["size"], options["variant"])
    try:
        grid = [float(t) for t in str(options["temperatures"]).split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad temperature grid {options['temperatures']!r}") from None
    teacher = load_teacher_logits(options["teacher_logits"], manifest)
    cfg = TrainConfig(
        epochs=int(options["epochs"]),
        batch_size=int(options["batch_size"]),
        learning_rate=float(options["learning_rate"]),
        dropout=float(options["dropout"]),
        seed=int(options["seed"]),
        distillation=DistillationConfig(
            temperature=grid[0] if grid else 1.0,
            lam=float(options["lam"]),
            grad_scale_mode=options["grad_scale"],
            teacher=teacher,
        ),
    )
    out = _prepare_out(options, "sweep")
    results = temperature_sweep(
        spec,
        manifest,
        _internal_mode(options["mode"]),
        cfg,
        temperatures=grid,
        jobs=int(options["jobs"]),
        k=int(options["folds"]),
    )
    write_results_jsonl(results, out / "results.jsonl")
    write_results_csv(results, out / "summary.csv")
    print(render_sweep_table([r.to_record() for r in results]))
    return 0


def cmd_ablate(options: dict) -> int:
    _require(options, "manifest")
    manifest = load_manifest(options["manifest"], num_classes=options.get("num_classes"))
    cfg = _train_config(options, manifest)
    out = _prepare_out(options, "ablate")
    modes = (
        ["random", "subject_independent"]
        if options["mode"] == "both"
        else [_internal_mode(options["mode"])]
    )
    results = []
    cache: dict = {}
    for mode in modes:
        results.extend(
            pooling_ablation(
                options["size"],
                manifest,
                mode,
                cfg,
                jobs=int(options["jobs"]),
                image_cache=cache,
                k=int(options["folds"]),
            )
        )
    write_results_jsonl(results, out / "results.jsonl")
    write_results_csv(results, out / "summary.csv")
    print(render_pooling_table([r.to_record() for r in results]))
    return 0


def cmd_bench(options: dict) -> int:
    sizes = SIZE_ORDER if options["size"] == "all" else [options["size"]]
    out = _prepare_out(options, "bench")
    reports = []
    for size in sizes:
        model = build_model(ModelSpec(size, options["variant"]), int(options["seed"]))
        reports.append(
            bench_inference(
                model,
                iterations=int(options["iterations"]),
                warmup=int(options["warmup"]),
            )
        )
    (out / "bench.json").write_text(
        json.dumps([r.to_dict() for r in reports], indent=2) + "\n"
    )
    print(render_bench_table([r.to_dict() for r in reports]))
    return 0


def export_logits(checkpoint_path, manifest, out_path) -> TeacherLogits:
    """Run a checkpointed model over every manifest sample's center crop and
    write the logits to ``out_path`` (CSV when it ends in .csv, else the
    binary container). Returns the table."""
    model, _ = load_checkpoint(checkpoint_path)
    logits = predict_logits(model, manifest)
    table = TeacherLogits(manifest.ids(), logits, source=str(out_path))
    table.save(out_path)
    return table


def cmd_export_logits(options: dict) -> int:
    _require(options, "checkpoint", "manifest", "out_file")
    manifest = load_manifest(options["manifest"], num_classes=options.get("num_classes"))
    _prepare_out(options, "export-logits")
    table = export_logits(options["checkpoint"], manifest, options["out_file"])
    print(f"wrote {len(table)} logit rows to {options['out_file']}")
    return 0


def cmd_report(options: dict) -> int:
    _require(options, "results")
    paths = options["results"]
    if isinstance(paths, str):
        paths = [paths]
    from .experiment import read_results_jsonl

    records = []
    for path in paths:
        records.extend(read_results_jsonl(path))
    _prepare_out(options, "report")
    print(render_results_table(records))
    sweepable = [r for r in records if r.get("temperature") is not None]
    if len({r["temperature"] for r in sweepable}) > 1:
        print()
        print(render_sweep_table(sweepable))
    if len({(r["size_class"], r["variant"]) for r in records}) > 1:
        print()
        print(render_pooling_table(records))
    if options.get("csv"):
        write_results_csv(records, options["csv"])
        print(f"\nflat CSV written to {options['csv']}")
    return 0


_HANDLERS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "bench": cmd_bench,
    "export-logits": cmd_export_logits,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    if not getattr(args, "command", None):
        parser.print_help()
        return 2
    try:
        options = _resolve_options(args)
        return _HANDLERS[args.command](options)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary, fail with a message
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
