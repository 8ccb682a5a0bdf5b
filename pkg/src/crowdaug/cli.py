"""Command-line entry point: reproducible synth/train/eval/sweep/ablate/augment runs.

Every command resolves its configuration, writes a manifest (command, resolved
config, input digests, seed, version, planned outputs) *before* doing any real
work, then emits its artifacts. Exit codes: 0 success, 2 configuration error,
3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, evalsuite
from .checkpoint import CheckpointError
from .config import ConfigError, apply_overrides, config_as_dict, load_config_file
from .data import DatasetError, SynthConfig, load_dataset, remove_annotations, save_dataset, synthesize_dataset
from .evalsuite import RunReport, SweepTable
from .trainer import (
    DivergenceError,
    TrainConfig,
    export_augmented,
    load_result_checkpoint,
    save_result_checkpoint,
    train_method,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4

DATASET_FILES = ("features.csv", "annotators.csv", "annotations.csv",
                 "truth.csv", "splits.csv")


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _input_digests(paths: list[Path | None]) -> dict[str, str]:
    out = {}
    for p in paths:
        if p is not None and Path(p).is_file():
            out[str(p)] = _sha256(Path(p))
    return out


def _dataset_paths(data_dir: str | Path) -> list[Path]:
    return [Path(data_dir) / name for name in DATASET_FILES]


def write_manifest(out_dir: Path, command: str, config: dict, seed: int,
                   inputs: list[Path | None], outputs: list[str]) -> Path:
    """Record what is about to run; written before any training starts."""
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "input_digests": _input_digests(inputs),
        "seed": seed,
        "version": __version__,
        "outputs": outputs,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    return path


def _load_config_values(config_file: str | None) -> dict[str, str]:
    if config_file is None:
        return {}
    try:
        return load_config_file(config_file)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {config_file}") from exc


def _split_prefixed(values: dict[str, str], prefix: str) -> tuple[dict, dict]:
    taken = {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}
    rest = {k: v for k, v in values.items() if not k.startswith(prefix)}
    return taken, rest


def _parse_list(text: str, cast):
    items = [part.strip() for part in text.split(",") if part.strip()]
    if not items:
        raise ConfigError(f"empty list value {text!r}")
    return [cast(part) for part in items]


def _train_config(values: dict[str, str], seed: int | None) -> TrainConfig:
    fixed = {} if seed is None else {"seed": seed}
    cfg = apply_overrides(TrainConfig, values, **fixed)
    cfg.validate()
    return cfg


def _variant_of(method: str, cfg: TrainConfig) -> str:
    """Label the run by which components are active (config echo)."""
    if method != "crowding":
        return method
    if cfg.info_weight == 0.0:
        return "no-info"
    if not cfg.gen_use_instance_features:
        return "no-instance-features"
    if not cfg.gen_use_annotator_features:
        return "no-annotator-features"
    if cfg.selection_mode == "uniform":
        return "random-selection"
    return "full"


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    values = _load_config_values(args.config)
    cfg = apply_overrides(SynthConfig, values)
    cfg.validate()
    out_dir = Path(args.out)
    write_manifest(out_dir, "synth", config_as_dict(cfg), args.seed,
                   [Path(args.config)] if args.config else [],
                   [str(out_dir / f) for f in DATASET_FILES])
    ds = synthesize_dataset(cfg, seed=args.seed)
    save_dataset(ds, out_dir)
    print(f"synthesized {ds.num_instances} instances, "
          f"{ds.num_annotations} annotations -> {out_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    values = _load_config_values(args.config)
    cfg = _train_config(values, args.seed)
    ds = load_dataset(args.data)
    out_dir = Path(args.out)
    write_manifest(out_dir, "train", {**config_as_dict(cfg), "method": args.method},
                   cfg.seed,
                   ([Path(args.config)] if args.config else []) + _dataset_paths(args.data),
                   [str(out_dir / n) for n in ("checkpoint.bin", "report.csv",
                                               "report.json")])
    result = train_method(ds, cfg, args.method)
    report = RunReport(
        epochs=result.history,
        summary={
            "method": result.method,
            "variant": _variant_of(result.method, cfg),
            "seed": cfg.seed,
            "best_epoch": result.best_epoch,
            "best_val_acc": result.best_val_acc,
            "test_acc": result.test_acc,
        })
    report.validate()
    save_result_checkpoint(out_dir / "checkpoint.bin", result)
    report.to_csv(out_dir / "report.csv")
    report.to_json(out_dir / "report.json")
    print(f"{args.method}: best_val={result.best_val_acc:.4f} "
          f"test={result.test_acc:.4f} -> {out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    out_dir = Path(args.out)
    write_manifest(out_dir, "eval", {"checkpoint": str(args.checkpoint)},
                   args.seed,
                   [Path(args.checkpoint)] + _dataset_paths(args.data),
                   [str(out_dir / "metrics.json")])
    clf, _ = load_result_checkpoint(args.checkpoint)
    metrics = {}
    for name, split in (("train", 0), ("val", 1), ("test", 2)):
        idx = ds.split_indices(split)
        labels = ds.ground_truth[idx] if idx.size else np.empty(0, dtype=np.int64)
        if idx.size and np.all(labels >= 0):
            metrics[f"{name}_acc"] = evalsuite.accuracy(clf, ds.features[idx], labels)
    path = out_dir / "metrics.json"
    path.write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def _sweep_job(payload):
    ds, fraction, method, seed, cfg_dict = payload
    reduced = remove_annotations(ds, fraction, seed=seed)
    cfg = TrainConfig(**{**cfg_dict, "seed": seed})
    result = train_method(reduced, cfg, method)
    return fraction, method, seed, result.test_acc


def _worker_count(num_jobs: int) -> int:
    cap = os.environ.get("CROWDING_THREADS", "1")
    try:
        cap_value = max(1, int(cap))
    except ValueError as exc:
        raise ConfigError(f"CROWDING_THREADS must be an integer, got {cap!r}") from exc
    return min(cap_value, num_jobs)


def cmd_sweep(args) -> int:
    values = _load_config_values(args.config)
    sweep, rest = _split_prefixed(values, "sweep_")
    fractions = _parse_list(sweep.pop("fractions", "0,0.2,0.4,0.6"), float)
    methods = _parse_list(sweep.pop("methods", "crowding,dl-cl,dl-mv"), str)
    seeds = _parse_list(sweep.pop("seeds", "0,1,2"), int)
    if sweep:
        raise ConfigError(f"unknown sweep key 'sweep_{sorted(sweep)[0]}'")
    cfg = _train_config(rest, args.seed)
    ds = load_dataset(args.data)

    out_dir = Path(args.out)
    write_manifest(out_dir, "sweep",
                   {**config_as_dict(cfg), "fractions": fractions,
                    "methods": methods, "seeds": seeds},
                   cfg.seed,
                   ([Path(args.config)] if args.config else []) + _dataset_paths(args.data),
                   [str(out_dir / "sweep.csv"), str(out_dir / "sweep.json")])

    jobs = [(ds, fraction, method, seed, cfg.__dict__)
            for fraction in fractions for seed in seeds for method in methods]
    workers = _worker_count(len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(job) for job in jobs]

    table = SweepTable(axis_name="fraction", axis_values=fractions,
                       methods=methods)
    for fraction, method, _, acc in results:
        table.add(fraction, method, acc)
    table.validate()
    table.to_csv(out_dir / "sweep.csv")
    table.to_json(out_dir / "sweep.json")
    print(f"sweep: {len(fractions)}x{len(methods)} cells, "
          f"{len(seeds)} seeds -> {out_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    values = _load_config_values(args.config)
    ablate, rest = _split_prefixed(values, "ablate_")
    variants = _parse_list(ablate.pop("variants",
                                      ",".join(evalsuite.ABLATION_VARIANTS)), str)
    seeds = _parse_list(ablate.pop("seeds", "0,1,2"), int)
    if ablate:
        raise ConfigError(f"unknown ablation key 'ablate_{sorted(ablate)[0]}'")
    for variant in variants:
        if variant not in evalsuite.ABLATION_VARIANTS:
            raise ConfigError(f"unknown ablation variant {variant!r}")
    cfg = _train_config(rest, args.seed)
    ds = load_dataset(args.data)

    out_dir = Path(args.out)
    write_manifest(out_dir, "ablate",
                   {**config_as_dict(cfg), "variants": variants, "seeds": seeds},
                   cfg.seed,
                   ([Path(args.config)] if args.config else []) + _dataset_paths(args.data),
                   [str(out_dir / "ablation.csv"), str(out_dir / "ablation.json")])

    table = SweepTable(axis_name="variant", axis_values=list(variants),
                       methods=["crowding"])
    for variant in variants:
        part = evalsuite.run_ablation(ds, variant, cfg, seeds)
        for acc in part.cells[(variant, "crowding")]:
            table.add(variant, "crowding", acc)
    table.validate()
    table.to_csv(out_dir / "ablation.csv")
    table.to_json(out_dir / "ablation.json")
    print(f"ablation: {len(variants)} variants, {len(seeds)} seeds -> {out_dir}")
    return EXIT_OK


def cmd_augment(args) -> int:
    ds = load_dataset(args.data)
    out_dir = Path(args.out)
    write_manifest(out_dir, "augment", {"checkpoint": str(args.checkpoint)},
                   args.seed,
                   [Path(args.checkpoint)] + _dataset_paths(args.data),
                   [str(out_dir / "augmented.csv")])
    _, bundle = load_result_checkpoint(args.checkpoint)
    if bundle is None:
        raise CheckpointError(
            f"{args.checkpoint}: checkpoint has no generator; augment needs a "
            f"run trained with the adversarial method")
    rows = export_augmented(ds, bundle, seed=args.seed,
                            out_path=out_dir / "augmented.csv")
    print(f"augment: {len(rows)} rows "
          f"({int(rows[:, 3].sum())} authentic) -> {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems -> exit code 2, not argparse's own
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="crowdaug",
                     description="Train classifiers from sparse crowdsourced "
                                 "annotations with adversarial augmentation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, checkpoint=False, method=False):
        p.add_argument("--config", default=None,
                       help="key = value configuration file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="seed override (default: config seed)")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True,
                           help="checkpoint file from a training run")
        if method:
            p.add_argument("--method", default="crowding",
                           choices=["crowding", "dl-cl", "dl-mv"])

    p = sub.add_parser("synth", help="generate a synthetic crowd dataset")
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one method on a dataset")
    common(p, data=True, method=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    common(p, data=True, checkpoint=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="annotation-removal sweep across methods")
    common(p, data=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="component-ablation comparison")
    common(p, data=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("augment", help="export completed annotations")
    common(p, data=True, checkpoint=True)
    p.set_defaults(func=cmd_augment)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command in ("synth", "eval", "augment") and args.seed is None:
            args.seed = 0
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
