"""Command-line entry point: ``reba <stage> [options]``.

Config precedence is flag > file > default. The file is ``--config`` if
given, else ``<root>/config.json`` when present. Every stage writes the
effective config back to ``<root>/config.json``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .backbone import NumericalError
from .config import OUTPUT_ROOT_ENV, ConfigError, ExperimentConfig
from .datagen import GenerationError
from .evalmetrics import MetricError
from .pipeline import ArtifactError, Pipeline, run_ablation, summary_row, write_report
from .teacher import CohortError

EXIT_OK, EXIT_VALIDATION, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4

log = logging.getLogger("reba")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="experiment config JSON")
    p.add_argument("--root", type=Path, help=f"run directory (default: ${OUTPUT_ROOT_ENV} or ./reba-runs)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a dotted config key")
    p.add_argument("--seed", type=int, help="dataset/model seed")
    p.add_argument("--alpha", type=float, help="soft-label correction step (0 keeps the initial regional ages)")
    p.add_argument("--eta", type=float, help="noise amplitude outside the kept voxels")
    p.add_argument("--zeta", type=float, help="weight of the functional-consistency loss")
    p.add_argument("--no-film", action="store_true", help="replace FiLM with gamma=1, beta=0")
    p.add_argument("--no-student", action="store_true", help="use the teacher's soft labels as predictions")
    p.add_argument("--labels", choices=("soft", "init", "chron"), help="student training targets")
    p.add_argument("--raw", action="store_true", help="also report metrics on uncorrected predictions")
    p.add_argument("--cached", action="store_true", help="skip stages whose inputs and config are unchanged")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reba", description="Weakly supervised regional brain age on synthetic phantoms.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate the synthetic cohort",
        "train-teacher": "train and freeze the whole-brain teacher",
        "build-soft-labels": "compute the correction vector and soft regional labels",
        "train-student": "distill the prompt-conditioned student",
        "evaluate": "bias-correct predictions and compute HCS / NDC",
        "report": "render report.md from metrics.json",
        "ablation": "run the ablation grid over the configured seeds",
        "run": "run every stage in order",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _common(p)
        if name in ("gen-data", "run"):
            p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
        if name == "evaluate":
            p.add_argument("--hc-shift", type=float, default=0.0, help="add a constant to HC-test gaps (drift check)")
    return parser


def resolve_config(args) -> ExperimentConfig:
    root = args.root
    path = args.config
    if path is None and root is not None and (root / "config.json").exists():
        path = root / "config.json"
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        cfg.override(key.strip(), value)
    if args.seed is not None:
        cfg.dataset.seed = args.seed
    for name in ("alpha", "eta", "zeta", "labels"):
        if getattr(args, name) is not None:
            setattr(cfg, name, getattr(args, name))
    if args.no_film:
        cfg.use_film = False
    if args.no_student:
        cfg.use_student = False
    if args.raw:
        cfg.metrics.raw = True
    if root is not None:
        cfg.root = str(root)
    cfg.validate()
    return cfg


def _dispatch(args) -> int:
    cfg = resolve_config(args)
    pipe = Pipeline(cfg)
    pipe.root.mkdir(parents=True, exist_ok=True)
    cmd = args.command
    if cmd == "ablation":
        df = run_ablation(cfg, pipe.root, cached=args.cached)
        means = df.drop(columns="seed").groupby(["row", "variant"], sort=True).mean().reset_index()
        print(means.to_string(index=False))
        return EXIT_OK
    cfg.save(pipe.root / "config.json")
    if cmd == "run":
        status = pipe.run_all(force=args.force, cached=args.cached)
        for stage, s in status.items():
            print(f"{stage}: {s}")
        _print_summary(pipe.metrics())
        return EXIT_OK
    if cmd == "gen-data":
        status = pipe.gen_data(force=args.force, cached=args.cached)
    elif cmd == "train-teacher":
        status = pipe.train_teacher(args.cached)
    elif cmd == "build-soft-labels":
        status = pipe.build_soft_labels(args.cached)
    elif cmd == "train-student":
        status = pipe.train_student(args.cached)
    elif cmd == "evaluate":
        status = pipe.evaluate(args.cached, hc_shift=args.hc_shift)
        _print_summary(pipe.metrics())
    else:
        print(write_report(pipe.root / "report.md", pipe.metrics()), end="")
        return EXIT_OK
    print(f"{cmd}: {status}")
    return EXIT_OK


def _print_summary(metrics: dict) -> None:
    for k, v in summary_row(metrics).items():
        print(f"{k}: {v:.4f}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, GenerationError, CohortError, MetricError, FileExistsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
