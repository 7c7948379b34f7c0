from __future__ import annotations

import argparse
import logging
import os
import time
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Callable

from dotenv import load_dotenv

from pipeline.commands import (
    EXIT_OK,
    CommandResult,
    cmd_eval,
    cmd_generate_data,
    cmd_report,
    cmd_run_all,
    cmd_train,
    cmd_transfer,
    exit_code_for,
    run_step,
)

LOG_DIR_ENV = "FLOWBRIDGE_LOG_DIR"
LOGS_DIR = Path("logs")


def _today_utc() -> date:
    return datetime.now(timezone.utc).date()


def _log_path(run_date: date) -> Path:
    logs_dir = Path(os.environ.get(LOG_DIR_ENV) or LOGS_DIR)
    return logs_dir / f"flowbridge_{run_date.isoformat()}.log"


def configure_logging(run_date: date | None = None) -> Path:
    date_for_log = run_date or _today_utc()
    log_path = _log_path(date_for_log)
    log_path.parent.mkdir(parents=True, exist_ok=True)

    root_logger = logging.getLogger()
    root_logger.handlers.clear()
    root_logger.setLevel(logging.INFO)

    formatter = logging.Formatter("%(asctime)s [%(levelname)s] %(message)s")
    file_handler = logging.FileHandler(log_path, encoding="utf-8")
    file_handler.setFormatter(formatter)
    stream_handler = logging.StreamHandler()
    stream_handler.setFormatter(formatter)

    root_logger.addHandler(file_handler)
    root_logger.addHandler(stream_handler)
    return log_path


def _named_path(text: str) -> tuple[str, Path]:
    name, sep, path = text.partition("=")
    if not sep or not name or not path:
        raise argparse.ArgumentTypeError(f"expected NAME=PATH, got {text!r}")
    return name, Path(path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="flowbridge: sim-to-real spectral transfer with a conditional invertible network")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", help="Generate the simulated and pseudo-real benchmark datasets")
    gen.add_argument("--config", type=Path, default=None, help="Pipeline config JSON (default: built-in defaults)")
    gen.add_argument("--out", type=Path, required=True, help="Output directory for the dataset files")
    gen.add_argument("--seed", type=int, default=None, help="Master seed, overrides the config")
    gen.add_argument("--force", action="store_true", help="Write into a non-empty output directory")

    tr = sub.add_parser("train", help="Train the flow model on a generated dataset directory")
    tr.add_argument("--config", type=Path, default=None, help="Pipeline config JSON (default: <data>/config.json)")
    tr.add_argument("--data", type=Path, required=True, help="Directory written by generate-data")
    tr.add_argument("--out", type=Path, required=True, help="Directory for checkpoints and training stats")
    tr.add_argument("--epochs", type=int, default=None, help="Override the configured epoch count")
    tr.add_argument("--resume", type=Path, default=None, help="Continue from a periodic checkpoint")
    tr.add_argument("--force", action="store_true", help="Write into a non-empty output directory")

    tf = sub.add_parser("transfer", help="Transfer a labeled simulated dataset to the real domain")
    tf.add_argument("--checkpoint", type=Path, required=True)
    tf.add_argument("--in", dest="in_path", type=Path, required=True, help="Simulated dataset CSV")
    tf.add_argument("--out", type=Path, required=True, help="Transferred dataset CSV")
    tf.add_argument("--force", action="store_true", help="Overwrite an existing output file")

    ev = sub.add_parser("eval", help="Downstream classification, PCA and per-wavelength analysis")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--data-dir", type=Path, required=True, help="Directory written by generate-data")
    ev.add_argument("--out", type=Path, required=True, help="Directory for metrics CSVs and SVG figures")
    ev.add_argument("--config", type=Path, default=None, help="Pipeline config JSON (default: <data-dir>/config.json)")
    ev.add_argument("--transferred", type=Path, default=None, help="Reuse a transfer output instead of recomputing it")
    ev.add_argument(
        "--extra",
        type=_named_path,
        action="append",
        default=[],
        metavar="NAME=CHECKPOINT",
        help="Score another transfer model as an extra source (repeatable)",
    )
    ev.add_argument("--force", action="store_true", help="Write into a non-empty output directory")

    rp = sub.add_parser("report", help="Bake an eval directory into a static HTML page")
    rp.add_argument("--eval-dir", type=Path, required=True)
    rp.add_argument("--output", type=Path, default=None, help="HTML path (default: <eval-dir>/report.html)")

    ra = sub.add_parser("run-all", help="generate-data, train, transfer, eval and report in one go")
    ra.add_argument("--config", type=Path, default=None)
    ra.add_argument("--out", type=Path, required=True, help="Run directory")
    ra.add_argument("--seed", type=int, default=None)
    ra.add_argument("--epochs", type=int, default=None)
    ra.add_argument("--force", action="store_true")
    return parser


def _single_step(args: argparse.Namespace) -> Callable[[], list[Path]]:
    if args.command == "generate-data":
        return lambda: cmd_generate_data(args.config, args.out, seed=args.seed, force=args.force)
    if args.command == "train":
        return lambda: cmd_train(
            args.config, args.data, args.out, epochs=args.epochs, resume_from=args.resume, force=args.force
        )
    if args.command == "transfer":
        return lambda: cmd_transfer(args.checkpoint, args.in_path, args.out, force=args.force)
    if args.command == "eval":
        return lambda: cmd_eval(
            args.checkpoint,
            args.data_dir,
            args.out,
            config_path=args.config,
            transferred_path=args.transferred,
            extra_checkpoints=dict(args.extra),
            force=args.force,
        )
    if args.command == "report":
        return lambda: cmd_report(args.eval_dir, args.output)
    raise ValueError(f"unknown command {args.command!r}")


def print_summary(results: list[CommandResult]) -> None:
    print("FLOWBRIDGE SUMMARY")
    print("command,status,outputs,duration_seconds")
    for result in results:
        print(f"{result.name},{result.status},{len(result.outputs)},{result.duration_seconds:.3f}")


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging()

    started = time.perf_counter()
    if args.command == "run-all":
        try:
            results = cmd_run_all(args.config, args.out, seed=args.seed, epochs=args.epochs, force=args.force)
        except Exception as exc:
            logging.exception("run-all failed before the first step")
            results = [CommandResult("run-all", "failed", time.perf_counter() - started, error=exc)]
    else:
        results = [run_step(args.command, _single_step(args))]

    print_summary(results)
    for result in results:
        if result.error is not None:
            return exit_code_for(result.error)
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
