"""
Command-line entry point: argument parsing, logging setup and error-to-exit-code handling.
"""
import argparse
import asyncio
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import pydantic

from bitsplit.commands import analysis, training
from bitsplit.config import APP_NAME, APP_VERSION, settings
from bitsplit.exceptions import (
    ArtifactNotFoundError,
    BitSplitError,
    BudgetError,
    CheckpointFormatError,
    ConfigurationError,
    DegenerateTernaryError,
    DivergenceError,
    GraphError,
    InvalidPathError,
    MissingBaselineError,
    NonFiniteError,
    QuantizerStateError,
    ShapeError,
    SplitMismatchError,
    TaskError,
    UnknownTagError,
)
from bitsplit.numerics import configure_determinism
from bitsplit.storage import get_artifact_store

logger = logging.getLogger(APP_NAME)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EXIT_STORAGE = 5

# Checked in order; the first matching class decides the exit code
ERROR_HANDLERS: list[tuple[type[Exception], int, str]] = [
    (ConfigurationError, EXIT_CONFIG, "Configuration error"),
    (UnknownTagError, EXIT_CONFIG, "Unknown tag"),
    (BudgetError, EXIT_CONFIG, "Budget error"),
    (MissingBaselineError, EXIT_CONFIG, "Missing baseline"),
    (pydantic.ValidationError, EXIT_CONFIG, "Invalid configuration"),
    (TaskError, EXIT_DATA, "Data error"),
    (CheckpointFormatError, EXIT_DATA, "Checkpoint error"),
    (DivergenceError, EXIT_NUMERICAL, "Training diverged"),
    (NonFiniteError, EXIT_NUMERICAL, "Numerical error"),
    (ShapeError, EXIT_NUMERICAL, "Shape error"),
    (GraphError, EXIT_NUMERICAL, "Autograd error"),
    (QuantizerStateError, EXIT_NUMERICAL, "Quantizer error"),
    (DegenerateTernaryError, EXIT_NUMERICAL, "Split error"),
    (SplitMismatchError, EXIT_NUMERICAL, "Split mismatch"),
    (InvalidPathError, EXIT_STORAGE, "Invalid path"),
    (ArtifactNotFoundError, EXIT_STORAGE, "Artifact not found"),
    (OSError, EXIT_STORAGE, "Storage error"),
    (BitSplitError, EXIT_OTHER, "Error"),
]


def exit_code_for(exc: Exception) -> Optional[int]:
    for error_type, code, label in ERROR_HANDLERS:
        if isinstance(exc, error_type):
            logger.error("❌ %s: %s", label, exc)
            return code
    return None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="Experiment config JSON")
    common.add_argument("--seed", type=int, help="Run a single seed")
    common.add_argument("--seeds", help="Comma-separated seeds (overrides the config)")
    common.add_argument("--workers", type=int, help="Parallel processes for multi-seed sweeps")
    common.add_argument("--task", help="Synthetic task kind (overrides the config)")
    common.add_argument("--output-dir", type=Path, help=f"Artifact root (default {settings.output_dir})")
    common.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(
        prog=APP_NAME,
        description="Ternary weight splitting and binarization of BERT-style encoders",
    )
    parser.add_argument("--version", action="version", version=f"{APP_NAME} {APP_VERSION}")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    training.register(subparsers, common)
    analysis.register(subparsers, common)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, force=True)

    configure_determinism()
    store = get_artifact_store(args.output_dir)
    logger.info("🚀 %s v%s starting %s...", APP_NAME, APP_VERSION, args.command)
    logger.info("📁 Output path: %s", store.base_path.resolve())
    try:
        asyncio.run(args.handler(args, store))
    except Exception as exc:
        code = exit_code_for(exc)
        if code is None:
            raise
        return code
    logger.info("👋 %s finished", args.command)
    return 0


if __name__ == "__main__":
    sys.exit(main())
