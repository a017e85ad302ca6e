"""
Command-line subcommands, grouped by concern, plus the helpers they share: experiment
loading, checkpoint I/O and CSV/JSON artifacts written through the artifact store.
"""
import argparse
import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import aiofiles
import numpy as np
import pydantic
import torch

from bitsplit import __version__
from bitsplit.exceptions import ConfigurationError
from bitsplit.schemas import ExperimentConfig, RunManifest
from bitsplit.storage import ArtifactStore, run_name, write_manifest
from bitsplit.tasks import Task, load_task
from bitsplit.transformer import QuantBert, decode_checkpoint, encode_checkpoint


def package_versions() -> dict[str, str]:
    return {
        "bitsplit": __version__,
        "numpy": np.__version__,
        "pydantic": pydantic.VERSION,
        "torch": torch.__version__,
    }


def parse_int_list(text: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"Expected comma-separated integers, got '{text}'") from exc
    if not values:
        raise ConfigurationError("Expected at least one integer")
    return values


def load_experiment(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (or defaults) with command-line overrides applied and re-validated."""
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    data = config.model_dump()
    if args.seeds:
        data["seeds"] = parse_int_list(args.seeds)
    if args.seed is not None:
        data["seeds"] = [args.seed]
    if args.workers:
        data["workers"] = args.workers
    if args.task:
        data["task"]["kind"] = args.task
    try:
        return ExperimentConfig.model_validate(data)
    except pydantic.ValidationError as exc:
        raise ConfigurationError(f"Invalid overrides: {exc}") from exc


def render_csv(rows: Iterable[dict], columns: Optional[list[str]] = None) -> str:
    rows = list(rows)
    columns = columns or (list(rows[0]) if rows else [])
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buffer.getvalue()


def render_json(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def curve_rows(curves: dict[str, list[float]]) -> list[dict]:
    return [
        {"stage": stage, "step": step, "loss": loss}
        for stage, losses in curves.items()
        for step, loss in enumerate(losses)
    ]


async def read_checkpoint(path: Path) -> tuple[QuantBert, str]:
    try:
        async with aiofiles.open(path, "rb") as f:
            data = await f.read()
    except FileNotFoundError as exc:
        raise ConfigurationError(f"Checkpoint not found: {path}") from exc
    return decode_checkpoint(data)


@dataclass
class Run:
    """One run directory in the artifact store."""
    store: ArtifactStore
    name: str
    command: str
    config: ExperimentConfig
    seeds: list[int]

    async def put_json(self, key: str, payload) -> None:
        await self.store.put_text(self.name, key, render_json(payload))

    async def put_csv(self, key: str, rows: Iterable[dict], columns: Optional[list[str]] = None) -> None:
        await self.store.put_text(self.name, key, render_csv(rows, columns))

    async def put_checkpoint(self, key: str, model: QuantBert, stage: str) -> None:
        await self.store.put_bytes(self.name, key, encode_checkpoint(model, stage))

    async def finish(self, options: Optional[dict] = None) -> None:
        manifest = RunManifest(
            command=self.command,
            config_hash=self.config.config_hash(),
            seeds=self.seeds,
            versions=package_versions(),
            options={key: str(value) for key, value in (options or {}).items()},
        )
        await write_manifest(self.store, self.name, manifest)


async def open_run(store: ArtifactStore, command: str, config: ExperimentConfig, seed: Optional[int] = None) -> Run:
    name = run_name(command, config.config_hash(), seed)
    await store.create_run(name)
    await store.put_text(name, "config.json", render_json(config.model_dump(mode="json")))
    return Run(store, name, command, config, [seed] if seed is not None else list(config.seeds))


def experiment_task(config: ExperimentConfig) -> Task:
    return load_task(config.task, config.model, config.train.seq_len)
