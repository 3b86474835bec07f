"""Shared plumbing for commands: seeds, configs, output paths and manifests."""

import json
import logging
import time
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import click
from pydantic import BaseModel

from utp.core.config import Settings
from utp.core.seeding import sha256_file
from utp.models.config_models import ExperimentConfig
from utp.models.run_models import RunManifest

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def resolve_seed(seed: Optional[int]) -> int:
    """The --seed flag, else UTP_SEED, else 0."""
    return seed if seed is not None else Settings().UTP_SEED


def default_out(out: Optional[str], command: str) -> Path:
    return Path(out) if out else Path(Settings().UTP_OUTPUT_DIR) / command


def parse_floats(value: str) -> List[float]:
    try:
        return [float(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {value!r}")


def parse_ints(value: str) -> List[int]:
    try:
        items = [int(v) for v in value.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}")
    if not items:
        raise click.BadParameter("expected at least one value")
    return items


def load_config(path: Optional[str]) -> ExperimentConfig:
    """Parse a --config JSON file; no file means all defaults."""
    if not path:
        return ExperimentConfig()
    return ExperimentConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))


def override(model: BaseModel, **flags) -> BaseModel:
    """Copy of ``model`` with every flag that was given; flags win over the config file."""
    given = {k: v for k, v in flags.items() if v is not None}
    if not given:
        return model
    return type(model)(**{**model.model_dump(), **given})


def hash_inputs(paths: Iterable[Optional[str]]) -> Dict[str, str]:
    return {str(p): sha256_file(p) for p in paths if p}


class RunRecorder:
    """Times a command and writes its manifest next to (or inside) the output."""

    def __init__(self, command: str, seed: int, inputs: Iterable[Optional[str]] = ()):
        self.command = command
        self.seed = seed
        self.input_hashes = hash_inputs(inputs)
        self.started = time.perf_counter()

    def finish(
        self,
        manifest_path,
        config: Optional[Dict[str, Any]] = None,
        outputs: Iterable = (),
        extra: Optional[Dict[str, Any]] = None,
    ) -> RunManifest:
        manifest = RunManifest(
            command=self.command,
            config=config or {},
            seed=self.seed,
            input_hashes=self.input_hashes,
            output_paths=[str(p) for p in outputs],
            wall_time_s=round(time.perf_counter() - self.started, 3),
            extra=extra,
        )
        path = Path(manifest_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
        logger.info(f"{self.command}: manifest written to {path}")
        return manifest


def manifest_for_file(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def echo_json(data: Any) -> None:
    click.echo(json.dumps(data, indent=2, sort_keys=True))
