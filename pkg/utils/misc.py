import json as _json
import traceback
from pathlib import Path
from typing import Any

import loguru
import yaml
from loguru import logger
from pydantic import ValidationError

from utils.custom_types import ExperimentConfig
from utils.errors import ConfigError


def _dotted(loc: tuple[int | str, ...]) -> str:
    return ".".join(str(part) for part in loc)


def validate_experiment_config(data: Any) -> ExperimentConfig:
    """Validate a parsed config tree; the first error's key path goes into the message."""
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        key = _dotted(first["loc"])
        raise ConfigError(f"{key or '<root>'}: {first['msg']}", key=key) from None


def load_experiment_config(
    path: Path, overrides: dict[str, Any] | None = None
) -> ExperimentConfig:
    """Load an experiment YAML file, apply CLI overrides and validate it.

    Args:
        path: YAML experiment file.
        overrides: Top-level keys replacing the file's values. "seed" and
            "directory" land in the output block.
    """
    if not path.exists():
        raise ConfigError(f"Config file not found at {path}", key="config")

    with path.open() as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"Config file {path} is not valid YAML: {e}", key="config") from None

    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"Config file {path} must hold a mapping", key="config")

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in ("seed", "directory"):
            data.setdefault("output", {})
            if not isinstance(data["output"], dict):
                raise ConfigError("output must be a mapping", key="output")
            data["output"][key] = value
        else:
            data[key] = value

    config = validate_experiment_config(data)
    logger.debug(f"Loaded {config.command} experiment from {path}")
    return config


def stderr_log_format(record: "loguru.Record") -> str:
    # Escape < so loguru's color parser doesn't choke on tags in messages.
    # Also escape { } so format_map doesn't treat message content as placeholders.
    safe_msg = (
        record["message"].replace("<", r"\<").replace("{", "{{").replace("}", "}}")
    )
    return (
        f"[<dim>{{time:YY-MM-DD HH:mm:ss}}</dim>] "
        f"<level>{{level: <8}}</level> | "
        f"<level>{safe_msg}</level>\n"
        "{exception}"
    )


def json_log_format(record: "loguru.Record") -> str:
    # Escape braces so loguru's format_map treats this as a literal string, not a template.
    # Escape < so loguru's markup parser doesn't choke on tags in exception messages.
    # Both transformations are undone by loguru's post-processing step.
    payload = {
        "time": record["time"].isoformat(),
        "level": record["level"].name,
        "module": record["name"],
        "function": record["function"],
        "line": record["line"],
        "message": record["message"],
    }
    if record["exception"] is not None:
        payload["exception"] = "".join(traceback.format_exception(*record["exception"]))
    return (
        (_json.dumps(payload) + "\n")
        .replace("{", "{{")
        .replace("}", "}}")
        .replace("<", r"\<")
    )
