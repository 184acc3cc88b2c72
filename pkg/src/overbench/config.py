"""Defaults from ``overbench.toml`` and the environment.

Precedence, lowest first: built-in defaults, config file, ``OVERBENCH_OUT``
(output directory only), command-line flags.
"""

from __future__ import annotations

import os
import sys
from pathlib import Path
from typing import Any, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

CONFIG_FILENAME = "overbench.toml"
OUTPUT_ENV = "OVERBENCH_OUT"

DEFAULTS: dict[str, Any] = {
    "loops": 10,
    "calls": 100_000,
    "depth": 10,
    "spin_ns": 0,
    "warmup": 0.5,
    "workers": 1,
    "probe": ["baseline"],
    "put_strategy": "yield",
    "capacity": 10_000,
    "output_dir": "overbench-out",
    "spawn": False,
    "keep_traces": True,
    "history": None,
    "alpha": 0.01,
    "beta": 0.01,
    "workers_list": [1, 2, 4, 8, 12],
}


def load_config(path: Optional[os.PathLike | str] = None) -> dict[str, Any]:
    """Merged defaults; a missing implicit ``overbench.toml`` is not an error.

    Keys may sit at the top level or under a ``[overbench]`` table; dashes
    and underscores are interchangeable.
    """
    settings = dict(DEFAULTS)
    explicit = path is not None
    path = Path(path) if explicit else Path.cwd() / CONFIG_FILENAME
    if path.exists():
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        data = {**{k: v for k, v in data.items() if k != "overbench"}, **data.get("overbench", {})}
        for key, value in data.items():
            key = key.replace("-", "_")
            if key not in DEFAULTS:
                raise ConfigError(f"{path}: unknown setting {key!r}")
            settings[key] = value
    elif explicit:
        raise ConfigError(f"config file {path} not found")
    if isinstance(settings["probe"], str):
        settings["probe"] = [settings["probe"]]
    out = os.environ.get(OUTPUT_ENV)
    if out:
        settings["output_dir"] = out
    return settings
