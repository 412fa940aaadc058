"""TOML reading/writing shared by the parameter, range and config files."""

from __future__ import annotations

from pathlib import Path

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

import tomli_w


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def loads_toml(text: str) -> dict:
    return tomllib.loads(text)


def dumps_toml(data: dict) -> str:
    return tomli_w.dumps(data)


def save_toml(path, data: dict) -> None:
    Path(path).write_text(dumps_toml(data))
