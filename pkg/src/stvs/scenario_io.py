"""TOML read/write helpers used for scenario, tuning and report files."""

from __future__ import annotations

import sys
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ValidationError


def read_toml(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError([(str(path), f"cannot read file: {exc.strerror}")]) from exc
    if not text.strip():
        raise ValidationError([(str(path), "empty file; schema_version is required")])
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError([(str(path), f"parse error: {exc}")]) from exc


def dumps(data: dict) -> str:
    return tomli_w.dumps(data)


def write_toml(data: dict, path) -> Path:
    path = Path(path)
    path.write_text(dumps(data))
    return path
