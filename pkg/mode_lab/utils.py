"""File and seed helpers shared by the command line and the library."""

from __future__ import annotations

import csv
import hashlib
import io
import os
from pathlib import Path
import tempfile
from typing import TYPE_CHECKING, Any

from pydantic import BaseModel, ValidationError

from mode_lab.config import describe_validation_error
from mode_lab.exceptions import ConfigError


if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence


def derive_seed(master: int, label: str) -> int:
    """Split a master seed into a stable, unsigned 64-bit sub-seed.

    The sub-seed is the first eight bytes (big-endian) of
    ``sha256(f"{master}|{label}")``, so it only depends on the two inputs.
    """
    digest = hashlib.sha256(f"{master}|{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def read_text_file(path: str | os.PathLike[str]) -> str:
    """Read a UTF-8 text file, reporting unreadable files as ConfigError."""
    try:
        return Path(path).read_bytes().decode("utf-8")
    except FileNotFoundError as e:
        msg = f"File not found: {path}"
        raise ConfigError(msg) from e
    except UnicodeDecodeError as e:
        msg = f"File {path} could not be read as UTF-8 text."
        raise ConfigError(msg) from e


def load_model_json[M: BaseModel](model_cls: type[M], path: str | os.PathLike[str]) -> M:
    """Load and validate a JSON document into a pydantic model."""
    text = read_text_file(path)
    try:
        return model_cls.model_validate_json(text)
    except ValidationError as e:
        msg = f"{path}: {describe_validation_error(e)}"
        raise ConfigError(msg) from e


def atomic_write_text(path: str | os.PathLike[str], text: str) -> Path:
    """Write `text` to `path` through a temporary file and a rename."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        Path(tmp_name).replace(target)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return target


def write_model_json(path: str | os.PathLike[str], model: BaseModel) -> Path:
    return atomic_write_text(path, model.model_dump_json(indent=2, by_alias=True) + "\n")


def write_csv(
    path: str | os.PathLike[str],
    fieldnames: Sequence[str],
    rows: Iterable[Mapping[str, Any]],
) -> Path:
    """Write rows as CSV with a header, atomically."""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row.get(k, "") for k in fieldnames})
    return atomic_write_text(path, buf.getvalue())


def read_csv(path: str | os.PathLike[str]) -> list[dict[str, str]]:
    with Path(path).open(encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))
