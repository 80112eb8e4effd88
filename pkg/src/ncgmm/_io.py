"""File helpers: atomic writes and float formatting."""
from __future__ import annotations

import os
import tempfile
from pathlib import Path


def fmt(x: float) -> str:
    """17 significant digits, enough to round-trip any float64."""
    return format(float(x), ".17g")


def atomic_write(path, data: bytes | str) -> None:
    """Write ``data`` to a temp file next to ``path`` and rename it in place.

    A crash mid-write leaves either the old file or nothing, never a
    truncated one.
    """
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise
