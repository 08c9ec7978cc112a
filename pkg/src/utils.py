"""Shared utility functions."""

import os
import re
import tempfile
from pathlib import Path
from typing import Union

import numpy as np


def sanitize_filename(filename: str) -> str:
    """Make an image id safe to use as a filename."""
    # Invalid: / \ : * ? " < > |
    filename = re.sub(r'[/\\:*?"<>|]', "_", filename)
    filename = filename.strip(". ")

    max_length = 200
    if len(filename) > max_length:
        name, ext = os.path.splitext(filename)
        filename = name[: max_length - len(ext)] + ext

    return filename or "unnamed"


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, key...) regardless of call order."""
    return np.random.default_rng([int(seed), *(int(k) for k in keys)])


def format_duration(seconds: float) -> str:
    """Format a duration in human-readable form."""
    if seconds < 1.0:
        return f"{seconds * 1000:.0f} ms"
    if seconds < 60.0:
        return f"{seconds:.1f} s"
    minutes, secs = divmod(int(round(seconds)), 60)
    if minutes < 60:
        return f"{minutes}m {secs:02d}s"
    hours, minutes = divmod(minutes, 60)
    return f"{hours}h {minutes:02d}m"


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> None:
    """Write ``data`` to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise

