"""Provenance records, content hashes and the manifest-tree write lock."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import platform
from contextlib import contextmanager
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import scipy
import torch

from src.errors import ValidationError

logger = logging.getLogger(__name__)

LOCK_NAME = ".tonerank.lock"


def file_sha256(path, chunk_size: int = 1 << 20) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(chunk_size), b""):
            h.update(block)
    return h.hexdigest()


def json_sha256(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def config_hash(config) -> str:
    return json_sha256(config.model_dump(mode="json"))


def tool_versions() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "torch": torch.__version__,
    }


def write_provenance(
    path,
    command: str,
    config,
    overrides: list[str],
    inputs: Optional[dict] = None,
    extra: Optional[dict] = None,
) -> dict:
    """Write the record that makes a command re-runnable: config, inputs, tools, seed."""
    record = {
        "command": command,
        "seed": config.seed,
        "config_hash": config_hash(config),
        "config": config.model_dump(mode="json"),
        "overrides": list(overrides),
        "environment": {
            k: os.environ[k] for k in ("TONERANK_FFMPEG", "TONERANK_VISQOL", "TONERANK_BACKBONE_PATH")
            if k in os.environ
        },
        "inputs": {
            name: file_sha256(p) for name, p in sorted((inputs or {}).items())
            if p is not None and Path(p).is_file()
        },
        "tool_versions": tool_versions(),
    }
    if extra:
        record.update(extra)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2, sort_keys=True, default=str)
    logger.debug("provenance written to %s", path)
    return record


@contextmanager
def tree_lock(directory):
    """Single-writer lock on a manifest tree; a second writer fails immediately."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lock_path = directory / LOCK_NAME
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ValidationError(
            f"{directory} is locked by another writer (remove {lock_path} if that process is gone)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode("ascii"))
        os.close(fd)
        yield lock_path
    finally:
        lock_path.unlink(missing_ok=True)
