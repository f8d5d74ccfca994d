# Copyright (c) 2025 fsrel contributors
#
# BSD 3-Clause License

import hashlib
import json
import logging
import random
import sys
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Union

import numpy as np
import structlog
import torch

PathLike = Union[str, Path]


###############################################################################
# Logging
###############################################################################


def configure_logging(level: str = "INFO", json_output: Optional[bool] = None) -> None:
    """
    Route stdlib logging through structlog's formatter.

    Modules keep using ``logging.getLogger(__name__)``; only the rendering changes.

    Args:
        level: Root log level name
        json_output: Force JSON rendering. Defaults to JSON when stderr is not a TTY.
    """
    if json_output is None:
        json_output = not sys.stderr.isatty()

    renderer = (
        structlog.processors.JSONRenderer()
        if json_output
        else structlog.dev.ConsoleRenderer(colors=False)
    )
    formatter = structlog.stdlib.ProcessorFormatter(
        processor=renderer,
        foreign_pre_chain=[
            structlog.stdlib.add_log_level,
            structlog.stdlib.add_logger_name,
            structlog.processors.TimeStamper(fmt="iso"),
        ],
    )
    handler = logging.StreamHandler()
    handler.setFormatter(formatter)

    root = logging.getLogger()
    root.handlers = [handler]
    root.setLevel(level)


###############################################################################
# Seeding
###############################################################################


def seed_everything(seed: int) -> np.random.Generator:
    """Seed python, numpy and torch; return a fresh numpy generator for the caller."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


###############################################################################
# Hashing
###############################################################################


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def sha256_hex(data: Union[str, bytes]) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def git_blob_hash(path: PathLike) -> str:
    """Content hash of a file computed the way ``git hash-object`` does."""
    content = Path(path).read_bytes()
    header = f"blob {len(content)}\0".encode("utf-8")
    return hashlib.sha1(header + content).hexdigest()  # noqa: S324


###############################################################################
# JSON IO
###############################################################################


def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def read_json(path: PathLike) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


class JsonLinesWriter:
    """JSON lines file opened for writing; an existing file is replaced."""

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = self.path.open("w", encoding="utf-8")
        self.count = 0

    def write(self, record: Dict[str, Any]) -> None:
        self._handle.write(json.dumps(record, sort_keys=True) + "\n")
        self._handle.flush()
        self.count += 1

    def write_all(self, records: Iterable[Dict[str, Any]]) -> None:
        for record in records:
            self.write(record)

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> "JsonLinesWriter":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def read_json_lines(path: PathLike) -> list:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]
