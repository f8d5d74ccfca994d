# Copyright (c) 2025 fsrel contributors
#
# BSD 3-Clause License

"""
Checkpoint container.

Layout: magic, header length (8 bytes, big endian), canonical JSON header
(format version, config hash, step, model config, vocabulary, sampler rng
state), a ``torch.save`` payload of the model and optimizer state dicts, and a
trailing SHA-256 of everything before it.
"""

import hashlib
import io
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import torch
from pydantic import ValidationError

from fsrel.errors import ConfigurationError, IntegrityError
from fsrel.model import RelationModel
from fsrel.models import ModelConfig
from fsrel.utils import PathLike, canonical_json

logger = logging.getLogger(__name__)

MAGIC = b"FSRELCK1"
FORMAT_VERSION = 1
_DIGEST_SIZE = 32


@dataclass
class LoadedCheckpoint:
    model: RelationModel
    step: int
    header: Dict[str, Any]
    optimizer_state: Optional[dict] = None
    rng_state: Optional[dict] = None


def save_checkpoint(
    model: RelationModel,
    path: PathLike,
    step: int = 0,
    optimizer: Optional[torch.optim.Optimizer] = None,
    rng_state: Optional[dict] = None,
) -> Path:
    path = Path(path)
    header = {
        "format_version": FORMAT_VERSION,
        "config_hash": model.cfg.config_hash(),
        "step": step,
        "model_config": model.cfg.model_dump(mode="json"),
        "categories": model.categories,
        "predicates": model.predicates,
        "rng_state": rng_state,
        "parameters": [name for name, _ in model.named_parameters()],
    }
    buffer = io.BytesIO()
    torch.save(
        {"model": model.state_dict(), "optimizer": optimizer.state_dict() if optimizer is not None else None},
        buffer,
    )
    header_bytes = canonical_json(header).encode("utf-8")
    body = MAGIC + len(header_bytes).to_bytes(8, "big") + header_bytes + buffer.getvalue()

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)
    logger.info(f"Wrote checkpoint {path} at step {step}")
    return path


def read_checkpoint(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    """Verify the container and return (header, payload dict)."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise IntegrityError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < len(MAGIC) + 8 + _DIGEST_SIZE or not data.startswith(MAGIC):
        raise IntegrityError(f"{path} is not an fsrel checkpoint")
    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"checkpoint {path} failed its checksum")

    offset = len(MAGIC)
    header_len = int.from_bytes(body[offset:offset + 8], "big")
    offset += 8
    try:
        header = json.loads(body[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise IntegrityError(f"checkpoint {path} has an unreadable header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"checkpoint format {header.get('format_version')} is not supported")
    payload = torch.load(io.BytesIO(body[offset + header_len:]), weights_only=True)
    return header, payload


def load_checkpoint(
    path: PathLike,
    expected: Optional[ModelConfig] = None,
    allow_config_mismatch: bool = False,
) -> LoadedCheckpoint:
    """
    Rebuild a model from a checkpoint.

    When ``expected`` is given its hash must equal the stored one. With
    ``allow_config_mismatch`` the expected config is used for construction and
    the stored weights must still fit it.
    """
    header, payload = read_checkpoint(path)
    try:
        stored = ModelConfig.model_validate(header["model_config"])
    except (KeyError, ValidationError) as exc:
        raise IntegrityError(f"checkpoint {path} has an invalid model config") from exc

    cfg = stored
    if expected is not None and expected.config_hash() != header["config_hash"]:
        if not allow_config_mismatch:
            raise ConfigurationError(
                f"checkpoint {path} was written with model config {header['config_hash'][:12]}, "
                f"current config is {expected.config_hash()[:12]}"
            )
        logger.warning(f"Loading checkpoint {path} under a different model config")
        cfg = expected

    model = RelationModel(cfg, header["categories"], header["predicates"])
    try:
        model.load_state_dict(payload["model"])
    except RuntimeError as exc:
        raise ConfigurationError(f"checkpoint weights do not fit the model config: {exc}") from exc
    model.label_embedder.invalidate()
    model.eval()
    return LoadedCheckpoint(
        model=model,
        step=int(header["step"]),
        header=header,
        optimizer_state=payload.get("optimizer"),
        rng_state=header.get("rng_state"),
    )
