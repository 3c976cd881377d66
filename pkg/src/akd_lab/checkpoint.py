"""
Self-describing binary checkpoints.

Layout (all integers little-endian)::

    b"AKDC" | version: u8 | header_len: u32 | header: UTF-8 JSON
    | payload: float64 arrays in header order | sha256(preceding bytes)

The header records the model spec, init seed, epoch index, tensor names and
shapes, and free-form metadata (config hash, role).
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from .errors import ArtifactError, ConfigError
from .models import Model, ModelSpec, Params

MAGIC = b"AKDC"
VERSION = 1
_DIGEST_SIZE = 32


@dataclass(frozen=True, eq=False)
class Checkpoint:
    params: Params
    spec: ModelSpec
    epoch: int
    metadata: Dict[str, Any] = field(default_factory=dict)
    path: Optional[Path] = None

    @property
    def model(self) -> Model:
        return Model(self.spec, self.params)


def save_checkpoint(
    params: Params,
    path: Union[str, Path],
    *,
    spec: ModelSpec,
    epoch: int,
    metadata: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write ``params`` atomically; returns the final path."""
    params.check_against(spec)
    path = Path(path)
    header = {
        "spec": spec.to_dict(),
        "seed": params.seed,
        "epoch": epoch,
        "metadata": metadata or {},
        "tensors": [[name, list(array.shape)] for name, array in params.tensors.items()],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray(MAGIC)
    body += struct.pack("<BI", VERSION, len(header_bytes))
    body += header_bytes
    for array in params.tensors.values():
        body += np.ascontiguousarray(array, dtype="<f8").tobytes()
    body += hashlib.sha256(body).digest()

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(bytes(body))
    os.replace(tmp, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """Read and verify a checkpoint; any defect raises :class:`ArtifactError`."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise ArtifactError(path, "checkpoint not found") from None
    except OSError as e:
        raise ArtifactError(path, f"cannot read checkpoint: {e}") from e

    if len(raw) < len(MAGIC) + 5 + _DIGEST_SIZE or raw[: len(MAGIC)] != MAGIC:
        raise ArtifactError(path, "not an akd-lab checkpoint")
    body, digest = raw[:-_DIGEST_SIZE], raw[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise ArtifactError(path, "checksum mismatch (truncated or corrupt file)")

    version, header_len = struct.unpack_from("<BI", body, len(MAGIC))
    if version != VERSION:
        raise ArtifactError(path, f"unsupported checkpoint version {version}")
    offset = len(MAGIC) + 5
    try:
        header = json.loads(body[offset : offset + header_len].decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        layout = [(str(name), tuple(int(d) for d in shape)) for name, shape in header["tensors"]]
        seed, epoch = int(header["seed"]), int(header["epoch"])
        metadata = header.get("metadata", {})
    except (ValueError, KeyError, TypeError, ConfigError) as e:
        raise ArtifactError(path, f"malformed header: {e!r}") from e
    offset += header_len

    tensors = {}
    for name, shape in layout:
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(body):
            raise ArtifactError(path, f"payload truncated in tensor '{name}'")
        tensors[name] = np.frombuffer(body[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(body):
        raise ArtifactError(path, "trailing bytes after payload")

    params = Params(tensors, seed=seed)
    return Checkpoint(params, spec, epoch, metadata, path)
