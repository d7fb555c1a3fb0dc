"""
Parameter checkpoint container.

Layout (all integers little-endian):

    offset 0   4 bytes   magic b"CRCK"
    offset 4   u32       container version
    offset 8   u64       header length H in bytes
    offset 16  H bytes   UTF-8 JSON header (CheckpointHeader, keys sorted)
    offset 16+H          payload: float64 little-endian, C order, one tensor
                         after another at the offsets listed in the header
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from crash_recon.core.errors import CheckpointError
from crash_recon.core.io import atomic_write_bytes
from crash_recon.schemas.training import CheckpointHeader, TensorEntry

logger = logging.getLogger(__name__)

MAGIC = b"CRCK"
CONTAINER_VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def encode_checkpoint(named: List[Tuple[str, str, np.ndarray]], stage: int,
                      hyperparameters: Dict[str, Any]) -> bytes:
    """
    Serialize parameters
    :param named: (name, group, array) in a stable order
    :param stage: last completed training stage
    :param hyperparameters: architecture settings that must match on reload
    """
    entries, blobs, offset = [], [], 0
    for name, group, array in named:
        data = np.ascontiguousarray(array, dtype="<f8")
        entries.append(TensorEntry(name=name, shape=list(data.shape), offset=offset, group=group))
        blobs.append(data.tobytes(order="C"))
        offset += data.nbytes
    header = CheckpointHeader(stage=stage, tensors=entries, hyperparameters=hyperparameters)
    header_bytes = json.dumps(header.model_dump(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, CONTAINER_VERSION, len(header_bytes)) + header_bytes + b"".join(blobs)


def decode_checkpoint(payload: bytes) -> Tuple[CheckpointHeader, Dict[str, np.ndarray]]:
    if len(payload) < _PREFIX.size:
        raise CheckpointError("checkpoint is truncated")
    magic, version, header_len = _PREFIX.unpack_from(payload, 0)
    if magic != MAGIC:
        raise CheckpointError("not a crash-recon checkpoint (bad magic)")
    if version != CONTAINER_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}, expected {CONTAINER_VERSION}")
    start = _PREFIX.size + header_len
    try:
        header = CheckpointHeader.model_validate_json(payload[_PREFIX.size:start])
    except ValueError as e:
        raise CheckpointError(f"checkpoint header is invalid: {e}") from None
    body = memoryview(payload)[start:]
    arrays = {}
    for entry in header.tensors:
        count = int(np.prod(entry.shape)) if entry.shape else 1
        end = entry.offset + 8 * count
        if end > len(body):
            raise CheckpointError(f"tensor {entry.name} runs past the end of the payload")
        arrays[entry.name] = np.frombuffer(body[entry.offset:end], dtype="<f8").reshape(entry.shape).astype(np.float64)
    return header, arrays


def save_checkpoint(path: Union[str, Path], named: List[Tuple[str, str, np.ndarray]], stage: int,
                    hyperparameters: Dict[str, Any]) -> Path:
    path = atomic_write_bytes(path, encode_checkpoint(named, stage, hyperparameters))
    logger.info(f"checkpoint with {len(named)} tensors written to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Tuple[CheckpointHeader, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes())


def check_compatible(header: CheckpointHeader, expected: Dict[str, Any],
                     shapes: Dict[str, Tuple[int, ...]]) -> None:
    """Raise CheckpointError when architecture settings or tensor names/shapes differ"""
    diff = sorted(k for k in set(expected) | set(header.hyperparameters)
                  if expected.get(k) != header.hyperparameters.get(k))
    if diff:
        raise CheckpointError(f"checkpoint hyperparameters differ: {diff}")
    stored = {e.name: tuple(e.shape) for e in header.tensors}
    if set(stored) != set(shapes):
        missing = sorted(set(shapes) - set(stored))
        extra = sorted(set(stored) - set(shapes))
        raise CheckpointError(f"checkpoint tensors differ: missing {missing[:3]}, unexpected {extra[:3]}")
    wrong = [n for n, s in shapes.items() if stored[n] != tuple(s)]
    if wrong:
        raise CheckpointError(f"checkpoint tensor shapes differ for {wrong[:3]}")
