"""
LATB checkpoint files.

Layout (little-endian): magic ``LATB``, version u32, header length u32, UTF-8 JSON
header, then one record per tensor until end of file: name length u32, UTF-8 name,
rank u32, dims u32 each, float32 values.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"LATB"
VERSION = 1


class DatasetError(ValueError):
    """Raised when a binary file is malformed or does not match expectations."""


def save_checkpoint(path: Union[str, Path], tensors: Dict[str, np.ndarray], header: Dict[str, Any] = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header_bytes = json.dumps(header or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(header_bytes)))
        f.write(header_bytes)
        for name, value in tensors.items():
            array = np.asarray(value, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", array.ndim))
            if array.ndim:
                f.write(struct.pack(f"<{array.ndim}I", *array.shape))
            f.write(array.tobytes())
    logger.info(f"Saved {len(tensors)} tensors to {path}")


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise DatasetError(f"{path} is not a checkpoint (bad magic {raw[:4]!r})")
    try:
        version, header_len = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise DatasetError(f"unsupported checkpoint version {version}")
        offset = 12
        header = json.loads(raw[offset:offset + header_len].decode("utf-8"))
        offset += header_len
        tensors: Dict[str, np.ndarray] = {}
        while offset < len(raw):
            (name_len,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            name = raw[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", raw, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", raw, offset) if rank else ()
            offset += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            values = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
            offset += 4 * count
            tensors[name] = values.reshape(dims).astype(np.float32)
    except (struct.error, ValueError) as e:
        if isinstance(e, DatasetError):
            raise
        raise DatasetError(f"truncated or corrupt checkpoint {path}: {e}") from e
    return tensors, header
