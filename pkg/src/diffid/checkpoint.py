"""Versioned checkpoint files: a JSON config blob plus a flat float64 vector.

Layout: magic line, uint32 LE config length, UTF-8 JSON config, uint64 LE
parameter count, little-endian float64 parameters, sha256 of all preceding
bytes. Shared by the diffusion engine and the pre-training backbone.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import IntegrityError

MAGIC = b"DIFFID-CKPT v1\n"


def save_checkpoint(path, params: np.ndarray, config: dict):
    params = np.ascontiguousarray(np.asarray(params, dtype=np.float64).ravel())
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    body = b"".join([
        MAGIC,
        struct.pack("<I", len(blob)),
        blob,
        struct.pack("<Q", params.size),
        params.astype("<f8").tobytes(),
    ])
    digest = hashlib.sha256(body).digest()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + digest)
    tmp.replace(path)


def load_checkpoint(path):
    """Read a checkpoint, returning (params, config)."""
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 32 or not raw.startswith(MAGIC):
        raise IntegrityError(f"{path}: not a DIFFID-CKPT v1 file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch")
    off = len(MAGIC)
    (blob_len,) = struct.unpack_from("<I", body, off)
    off += 4
    config = json.loads(body[off:off + blob_len].decode("utf-8"))
    off += blob_len
    (count,) = struct.unpack_from("<Q", body, off)
    off += 8
    params = np.frombuffer(body, dtype="<f8", count=count, offset=off).copy()
    return params, config
