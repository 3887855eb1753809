"""Key-material files.

Layout: ``QKEY1`` magic, 8-byte little-endian bit count, packed key bytes,
16-byte blake2b digest of the canonical metadata JSON.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"QKEY1"


def metadata_digest(meta: dict) -> bytes:
    canon = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.blake2b(canon, digest_size=16).digest()


def encode_key(bits, meta: dict) -> bytes:
    bits = np.asarray(bits, dtype=np.uint8)
    return MAGIC + struct.pack("<Q", len(bits)) + np.packbits(bits).tobytes() + metadata_digest(meta)


def decode_key(blob: bytes, meta: dict | None = None) -> np.ndarray:
    if not blob.startswith(MAGIC):
        raise ValueError("not a QKEY1 file")
    (nbits,) = struct.unpack_from("<Q", blob, len(MAGIC))
    start = len(MAGIC) + 8
    nbytes = -(-nbits // 8)
    if len(blob) != start + nbytes + 16:
        raise ValueError("truncated or oversized key file")
    bits = np.unpackbits(np.frombuffer(blob, np.uint8, nbytes, start))[:nbits]
    if meta is not None and blob[-16:] != metadata_digest(meta):
        raise ValueError("metadata digest mismatch")
    return bits


def write_key(path, key) -> None:
    Path(path).write_bytes(encode_key(key.bits, key.epsilon_meta))


def read_key(path, meta: dict | None = None) -> np.ndarray:
    return decode_key(Path(path).read_bytes(), meta)
