"""Wegman-Carter one-time authentication over GF(2^64).

tag = P_m(h) + r, where P_m is the message polynomial (64-bit blocks plus
a length block) evaluated at the key point h, and r a one-time mask.
Each tag consumes 2k = 128 fresh key bits regardless of message length.
"""
from __future__ import annotations


import numpy as np

K = 64
_ONE = np.uint64(1)
_ALL = np.uint64(0xFFFFFFFFFFFFFFFF)


class PoolExhausted(RuntimeError):
    """Not enough authentication key left."""


def gf64_mul(a, b) -> np.ndarray:
    """Multiply in GF(2^64) = GF(2)[x] / (x^64 + x^4 + x^3 + x + 1), elementwise."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    lo = np.zeros(np.broadcast(a, b).shape, dtype=np.uint64)
    hi = np.zeros_like(lo)
    for i in range(64):
        sh = np.uint64(i)
        m = ((b >> sh) & _ONE) * _ALL
        lo ^= (a << sh) & m
        if i:
            hi ^= (a >> np.uint64(64 - i)) & m
    # x^64 = x^4 + x^3 + x + 1; fold the high word twice
    t = (hi >> np.uint64(63)) ^ (hi >> np.uint64(61)) ^ (hi >> np.uint64(60))
    lo ^= hi ^ (hi << np.uint64(1)) ^ (hi << np.uint64(3)) ^ (hi << np.uint64(4))
    lo ^= t ^ (t << np.uint64(1)) ^ (t << np.uint64(3)) ^ (t << np.uint64(4))
    return lo


def message_blocks(message: bytes) -> np.ndarray:
    """Zero-padded little-endian 64-bit blocks followed by the byte length."""
    pad = (-len(message)) % 8
    body = np.frombuffer(bytes(message) + b"\0" * pad, dtype="<u8").astype(np.uint64)
    return np.append(body, np.uint64(len(message)))


def poly_mac(blocks: np.ndarray, h, r) -> np.ndarray:
    """Horner evaluation for a batch: ``blocks`` is (L,) or (B, L), ``h``/``r`` (B,)."""
    blocks = np.atleast_2d(np.asarray(blocks, dtype=np.uint64))
    h = np.atleast_1d(np.asarray(h, dtype=np.uint64))
    acc = np.zeros(np.broadcast(blocks[:, 0], h).shape, dtype=np.uint64)
    for j in range(blocks.shape[1]):
        acc = gf64_mul(acc ^ blocks[:, j], h)
    return acc ^ np.asarray(r, dtype=np.uint64)


def forgery_bound(message_len: int) -> float:
    """Success probability bound for one forgery attempt: degree / 2^64."""
    return (-(-message_len // 8) + 1) / 2.0**K


def _bits_to_u64(bits: np.ndarray) -> np.uint64:
    return np.frombuffer(np.packbits(bits, bitorder="little").tobytes(), dtype="<u8")[0].astype(np.uint64)


class AuthKeyPool:
    """Secret bits reserved for authentication.  Both parties hold identical
    copies and consume them in lock step."""

    def __init__(self, bits, k: int = K):
        if k != K:
            raise ValueError("only k = 64 is supported")
        self._bits = np.asarray(bits, dtype=np.uint8).copy()
        self._pos = 0
        self.k = k
        self.messages = 0

    @classmethod
    def random(cls, nbits: int, rng: np.random.Generator) -> "AuthKeyPool":
        return cls(rng.integers(0, 2, nbits, dtype=np.uint8))

    def copy(self) -> "AuthKeyPool":
        p = AuthKeyPool(self._bits, self.k)
        p._pos, p.messages = self._pos, self.messages
        return p

    @property
    def size(self) -> int:
        return len(self._bits)

    @property
    def consumed(self) -> int:
        return self._pos

    @property
    def remaining(self) -> int:
        return len(self._bits) - self._pos

    def take(self, nbits: int) -> np.ndarray:
        if nbits > self.remaining:
            raise PoolExhausted(f"need {nbits} bits, {self.remaining} left")
        out = self._bits[self._pos:self._pos + nbits].copy()
        self._bits[self._pos:self._pos + nbits] = 0
        self._pos += nbits
        return out

    def take_key(self) -> tuple[np.uint64, np.uint64]:
        bits = self.take(2 * self.k)
        self.messages += 1
        return _bits_to_u64(bits[:K]), _bits_to_u64(bits[K:])

    def charge(self) -> None:
        """Pay for one authenticated message without using the key here."""
        self.take_key()

    def extend(self, bits) -> None:
        self._bits = np.concatenate([self._bits, np.asarray(bits, dtype=np.uint8)])


def tag_with_key(message: bytes, h, r) -> bytes:
    return int(poly_mac(message_blocks(message), h, r)[0]).to_bytes(8, "little")


def wc_tag(message: bytes, pool: AuthKeyPool) -> bytes:
    h, r = pool.take_key()
    return tag_with_key(message, h, r)


def wc_verify(message: bytes, tag: bytes, pool: AuthKeyPool) -> bool:
    h, r = pool.take_key()
    return tag_with_key(message, h, r) == bytes(tag)


def key_bits_to_u64(bits) -> np.uint64:
    return _bits_to_u64(np.asarray(bits, dtype=np.uint8))


def tag_with_bits(message: bytes, key_bits) -> bytes:
    """Tag under an explicit 128-bit one-time key (first 64 bits: point, rest: mask)."""
    key_bits = np.asarray(key_bits, dtype=np.uint8)
    if len(key_bits) != 2 * K:
        raise ValueError("one-time MAC key must be 128 bits")
    return tag_with_key(message, _bits_to_u64(key_bits[:K]), _bits_to_u64(key_bits[K:]))


def verify_with_bits(message: bytes, tag: bytes, key_bits) -> bool:
    return tag_with_bits(message, key_bits) == bytes(tag)
