"""Privacy amplification with Toeplitz hashing."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from ..protocols import h2
from .estimation import SecurityParams


@dataclass
class SecretKey:
    bits: np.ndarray
    epsilon_meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.bits)

    def to_bytes(self) -> bytes:
        return np.packbits(self.bits).tobytes()


def final_length(n: int, single_fraction: float, e1_upper: float, leak_bits: int,
                 params: SecurityParams) -> int:
    """max(0, floor(n*A*(1 - h2(e1)) - leak - 2l - s))."""
    raw = n * single_fraction * (1.0 - h2(e1_upper)) - leak_bits - 2 * params.l - params.s
    return max(0, int(math.floor(raw)))


class Toeplitz:
    """An l-by-n binary Toeplitz matrix, defined by its n+l-1 diagonal bits.

    Entry (i, j) is ``seed[i - j + n - 1]``.
    """

    def __init__(self, seed_bits: np.ndarray, n: int, l: int):
        seed_bits = np.asarray(seed_bits, dtype=np.uint8)
        if len(seed_bits) != max(0, n + l - 1):
            raise ValueError("Toeplitz seed must have n + l - 1 bits")
        self.seed, self.n, self.l = seed_bits, n, l

    @classmethod
    def random(cls, n: int, l: int, rng: np.random.Generator) -> "Toeplitz":
        return cls(rng.integers(0, 2, max(0, n + l - 1), dtype=np.uint8), n, l)

    def matrix(self) -> np.ndarray:
        i = np.arange(self.l)[:, None]
        j = np.arange(self.n)[None, :]
        return self.seed[i - j + self.n - 1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.uint8)
        if len(x) != self.n:
            raise ValueError("input length does not match the hash")
        if self.l == 0:
            return np.zeros(0, dtype=np.uint8)
        conv = fftconvolve(self.seed.astype(np.float64), x.astype(np.float64))
        window = conv[self.n - 1:self.n - 1 + self.l]
        return (np.rint(window).astype(np.int64) & 1).astype(np.uint8)


def privacy_amplify(key, e1_upper: float, single_photon_fraction: float, params: SecurityParams,
                    rng: np.random.Generator, *, leak_bits: int | None = None) -> SecretKey:
    """Compress a reconciled key. ``rng`` stands for the public random seed
    both parties agree on, so calling with equal generators yields equal
    hashes."""
    if not getattr(key, "verified", True):
        raise ValueError("privacy amplification needs a verified key")
    bits = np.asarray(getattr(key, "bits", key), dtype=np.uint8)
    leak = int(getattr(key, "leak_bits", 0) if leak_bits is None else leak_bits)
    n = len(bits)
    ell = final_length(n, single_photon_fraction, e1_upper, leak, params)
    hashed = Toeplitz.random(n, ell, rng)(bits) if ell > 0 else np.zeros(0, np.uint8)
    meta = {
        "n": n,
        "single_photon_fraction": float(single_photon_fraction),
        "e1_upper": float(e1_upper),
        "leak_bits": leak,
        "s": params.s,
        "l": params.l,
        "length": ell,
    }
    return SecretKey(hashed, meta)
