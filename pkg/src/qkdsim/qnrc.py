"""Y00 quantum-noise randomized cipher.

Quadrature convention: x = (a + a^dagger)/2, so a coherent state has
variance 1/4 per quadrature under homodyne detection and 1/2 under
heterodyne (one extra vacuum unit).
"""
from __future__ import annotations

import hashlib
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import sympy

from .photonics import ConfigError

HOMODYNE_VAR = 0.25
HETERODYNE_VAR = 0.5
DEFAULT_TAPS = (61, 5, 2, 1, 0)  # x^61 + x^5 + x^2 + x + 1


@dataclass(frozen=True)
class Y00Config:
    M: int
    alpha: float
    channel_eta: float = 1.0
    excess_noise: float = 0.0

    def __post_init__(self):
        if self.M < 2 or self.M % 2:
            raise ConfigError(f"M must be even and >= 2, got {self.M}")
        if not (math.isfinite(self.alpha) and self.alpha >= 0):
            raise ConfigError("alpha must be finite and >= 0")
        if not 0.0 <= self.channel_eta <= 1.0:
            raise ConfigError("channel_eta must lie in [0, 1]")
        if self.excess_noise < 0:
            raise ConfigError("excess_noise must be >= 0")

    @property
    def received_amplitude(self) -> float:
        """|A| after the channel."""
        return self.alpha * math.sqrt(self.channel_eta)

    @property
    def bits_per_symbol(self) -> int:
        return max(1, math.ceil(math.log2(self.M)))


@dataclass(frozen=True)
class Y00Symbol:
    amplitude: complex
    slot: int = 0


@dataclass(frozen=True)
class HomodyneOutcome:
    beta: float
    value: float


# --------------------------------------------------------------------------
# running key
# --------------------------------------------------------------------------


def _polymod_pow_x(e: int, f: int) -> int:
    """x^e mod f over GF(2); polynomials as int bitmasks."""
    deg = f.bit_length() - 1
    result, base = 1, 2

    def mulmod(a, b):
        r = 0
        while b:
            if b & 1:
                r ^= a
            b >>= 1
            a <<= 1
            if (a >> deg) & 1:
                a ^= f
        return r

    while e:
        if e & 1:
            result = mulmod(result, base)
        base = mulmod(base, base)
        e >>= 1
    return result


def is_primitive(taps: Sequence[int]) -> bool:
    """Primitivity of sum(x^t for t in taps) over GF(2)."""
    x = sympy.Symbol("x")
    poly = sympy.Poly(sum(x**t for t in taps), x, modulus=2)
    if not poly.is_irreducible:
        return False
    f = sum(1 << t for t in taps)
    order = (1 << max(taps)) - 1
    return all(_polymod_pow_x(order // p, f) != 1 for p in sympy.factorint(order))


class RunningKeyGen:
    """Fibonacci LFSR keystream.  With feedback polynomial
    x^n + sum x^t the stream obeys s[i+n] = XOR_t s[i+t]."""

    def __init__(self, seed_key: int, taps: Sequence[int] = DEFAULT_TAPS, *, _state=None):
        taps = tuple(sorted(set(int(t) for t in taps), reverse=True))
        if 0 not in taps or len(taps) < 2:
            raise ConfigError("feedback polynomial needs a constant term and degree >= 1")
        self.taps = taps
        self.degree = taps[0]
        self.lower = list(taps[1:])
        if not is_primitive(taps):
            warnings.warn(f"LFSR polynomial {taps} is not primitive; period is shortened", stacklevel=3)
        self.seed_key = int(seed_key)
        state = self.key_to_state(self.seed_key, self.degree) if _state is None else int(_state)
        if state % (1 << self.degree) == 0:
            raise ConfigError("LFSR seed state is all zero")
        self._stream = np.array([(state >> i) & 1 for i in range(self.degree)], dtype=np.uint8)
        self._pos = 0  # bits consumed

    @staticmethod
    def key_to_state(seed_key: int, degree: int) -> int:
        """Hash the key into the register so short keys do not start the
        stream in a long run of zeros."""
        if seed_key < 0:
            raise ConfigError("seed key must be >= 0")
        raw = seed_key.to_bytes(max(1, -(-seed_key.bit_length() // 8)), "little")
        digest = hashlib.blake2b(raw, digest_size=32, person=b"qkdsim-y00-lfsr").digest()
        return int.from_bytes(digest, "little") % (1 << degree)

    @classmethod
    def from_state(cls, state: int, taps: Sequence[int] = DEFAULT_TAPS) -> "RunningKeyGen":
        """Start from an explicit register content (bit i = s[i])."""
        return cls(state, taps, _state=state)

    @property
    def period(self) -> int:
        return (1 << self.degree) - 1

    def _extend(self, total: int) -> None:
        s = self._stream
        if len(s) >= total:
            return
        out = np.zeros(total, dtype=np.uint8)
        out[:len(s)] = s
        L = len(s)
        n, top_low = self.degree, self.lower[0]
        while L < total:
            # f(x)^(2^j) = f(x^(2^j)) over GF(2): lags scale by 2^j
            j = max(0, int(math.floor(math.log2(L / n))))
            m = 1 << j
            while n * m > L:
                m >>= 1
            block = min((n - top_low) * m, total - L)
            i0 = L - n * m
            acc = np.zeros(block, dtype=np.uint8)
            for t in self.lower:
                acc ^= out[i0 + t * m:i0 + t * m + block]
            out[L:L + block] = acc
            L += block
        self._stream = out

    def bits(self, count: int) -> np.ndarray:
        self._extend(self._pos + count)
        out = self._stream[self._pos:self._pos + count].copy()
        self._pos += count
        return out

    def reset(self) -> None:
        self._pos = 0


def expand_running_key(gen: RunningKeyGen, n: int, M: int) -> np.ndarray:
    """Next ``n`` running-key values in [0, M), each from ceil(log2 M) bits
    (most significant first); out-of-range values are redrawn."""
    if n < 1:
        raise ValueError("need n >= 1")
    b = max(1, math.ceil(math.log2(M)))
    weights = 1 << np.arange(b - 1, -1, -1, dtype=np.int64)
    out = []
    got = 0
    while got < n:
        need = n - got
        draw = need if M == 1 << b else int(need * (1 << b) / M) + 8
        start = gen._pos
        z = gen.bits(draw * b).reshape(draw, b).astype(np.int64) @ weights
        ok = np.flatnonzero(z < M)[:need]
        if len(ok) == need:
            # give back bits past the last accepted value
            gen._pos = start + (int(ok[-1]) + 1) * b
        out.append(z[ok])
        got += len(ok)
    return np.concatenate(out)


# --------------------------------------------------------------------------
# cipher
# --------------------------------------------------------------------------


def pol(Z):
    return np.asarray(Z) % 2


def y00_phase(X, Z, M: int):
    """theta = (Z/M + (X xor Pol(Z))) * pi."""
    X = np.asarray(X, dtype=np.int64)
    Z = np.asarray(Z, dtype=np.int64)
    if np.any((Z < 0) | (Z >= M)):
        raise ValueError("running-key value out of range")
    return (Z / M + (X ^ pol(Z))) * math.pi


def y00_encrypt_array(X, Z, cfg: Y00Config) -> np.ndarray:
    return cfg.alpha * np.exp(1j * y00_phase(X, Z, cfg.M))


def y00_encrypt(X: int, Z: int, cfg: Y00Config, slot: int = 0) -> Y00Symbol:
    return Y00Symbol(complex(y00_encrypt_array(X, Z, cfg)), slot)


def through_channel(amps, cfg: Y00Config) -> np.ndarray:
    return np.asarray(amps) * math.sqrt(cfg.channel_eta)


def homodyne_array(amps, beta, rng: np.random.Generator, excess: float = 0.0) -> np.ndarray:
    amps = np.asarray(amps, dtype=complex)
    mean = np.abs(amps) * np.cos(np.angle(amps) - beta)
    return mean + rng.normal(0.0, math.sqrt(HOMODYNE_VAR + excess), np.shape(mean))


def heterodyne_array(amps, rng: np.random.Generator, excess: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    amps = np.asarray(amps, dtype=complex)
    sd = math.sqrt(HETERODYNE_VAR + excess)
    return (amps.real + rng.normal(0.0, sd, amps.shape),
            amps.imag + rng.normal(0.0, sd, amps.shape))


def homodyne_measure(sym: Y00Symbol, beta: float, rng: np.random.Generator,
                     excess: float = 0.0) -> HomodyneOutcome:
    return HomodyneOutcome(beta, float(homodyne_array(sym.amplitude, beta, rng, excess)))


def heterodyne_measure(sym: Y00Symbol, rng: np.random.Generator,
                       excess: float = 0.0) -> tuple[float, float]:
    x, p = heterodyne_array(sym.amplitude, rng, excess)
    return float(x), float(p)


def bob_beta(Z, M: int):
    return np.asarray(Z) * math.pi / M


def y00_decrypt_array(values, Z) -> np.ndarray:
    return ((np.asarray(values) < 0).astype(np.int64) ^ pol(Z)).astype(np.uint8)


def y00_decrypt(outcome: HomodyneOutcome, Z: int, cfg: Y00Config) -> int:
    return int(y00_decrypt_array(outcome.value, Z))


# --------------------------------------------------------------------------
# attacker harnesses
# --------------------------------------------------------------------------


def eve_state_index(x, p, M: int) -> np.ndarray:
    """Index k of the nearest of the 2M signal phases k*pi/M."""
    ang = np.arctan2(p, x)
    return np.mod(np.rint(ang / (math.pi / M)).astype(np.int64), 2 * M)


def eve_nearest_state(het, cfg: Y00Config):
    """(X_hat, Z_hat) from a heterodyne pair (arrays allowed)."""
    k = eve_state_index(het[0], het[1], cfg.M)
    z = k % cfg.M
    return ((k // cfg.M) ^ (z % 2)).astype(np.uint8), z


def eve_known_plaintext(het, X, cfg: Y00Config) -> np.ndarray:
    """Z_hat when Eve knows X: nearest among the M states consistent with X."""
    M = cfg.M
    z = np.arange(M)
    X = np.asarray(X, dtype=np.int64)
    ang = np.arctan2(het[1], het[0])
    cand = (z[None, :] / M + (X[:, None] ^ (z[None, :] % 2))) * math.pi
    d = np.abs(np.angle(np.exp(1j * (ang[:, None] - cand))))
    return np.argmin(d, axis=1)


def masking_count(cfg: Y00Config) -> int:
    """1 + 2 floor(sigma_phase / (pi/M)), sigma_phase = sqrt(1/2)/|A|."""
    a = cfg.received_amplitude
    if a == 0:
        return 2 * cfg.M
    sigma = math.sqrt(HETERODYNE_VAR + cfg.excess_noise) / a
    return min(2 * cfg.M, 1 + 2 * int(math.floor(sigma / (math.pi / cfg.M))))


def masking_count_mc(cfg: Y00Config, n: int, rng: np.random.Generator) -> int:
    """Number of state offsets Eve confuses with the true one at a rate of at
    least e^(-1/2) of the most likely offset (one-sigma neighbourhood)."""
    M = cfg.M
    k_true = rng.integers(0, 2 * M, n)
    amps = cfg.received_amplitude * np.exp(1j * k_true * math.pi / M)
    x, p = heterodyne_array(amps, rng, cfg.excess_noise)
    off = np.mod(eve_state_index(x, p, M) - k_true + M, 2 * M)
    hist = np.bincount(off, minlength=2 * M)
    return int(np.count_nonzero(hist >= hist.max() * math.exp(-0.5)))


@dataclass
class QnrcResult:
    n: int
    bob_ber: float
    eve_symbol_error: float
    eve_bit_error: float
    eve_kp_symbol_error: float
    gamma: int
    gamma_mc: int

    def as_row(self) -> dict:
        return dict(self.__dict__)


def run_qnrc(cfg: Y00Config, n: int, seed_key: int, rng: np.random.Generator,
             taps: Sequence[int] = DEFAULT_TAPS) -> QnrcResult:
    """Encrypt ``n`` random bits, decrypt at Bob, attack at Eve."""
    alice_gen = RunningKeyGen(seed_key, taps)
    bob_gen = RunningKeyGen(seed_key, taps)
    X = rng.integers(0, 2, n)
    Z = expand_running_key(alice_gen, n, cfg.M)
    tx = y00_encrypt_array(X, Z, cfg)
    rx = through_channel(tx, cfg)
    Zb = expand_running_key(bob_gen, n, cfg.M)
    xb = y00_decrypt_array(homodyne_array(rx, bob_beta(Zb, cfg.M), rng, cfg.excess_noise), Zb)
    het = heterodyne_array(rx, rng, cfg.excess_noise)
    x_hat, z_hat = eve_nearest_state(het, cfg)
    z_kp = eve_known_plaintext(het, X, cfg)
    return QnrcResult(n, float(np.mean(xb != X)), float(np.mean(z_hat != Z)),
                      float(np.mean(x_hat != X)), float(np.mean(z_kp != Z)),
                      masking_count(cfg), masking_count_mc(cfg, n, rng))
