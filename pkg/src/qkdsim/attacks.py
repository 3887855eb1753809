"""Channel-replacement adversaries.

Each attack takes Alice's output (qubit pulses or a coherent train), returns
what reaches Bob's receiver, and keeps an :class:`EveRecord` aligned to slot
indices.  Eve's line to Bob is lossless; she owns the whole channel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .photonics import (
    Basis,
    CoherentTrain,
    ConfigError,
    PulseBatch,
    QubitPulse,
    bb84_bloch,
    basis_axis,
)

__all__ = [
    "AttackKind",
    "AttackConfig",
    "EveRecord",
    "PnsPolicy",
    "intercept_resend",
    "intercept_resend_batch",
    "solve_pns_policy",
    "pns_transform",
    "pns_batch",
    "pns_read_stored",
    "usd_measure",
    "usd_sequential",
]


class AttackKind(str, Enum):
    INTERCEPT_RESEND = "INTERCEPT_RESEND"
    PNS = "PNS"
    USD_SEQUENTIAL = "USD_SEQUENTIAL"


@dataclass(frozen=True)
class AttackConfig:
    """``strategy`` picks Eve's intercept basis: "random", "match" (Alice's
    basis, for calibration) or a fixed "X"/"Y".  ``target_yield`` overrides
    the PNS honest-yield target.  ``resend_mu`` fixes the USD resend
    intensity; by default Eve matches Bob's honest click rate."""

    kind: AttackKind
    strategy: str = "random"
    fraction: float = 1.0
    target_yield: Optional[float] = None
    block_len: int = 1
    resend_mu: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", AttackKind(self.kind))
        if self.strategy not in ("random", "match", "X", "Y"):
            raise ConfigError(f"unknown intercept strategy {self.strategy!r}")
        if not 0.0 <= self.fraction <= 1.0:
            raise ConfigError("interception fraction must lie in [0, 1]")
        if self.block_len < 1:
            raise ConfigError("block_len must be >= 1")
        if self.target_yield is not None and not 0.0 <= self.target_yield <= 1.0:
            raise ConfigError("target_yield must lie in [0, 1]")


@dataclass
class EveRecord:
    slot: np.ndarray
    intercepted: Optional[np.ndarray] = None
    basis: Optional[np.ndarray] = None
    bit: Optional[np.ndarray] = None
    stored: Optional[np.ndarray] = None
    usd_success: Optional[np.ndarray] = None
    info: dict = field(default_factory=dict)


# --------------------------------------------------------------------------
# intercept-resend
# --------------------------------------------------------------------------


def _eve_bases(strategy: str, size: int, alice_bases, rng) -> np.ndarray:
    if strategy == "random":
        return rng.integers(0, 2, size, dtype=np.int8)
    if strategy == "match":
        if alice_bases is None:
            raise ConfigError("strategy 'match' needs Alice's bases")
        return np.asarray(alice_bases, dtype=np.int8).copy()
    return np.full(size, int(Basis[strategy]), dtype=np.int8)


def intercept_resend_batch(batch: PulseBatch, cfg: AttackConfig, rng: np.random.Generator,
                           alice_bases=None) -> tuple[PulseBatch, np.ndarray, EveRecord]:
    """Measure-and-resend on a fraction of pulses.

    Returns (resent pulses, intercepted mask, record).  The resent batch holds
    a fresh single photon in Eve's measured state for every intercepted,
    non-empty pulse and vacuum otherwise.  Pulses outside the mask are left
    for the honest channel.
    """
    size = len(batch)
    intercepted = rng.random(size) < cfg.fraction if cfg.fraction < 1.0 else np.ones(size, bool)
    eb = _eve_bases(cfg.strategy, size, alice_bases, rng)
    p0 = np.clip(0.5 * (1.0 + np.einsum("ij,ij->i", batch.bloch, basis_axis(eb))), 0.0, 1.0)
    bits = (rng.random(size) >= p0).astype(np.int8)
    has_photon = batch.n > 0
    n_out = (intercepted & has_photon).astype(np.int64)
    resent = PulseBatch(n_out, bb84_bloch(eb, bits), batch.class_idx, batch.slot, batch.class_ids)
    bits = np.where(has_photon, bits, -1).astype(np.int8)
    rec = EveRecord(batch.slot.copy(), intercepted=intercepted, basis=eb, bit=bits)
    return resent, intercepted, rec


def intercept_resend(pulse: QubitPulse, strategy: str, rng: np.random.Generator,
                     alice_basis: Optional[int] = None) -> tuple[QubitPulse, dict]:
    cfg = AttackConfig(AttackKind.INTERCEPT_RESEND, strategy=strategy)
    ab = None if alice_basis is None else [alice_basis]
    out, _, rec = intercept_resend_batch(PulseBatch.from_pulse(pulse), cfg, rng, ab)
    return out.pulse(0), {"slot": pulse.slot, "basis": int(rec.basis[0]), "bit": int(rec.bit[0])}


# --------------------------------------------------------------------------
# photon-number splitting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class PnsPolicy:
    """Forwarding probabilities by photon number.

    ``forward_multi`` is below 1 only when the multi-photon part alone already
    exceeds the honest yield; ``saturated`` flags a target Eve cannot reach
    even by forwarding everything.
    """

    forward_single: float
    forward_multi: float
    target_yield: float
    saturated: bool = False


def solve_pns_policy(mu: float, eta: float, det_eff: float = 1.0,
                     target_yield: Optional[float] = None) -> PnsPolicy:
    """Block single photons so Bob's click probability equals the honest one.

    Honest signal yield is 1 - exp(-mu*eta*det_eff); under attack Bob sees one
    photon from each forwarded pulse, detected with probability det_eff.
    """
    y = -math.expm1(-mu * eta * det_eff) if target_yield is None else target_yield
    p1 = mu * math.exp(-mu)
    pm = -math.expm1(-mu) - p1
    if pm * det_eff >= y:
        return PnsPolicy(0.0, y / (pm * det_eff) if pm > 0 else 0.0, y)
    if (p1 + pm) * det_eff < y:
        return PnsPolicy(1.0, 1.0, y, saturated=True)
    return PnsPolicy((y - pm * det_eff) / (p1 * det_eff), 1.0, y)


def pns_batch(batch: PulseBatch, policy: PnsPolicy,
              rng: np.random.Generator) -> tuple[PulseBatch, EveRecord]:
    n = batch.n
    u = rng.random(len(batch))
    fwd = np.where(n >= 2, u < policy.forward_multi, (n == 1) & (u < policy.forward_single))
    n_out = fwd.astype(np.int64)
    out = PulseBatch(n_out, batch.bloch, batch.class_idx, batch.slot, batch.class_ids)
    rec = EveRecord(batch.slot.copy(), stored=n - n_out,
                    info={"policy": policy, "saturated": policy.saturated})
    return out, rec


def pns_transform(pulse: QubitPulse, eta: float, policy: PnsPolicy,
                  rng: np.random.Generator) -> tuple[QubitPulse, int]:
    """Single-pulse form: returns (pulse forwarded over a lossless line, photons kept)."""
    out, rec = pns_batch(PulseBatch.from_pulse(pulse), policy, rng)
    return out.pulse(0), int(rec.stored[0])


def pns_read_stored(stored: np.ndarray, alice_bloch: np.ndarray, announced_bases,
                    rng: np.random.Generator) -> np.ndarray:
    """Eve's bit guesses from stored copies, measured after basis announcement.

    -1 where nothing was stored.
    """
    has = np.asarray(stored) > 0
    axes = basis_axis(announced_bases)
    p0 = np.clip(0.5 * (1.0 + np.einsum("ij,ij->i", alice_bloch, axes)), 0.0, 1.0)
    bits = (rng.random(len(p0)) >= p0).astype(np.int8)
    return np.where(has, bits, -1).astype(np.int8)


# --------------------------------------------------------------------------
# unambiguous state discrimination
# --------------------------------------------------------------------------


def usd_measure(amps: np.ndarray, mu: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Discriminate |+a> from |-a> (a = sqrt(mu)) without error.

    The input interferes with a local copy of |+a> on a balanced splitter;
    ``+a`` sends 2|a|^2 photons on average to port "+" and none to port "-",
    and vice versa.  Any click identifies the state; no click is a failure.
    Returns (success mask, sign where +1/-1, 0 on failure).
    """
    amps = np.asarray(amps, dtype=np.complex128)
    lo = math.sqrt(mu)
    n_plus = rng.poisson(np.abs(amps + lo) ** 2 / 2.0)
    n_minus = rng.poisson(np.abs(amps - lo) ** 2 / 2.0)
    plus = (n_plus > 0) & (n_minus == 0)
    minus = (n_minus > 0) & (n_plus == 0)
    sign = plus.astype(np.int8) - minus.astype(np.int8)
    return plus | minus, sign


def _runs_at_least(mask: np.ndarray, k: int) -> np.ndarray:
    """Mark elements belonging to runs of consecutive True of length >= k."""
    if k <= 1:
        return mask.copy()
    m = np.concatenate([[False], mask, [False]]).astype(np.int8)
    d = np.diff(m)
    starts, ends = np.flatnonzero(d == 1), np.flatnonzero(d == -1)
    keep = np.zeros(len(mask), dtype=bool)
    for s, e in zip(starts, ends):
        if e - s >= k:
            keep[s:e] = True
    return keep


def usd_sequential(train: CoherentTrain, mu: float, block_len: int, rng: np.random.Generator,
                   *, eta: float = 1.0, det_eff: float = 1.0, resend_mu: Optional[float] = None,
                   beta: Optional[float] = None) -> tuple[CoherentTrain, EveRecord]:
    """Sequential USD attack on Alice's emitted train.

    Single-mode (DPS) trains: blocks of ``block_len`` or more consecutive
    successes are resent as clean coherent pulses with the identified
    phases; everything else is replaced by vacuum.  Two-mode (B92) trains:
    every success is resent with a reference of the honest received strength
    ``beta*sqrt(eta)``; failures suppress signal and reference.
    """
    if mu <= 0:
        empty = CoherentTrain(np.zeros_like(train.amps), train.global_phase_randomized)
        z = np.zeros(len(train), dtype=bool)
        return empty, EveRecord(np.arange(len(train)), usd_success=z, bit=np.full(len(train), -1, np.int8))
    sig = train.amps[:, 0] if train.two_mode else train.amps
    ok, sign = usd_measure(sig, mu, rng)
    slots = np.arange(len(train), dtype=np.int64)
    bits = np.where(ok, (sign < 0).astype(np.int8), -1).astype(np.int8)
    if train.two_mode:
        if beta is None:
            raise ConfigError("B92 USD attack needs the reference amplitude beta")
        # honest decode-port mean photon number is 2*mu*eta
        if resend_mu is None:
            resend_mu = _match_rate(-math.expm1(-2 * mu * eta * det_eff), ok.mean(), 2 * det_eff)
        out = np.zeros_like(train.amps)
        out[ok, 0] = sign[ok] * math.sqrt(resend_mu)
        out[ok, 1] = beta * math.sqrt(eta)
        rec = EveRecord(slots, usd_success=ok, bit=bits, info={"resend_mu": resend_mu})
        return CoherentTrain(out, train.global_phase_randomized), rec
    keep = _runs_at_least(ok, block_len)
    if resend_mu is None:
        resend_mu = _match_rate(-math.expm1(-mu * eta * det_eff), keep.mean(), det_eff)
    out = np.where(keep, sign * math.sqrt(resend_mu), 0.0).astype(np.complex128)
    rec = EveRecord(slots, intercepted=keep, usd_success=ok, bit=bits, info={"resend_mu": resend_mu})
    return CoherentTrain(out, train.global_phase_randomized), rec


def _match_rate(honest: float, frac: float, gain: float, cap: float = 10.0) -> float:
    # solve frac * (1 - exp(-gain * m)) = honest for m
    if frac <= 0:
        return 0.0
    ratio = honest / frac
    if ratio >= 1.0:
        return cap
    return min(cap, -math.log1p(-ratio) / gain)
