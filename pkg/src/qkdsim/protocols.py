"""Protocol drivers: quantum transmission for BB84 (plain and decoy),
SARG04, B92 and DPS, sifting, statistics, decoy bounds and key rates.

Sessions run in one of two modes:

* dense: every slot is simulated and logged (``RawLog`` has ``n_pulses``
  rows).  Required for DPS/B92, afterpulsing and drift.
* sparse: only slots where something can happen at Bob (a photon reaches
  him, or a dark count fires) are sampled.  The per-class event counts are
  drawn from their exact binomial laws, so the statistics are identical in
  distribution to the dense run; it makes 1e9+ pulse sessions cheap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from . import attacks as atk
from .photonics import (
    B92Receiver,
    ChannelModel,
    CoherentTrain,
    ConfigError,
    DetectorHistory,
    DetectorModel,
    Detections,
    Outcome,
    PulseBatch,
    SourceConfig,
    b92_measure,
    bb84_bloch,
    dark_only_fire,
    detect_ports,
    drift_arrays,
    emit_batch,
    interfere_train,
    measure_batch,
    resolve_fire,
    transmit_batch,
)

__all__ = [
    "Protocol",
    "RateMode",
    "Owner",
    "SessionConfig",
    "RawLog",
    "SiftedKey",
    "SessionStats",
    "DecoyBounds",
    "LogMismatch",
    "BoundUnavailable",
    "h2",
    "run_quantum_phase",
    "sift",
    "accumulate_stats",
    "decoy_bound",
    "key_rate",
    "expected_gain_error",
    "optimal_wcp_mu",
    "SARG_PAIRS",
    "NON_COMPOSABLE",
]


class Protocol(str, Enum):
    BB84 = "BB84"
    BB84_DECOY = "BB84_DECOY"
    SARG04 = "SARG04"
    B92 = "B92"
    DPS = "DPS"


class RateMode(str, Enum):
    SINGLE_PHOTON = "SINGLE_PHOTON"
    WCP_WORSTCASE = "WCP_WORSTCASE"
    DECOY = "DECOY"


class Owner(str, Enum):
    ALICE = "ALICE"
    BOB = "BOB"


class LogMismatch(ValueError):
    """Alice's and Bob's logs do not refer to the same slots."""


class BoundUnavailable(ValueError):
    """Decoy statistics cannot support the requested bound."""


QUBIT_PROTOCOLS = (Protocol.BB84, Protocol.BB84_DECOY, Protocol.SARG04)
# rates for these protocols are heuristics without a composable proof
NON_COMPOSABLE = frozenset({Protocol.B92, Protocol.DPS})

# SARG04 states as (basis, bit): H=(X,0) V=(X,1) R=(Y,0) L=(Y,1).
# pair a=(H,R) b=(R,V) c=(V,L) d=(L,H); first state encodes 0.
SARG_PAIRS = np.array([[[0, 0], [1, 0]],
                       [[1, 0], [0, 1]],
                       [[0, 1], [1, 1]],
                       [[1, 1], [0, 0]]], dtype=np.int8)


def h2(p) -> float:
    """Binary entropy in bits, 0 at the endpoints."""
    p = float(p)
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log2(p) - (1.0 - p) * math.log2(1.0 - p)


# --------------------------------------------------------------------------
# data types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SessionConfig:
    protocol: Protocol
    n_pulses: int
    source: SourceConfig
    class_probabilities: Optional[Mapping[str, float]] = None
    test_fraction: float = 0.1
    basis_bias: float = 0.5
    seed: int = 0
    signal_class: str = "signal"
    decoy_class: str = "decoy"
    vacuum_class: str = "vacuum"
    b92_beta: float = 30.0
    b92_window_sigma: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "protocol", Protocol(self.protocol))
        if self.n_pulses < 1:
            raise ConfigError("n_pulses must be >= 1")
        probs = self.class_probabilities
        if probs is None:
            ids = self.source.class_ids
            probs = {c: 1.0 / len(ids) for c in ids}
            object.__setattr__(self, "class_probabilities", probs)
        unknown = set(probs) - set(self.source.class_ids)
        if unknown:
            raise ConfigError(f"class probabilities for unknown classes {sorted(unknown)}")
        if abs(math.fsum(probs.values()) - 1.0) > 1e-9 or min(probs.values()) < 0:
            raise ConfigError("class probabilities must be non-negative and sum to 1")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if not 0.0 <= self.basis_bias <= 1.0:
            raise ConfigError("basis_bias must lie in [0, 1]")
        if self.protocol is Protocol.DPS and self.n_pulses < 2:
            raise ConfigError("DPS sessions need at least 2 pulses")
        if self.signal_class not in self.source.mu_by_class:
            if len(self.source.mu_by_class) == 1:
                object.__setattr__(self, "signal_class", self.source.class_ids[0])
            else:
                raise ConfigError(f"signal class {self.signal_class!r} not in source")

    @property
    def class_ids(self) -> list[str]:
        return self.source.class_ids

    def prob_array(self) -> np.ndarray:
        return np.array([self.class_probabilities.get(c, 0.0) for c in self.class_ids])

    @property
    def mu_signal(self) -> float:
        return self.source.mu(self.signal_class)


@dataclass
class RawLog:
    """Alice's per-slot record.  ``bit`` is the key bit (DPS: phase bit),
    ``basis`` the BB84 basis (SARG04: basis of the sent state), ``pair`` the
    SARG04 announcement.  ``photons`` is simulator ground truth."""

    protocol: Protocol
    n_pulses: int
    slot: np.ndarray
    bit: np.ndarray
    basis: np.ndarray
    class_idx: np.ndarray
    class_ids: Sequence[str]
    sent_by_class: dict
    pair: Optional[np.ndarray] = None
    photons: Optional[np.ndarray] = None
    sparse: bool = False
    mu_by_class: Optional[dict] = None

    def __len__(self) -> int:
        return len(self.slot)

    def subset(self, mask) -> "RawLog":
        ci = self.class_idx[mask]
        sent = np.bincount(ci, minlength=len(self.class_ids))
        return RawLog(self.protocol, int(len(ci)), self.slot[mask], self.bit[mask],
                      self.basis[mask], ci, self.class_ids,
                      {c: int(sent[i]) for i, c in enumerate(self.class_ids)},
                      None if self.pair is None else self.pair[mask],
                      None if self.photons is None else self.photons[mask],
                      self.sparse, self.mu_by_class)


@dataclass
class SiftedKey:
    bits: np.ndarray
    slots: np.ndarray
    owner: Owner
    class_idx: Optional[np.ndarray] = None
    basis: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.bits) != len(self.slots):
            raise ValueError("sifted key bits and slots differ in length")

    def __len__(self) -> int:
        return len(self.bits)

    def subset(self, mask) -> "SiftedKey":
        ci = None if self.class_idx is None else self.class_idx[mask]
        b = None if self.basis is None else self.basis[mask]
        return SiftedKey(self.bits[mask], self.slots[mask], self.owner, ci, b)


@dataclass
class SessionStats:
    protocol: Protocol
    n_pulses: int
    mu_by_class: dict
    sent: dict
    clicks: dict
    sifted: dict
    tested: dict
    errors: dict
    per_basis: dict = field(default_factory=dict)

    @property
    def gain(self) -> dict:
        return {c: (self.clicks[c] / self.sent[c] if self.sent[c] else 0.0) for c in self.sent}

    @property
    def error_rate(self) -> dict:
        return {c: (self.errors[c] / self.tested[c] if self.tested[c] else float("nan"))
                for c in self.sent}

    @property
    def sifted_length(self) -> int:
        return int(sum(self.sifted.values()))

    def sifted_per_pulse(self, class_id: str) -> float:
        return self.sifted[class_id] / self.sent[class_id] if self.sent[class_id] else 0.0

    def merge(self, other: "SessionStats") -> "SessionStats":
        def add(a, b):
            return {k: a.get(k, 0) + b.get(k, 0) for k in set(a) | set(b)}

        pb = {k: add(self.per_basis.get(k, {}), other.per_basis.get(k, {}))
              for k in set(self.per_basis) | set(other.per_basis)}
        return SessionStats(self.protocol, self.n_pulses + other.n_pulses, dict(self.mu_by_class),
                            add(self.sent, other.sent), add(self.clicks, other.clicks),
                            add(self.sifted, other.sifted), add(self.tested, other.tested),
                            add(self.errors, other.errors), pb)

    def as_row(self) -> dict:
        row = {"protocol": self.protocol.value, "n_pulses": self.n_pulses,
               "sifted_length": self.sifted_length}
        gain, err = self.gain, self.error_rate
        for c in sorted(self.sent):
            row[f"sent_{c}"] = self.sent[c]
            row[f"Q_{c}"] = gain[c]
            row[f"E_{c}"] = err[c]
        return row


@dataclass(frozen=True)
class DecoyBounds:
    Y1_lower: float
    e1_upper: float
    Y0: float = 0.0


# --------------------------------------------------------------------------
# quantum phase
# --------------------------------------------------------------------------


def _choose_bases(size: int, bias: float, rng: np.random.Generator) -> np.ndarray:
    # basis_bias is the probability of X
    return (rng.random(size) >= bias).astype(np.int8)


def _ztp(lam: float, size: int, rng: np.random.Generator, kmin: int = 1) -> np.ndarray:
    """Poisson(lam) samples conditioned on k >= kmin (kmin 1 or 2)."""
    if size == 0:
        return np.zeros(0, dtype=np.int64)
    ks = [1]
    pmf = [lam * math.exp(-lam)]
    tail = -math.expm1(-lam) - pmf[0]
    while tail > 1e-17 * max(1.0, -math.expm1(-lam)) and ks[-1] < 200:
        ks.append(ks[-1] + 1)
        pmf.append(pmf[-1] * lam / ks[-1])
        tail -= pmf[-1]
    ks, p = np.array(ks[kmin - 1:]), np.array(pmf[kmin - 1:])
    if len(ks) == 0:
        return np.full(size, kmin, dtype=np.int64)
    return rng.choice(ks, size=size, p=p / p.sum()).astype(np.int64)


def _distinct_sorted(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    if k > n:
        raise ValueError("more events than slots")
    if k * 4 > n:
        return np.sort(rng.choice(n, size=k, replace=False)).astype(np.int64)
    out = np.unique(rng.integers(0, n, size=k, dtype=np.int64))
    while len(out) < k:
        out = np.unique(np.concatenate([out, rng.integers(0, n, size=k - len(out), dtype=np.int64)]))
    return out


def _state_labels(cfg: SessionConfig, size: int, rng) -> tuple:
    """(key bit, sent-state basis, sent-state bit, pair or None)."""
    bits = rng.integers(0, 2, size, dtype=np.int8)
    if cfg.protocol is Protocol.SARG04:
        pair = rng.integers(0, 4, size, dtype=np.int8)
        st = SARG_PAIRS[pair, bits]
        return bits, st[:, 0].copy(), st[:, 1].copy(), pair
    bases = _choose_bases(size, cfg.basis_bias, rng)
    return bits, bases, bits, None


def _det_eff(det: DetectorModel) -> float:
    return 0.5 * (det.eff0 + det.eff1)


def _pns_policy(cfg: SessionConfig, channel: ChannelModel, det: DetectorModel,
                attack: atk.AttackConfig) -> atk.PnsPolicy:
    return atk.solve_pns_policy(cfg.mu_signal, channel.eta, _det_eff(det), attack.target_yield)


def _drifted(channel: ChannelModel, slots: np.ndarray):
    if channel.drift is None:
        return None, None
    return drift_arrays(channel, slots)


def _attack_qubits(batch: PulseBatch, state_bases, cfg, channel, det, attack, rng, eta, angle):
    if attack.kind is atk.AttackKind.INTERCEPT_RESEND:
        resent, mask, eve = atk.intercept_resend_batch(batch, attack, rng, state_bases)
        honest = transmit_batch(batch, channel, rng, eta, angle)
        n = np.where(mask, resent.n, honest.n)
        bloch = np.where(mask[:, None], resent.bloch, honest.bloch)
        return PulseBatch(n, bloch, batch.class_idx, batch.slot, batch.class_ids), eve
    if attack.kind is atk.AttackKind.PNS:
        return atk.pns_batch(batch, _pns_policy(cfg, channel, det, attack), rng)
    raise ConfigError(f"{attack.kind.value} attack needs a coherent-state protocol")


def run_quantum_phase(cfg: SessionConfig, channel: ChannelModel, detectors: DetectorModel,
                      attack: Optional[atk.AttackConfig] = None, *, sparse: bool = False,
                      rng: Optional[np.random.Generator] = None,
                      history: Optional[DetectorHistory] = None):
    """Simulate the quantum transmission.

    Returns ``(alice RawLog, bob Detections, EveRecord or None)``; Alice's
    and Bob's logs are row-aligned by slot.
    """
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    if cfg.protocol in QUBIT_PROTOCOLS:
        if attack is not None and attack.kind is atk.AttackKind.USD_SEQUENTIAL:
            raise ConfigError("USD attack needs a coherent-state protocol (B92 or DPS)")
        if sparse:
            return _sparse_qubit(cfg, channel, detectors, attack, rng)
        return _dense_qubit(cfg, channel, detectors, attack, rng, history)
    if sparse:
        raise ConfigError(f"{cfg.protocol.value} sessions are simulated densely only")
    if attack is not None and attack.kind is not atk.AttackKind.USD_SEQUENTIAL:
        raise ConfigError(f"{attack.kind.value} attack needs a qubit protocol")
    if cfg.protocol is Protocol.DPS:
        return _dense_dps(cfg, channel, detectors, attack, rng)
    return _dense_b92(cfg, channel, detectors, attack, rng)


def _sent_counts(cfg: SessionConfig, class_idx: np.ndarray) -> dict:
    counts = np.bincount(class_idx, minlength=len(cfg.class_ids))
    return {c: int(counts[i]) for i, c in enumerate(cfg.class_ids)}


def prepare_qubits(cfg: SessionConfig, rng: np.random.Generator) -> tuple[RawLog, PulseBatch]:
    """Alice's dense emission: her log and the pulses leaving her lab."""
    n = cfg.n_pulses
    class_idx = rng.choice(len(cfg.class_ids), size=n, p=cfg.prob_array()).astype(np.int64)
    bits, st_basis, st_bit, pair = _state_labels(cfg, n, rng)
    batch = emit_batch(cfg.source, class_idx, st_bit, st_basis, rng)
    alice = RawLog(cfg.protocol, n, batch.slot, bits, st_basis, class_idx, tuple(cfg.class_ids),
                   _sent_counts(cfg, class_idx), pair, batch.n,
                   mu_by_class=dict(cfg.source.mu_by_class))
    return alice, batch


def measure_qubits(rx: PulseBatch, cfg: SessionConfig, det: DetectorModel,
                   rng: np.random.Generator, history: Optional[DetectorHistory] = None) -> Detections:
    """Bob's random basis choice and detection."""
    return measure_batch(rx, _choose_bases(len(rx), cfg.basis_bias, rng), det, rng, history)


def _dense_qubit(cfg, channel, det, attack, rng, history):
    alice, batch = prepare_qubits(cfg, rng)
    bob_bases = _choose_bases(len(batch), cfg.basis_bias, rng)
    eta, angle = _drifted(channel, batch.slot)
    eve = None
    if attack is None:
        rx = transmit_batch(batch, channel, rng, eta, angle)
    else:
        rx, eve = _attack_qubits(batch, alice.basis, cfg, channel, det, attack, rng, eta, angle)
    return alice, measure_batch(rx, bob_bases, det, rng, history), eve


def _sparse_qubit(cfg, channel, det, attack, rng):
    if det.afterpulse_p0 > 0:
        raise ConfigError("afterpulsing needs a dense session")
    if channel.drift is not None:
        raise ConfigError("channel drift needs a dense session")
    counts = rng.multinomial(cfg.n_pulses, cfg.prob_array())
    mus = cfg.source.mu_array()
    single = cfg.source.single_photon
    eta = channel.eta
    photon_rows, dark_rows = [], []
    for ci, (n_c, mu) in enumerate(zip(counts, mus)):
        if n_c == 0:
            continue
        if mu == 0:
            k, lam = 0, 0.0
        elif attack is None:
            lam = mu * eta
            k = rng.binomial(n_c, eta if single else -math.expm1(-lam))
        elif attack.kind is atk.AttackKind.PNS:
            # Eve's forwarding choice only depends on n: thin before building events
            pol = _pns_policy(cfg, channel, det, attack)
            p1 = 1.0 if single else mu * math.exp(-mu)
            pm = 0.0 if single else -math.expm1(-mu) - p1
            n1, nm, _ = rng.multinomial(n_c, [p1, pm, max(0.0, 1.0 - p1 - pm)])
            f1 = rng.binomial(n1, pol.forward_single)
            fm = rng.binomial(nm, pol.forward_multi)
            nph = np.concatenate([np.ones(f1, np.int64), _ztp(mu, fm, rng, kmin=2)])
            photon_rows.append((ci, nph))
            m = rng.binomial(n_c - f1 - fm, 1.0 - (1.0 - det.dark) ** 2) if det.dark > 0 else 0
            dark_rows.append((ci, m))
            continue
        else:
            lam = mu
            k = n_c if single else rng.binomial(n_c, -math.expm1(-lam))
        nph = np.ones(k, dtype=np.int64) if single else _ztp(lam, k, rng)
        photon_rows.append((ci, nph))
        rest = n_c - k
        m = rng.binomial(rest, 1.0 - (1.0 - det.dark) ** 2) if det.dark > 0 else 0
        dark_rows.append((ci, m))
    n_ph = sum(len(r[1]) for r in photon_rows)
    n_dk = sum(m for _, m in dark_rows)
    total = n_ph + n_dk
    slots = _distinct_sorted(rng, cfg.n_pulses, total)
    order = rng.permutation(total)
    class_idx = np.concatenate([np.full(len(r), ci, np.int64) for ci, r in photon_rows]
                               + [np.full(m, ci, np.int64) for ci, m in dark_rows]) if total else np.zeros(0, np.int64)
    photons = np.concatenate([r for _, r in photon_rows] + [np.zeros(n_dk, np.int64)]) if total else np.zeros(0, np.int64)
    bits, st_basis, st_bit, pair = _state_labels(cfg, total, rng)
    bob_bases = _choose_bases(total, cfg.basis_bias, rng)
    ev_slots = slots[np.argsort(order)]  # event i gets slot order-rank
    is_dark = np.arange(total) >= n_ph

    ph = ~is_dark
    batch = PulseBatch(photons[ph], bb84_bloch(st_basis[ph], st_bit[ph]), class_idx[ph], ev_slots[ph],
                       tuple(cfg.class_ids))
    eve = None
    if attack is None:
        rx = transmit_batch(batch, channel, rng, eta=1.0)  # loss already sampled
    elif attack.kind is atk.AttackKind.PNS:
        pol = _pns_policy(cfg, channel, det, attack)
        rx, eve = atk.pns_batch(batch, atk.PnsPolicy(1.0, 1.0, pol.target_yield, pol.saturated), rng)
        eve.info["policy"] = pol
    else:
        rx, eve = _attack_qubits(batch, st_basis[ph], cfg, channel, det, attack, rng, None, None)
    det_ph = measure_batch(rx, bob_bases[ph], det, rng)
    outcome = np.empty(total, dtype=np.int8)
    outcome[ph] = det_ph.outcome
    outcome[is_dark] = resolve_fire(dark_only_fire(int(is_dark.sum()), det, rng), det, rng)

    srt = np.argsort(ev_slots, kind="stable")
    bob = Detections(ev_slots[srt], bob_bases[srt], outcome[srt])
    alice = RawLog(cfg.protocol, cfg.n_pulses, ev_slots[srt], bits[srt], st_basis[srt], class_idx[srt],
                   tuple(cfg.class_ids), {c: int(counts[i]) for i, c in enumerate(cfg.class_ids)},
                   None if pair is None else pair[srt], photons[srt], sparse=True)
    alice.mu_by_class = dict(cfg.source.mu_by_class)
    return alice, bob, eve


def _coherent_setup(cfg: SessionConfig, rng):
    n = cfg.n_pulses
    class_idx = rng.choice(len(cfg.class_ids), size=n, p=cfg.prob_array()).astype(np.int64)
    bits = rng.integers(0, 2, n, dtype=np.int8)
    amp = np.sqrt(cfg.source.mu_array()[class_idx]) * (1.0 - 2.0 * bits)
    return class_idx, bits, amp


def _dense_dps(cfg, channel, det, attack, rng):
    class_idx, phase, amp = _coherent_setup(cfg, rng)
    train = CoherentTrain(amp)
    eve = None
    if attack is None:
        rx = train.attenuate(channel.eta)
    else:
        rx, eve = atk.usd_sequential(train, cfg.mu_signal, attack.block_len, rng, eta=channel.eta,
                                     det_eff=_det_eff(det), resend_mu=attack.resend_mu)
    a0, a1 = interfere_train(rx)
    rec = detect_ports(a0, a1, det, rng)
    n = cfg.n_pulses
    bob = Detections(np.arange(n, dtype=np.int64), np.full(n, -1, np.int8),
                     np.append(rec.outcome, np.int8(Outcome.NONE)))
    slots = np.arange(n, dtype=np.int64)
    alice = RawLog(cfg.protocol, n, slots, phase, np.full(n, -1, np.int8), class_idx,
                   tuple(cfg.class_ids), _sent_counts(cfg, class_idx),
                   mu_by_class=dict(cfg.source.mu_by_class))
    return alice, bob, eve


def b92_receiver(cfg: SessionConfig, channel: ChannelModel, det: DetectorModel) -> B92Receiver:
    return B92Receiver.centered(math.sqrt(cfg.mu_signal), cfg.b92_beta, channel.eta,
                                cfg.b92_window_sigma, det)


def _dense_b92(cfg, channel, det, attack, rng):
    class_idx, bits, amp = _coherent_setup(cfg, rng)
    n = cfg.n_pulses
    train = CoherentTrain(np.stack([amp, np.full(n, cfg.b92_beta)], axis=1))
    eve = None
    if attack is None:
        rx_train = train.attenuate(channel.eta)
    else:
        rx_train, eve = atk.usd_sequential(train, cfg.mu_signal, 1, rng, eta=channel.eta,
                                           det_eff=_det_eff(det), resend_mu=attack.resend_mu,
                                           beta=cfg.b92_beta)
    bob = b92_measure(rx_train, b92_receiver(cfg, channel, det), rng)
    bob.basis = np.full(n, -1, np.int8)
    alice = RawLog(cfg.protocol, n, bob.slot.copy(), bits, np.full(n, -1, np.int8), class_idx,
                   tuple(cfg.class_ids), _sent_counts(cfg, class_idx),
                   mu_by_class=dict(cfg.source.mu_by_class))
    return alice, bob, eve


# --------------------------------------------------------------------------
# sifting and statistics
# --------------------------------------------------------------------------


def _sarg_decode(pair: np.ndarray, bob_basis: np.ndarray, outcome: np.ndarray) -> np.ndarray:
    """Bob's SARG04 bit (0/1) or -1 when inconclusive.

    Outcome orthogonal to the pair's bit-1 state rules it out -> 0, and
    orthogonal to the bit-0 state -> 1.
    """
    s0 = SARG_PAIRS[pair, 0]
    s1 = SARG_PAIRS[pair, 1]
    click = outcome <= Outcome.BIT1
    got0 = click & (bob_basis == s1[:, 0]) & (outcome == 1 - s1[:, 1])
    got1 = click & (bob_basis == s0[:, 0]) & (outcome == 1 - s0[:, 1])
    res = np.full(len(pair), -1, dtype=np.int8)
    res[got0] = 0
    res[got1] = 1
    return res


def sift(protocol, alice: RawLog, bob: Detections) -> tuple[SiftedKey, SiftedKey]:
    """Public-discussion sifting; both keys come out slot-aligned."""
    protocol = Protocol(protocol)
    if len(alice) != len(bob) or not np.array_equal(alice.slot, bob.slot):
        raise LogMismatch("Alice and Bob logs are not aligned by slot")
    out = bob.outcome
    if protocol in (Protocol.BB84, Protocol.BB84_DECOY):
        keep = (alice.basis == bob.basis) & (out <= Outcome.BIT1)
        a_bits, b_bits = alice.bit[keep], out[keep].astype(np.int8)
    elif protocol is Protocol.SARG04:
        dec = _sarg_decode(alice.pair, bob.basis, out)
        keep = dec >= 0
        a_bits, b_bits = alice.bit[keep], dec[keep]
    elif protocol is Protocol.B92:
        keep = (out <= Outcome.BIT1) & bob.monitor_ok
        a_bits, b_bits = alice.bit[keep], out[keep].astype(np.int8)
    else:
        keep = out <= Outcome.BIT1
        keep[-1] = False
        idx = np.flatnonzero(keep)
        a_bits = (alice.bit[idx] ^ alice.bit[idx + 1]).astype(np.int8)
        b_bits = out[idx].astype(np.int8)
    slots = alice.slot[keep]
    ci = alice.class_idx[keep]
    basis = alice.basis[keep]
    return (SiftedKey(a_bits.astype(np.uint8), slots, Owner.ALICE, ci, basis),
            SiftedKey(b_bits.astype(np.uint8), slots.copy(), Owner.BOB, ci.copy(), basis.copy()))


def accumulate_stats(alice: RawLog, bob: Detections, sifted: tuple[SiftedKey, SiftedKey],
                     disclosed_slots) -> SessionStats:
    """Per-class gain from public click announcements, error rates from the
    disclosed sifted bits only."""
    ka, kb = sifted
    ids = list(alice.class_ids)
    disclosed = np.isin(ka.slots, np.asarray(disclosed_slots, dtype=np.int64))
    if len(ka) and not disclosed.any():
        raise ValueError("no disclosed test bits: cannot estimate error rates")
    clicked = bob.clicked
    nc = len(ids)
    clicks = np.bincount(alice.class_idx[clicked], minlength=nc)
    sifted_c = np.bincount(ka.class_idx, minlength=nc)
    tested = np.bincount(ka.class_idx[disclosed], minlength=nc)
    mism = ka.bits != kb.bits
    errors = np.bincount(ka.class_idx[disclosed & mism], minlength=nc)
    per_basis = {}
    if ka.basis is not None and (ka.basis >= 0).any():
        for b, name in ((0, "X"), (1, "Y")):
            m = ka.basis == b
            per_basis[name] = {"sifted": int(m.sum()), "tested": int((m & disclosed).sum()),
                               "errors": int((m & disclosed & mism).sum())}
    mus = dict(alice.mu_by_class) if alice.mu_by_class else {c: float("nan") for c in ids}
    return SessionStats(alice.protocol, alice.n_pulses, mus, dict(alice.sent_by_class),
                        {c: int(clicks[i]) for i, c in enumerate(ids)},
                        {c: int(sifted_c[i]) for i, c in enumerate(ids)},
                        {c: int(tested[i]) for i, c in enumerate(ids)},
                        {c: int(errors[i]) for i, c in enumerate(ids)}, per_basis)


# --------------------------------------------------------------------------
# bounds and rates
# --------------------------------------------------------------------------


def decoy_bound(stats: SessionStats, mu_signal: float, mu_decoy: float, *,
                signal_class: str = "signal", decoy_class: str = "decoy",
                vacuum_class: str = "vacuum") -> DecoyBounds:
    """Vacuum + weak decoy analytic bounds on the single-photon yield and error.

    Y1 >= mu/(mu nu - nu^2) [Q_nu e^nu - Q_mu e^mu nu^2/mu^2 - (mu^2-nu^2)/mu^2 Y0]
    e1 <= (E_nu Q_nu e^nu - Y0/2) / (Y1 nu)
    """
    for c in (signal_class, decoy_class, vacuum_class):
        if c not in stats.sent or stats.sent[c] == 0:
            raise BoundUnavailable(f"no pulses of class {c!r}")
    mu, nu = float(mu_signal), float(mu_decoy)
    if not 0.0 < nu < mu:
        raise BoundUnavailable(f"need 0 < mu_decoy < mu_signal, got {nu} and {mu}")
    q = stats.gain
    e_nu = stats.error_rate[decoy_class]
    if math.isnan(e_nu):
        raise BoundUnavailable("decoy class has no disclosed bits")
    y0 = q[vacuum_class]
    y1 = mu / (mu * nu - nu * nu) * (q[decoy_class] * math.exp(nu)
                                     - q[signal_class] * math.exp(mu) * nu * nu / (mu * mu)
                                     - (mu * mu - nu * nu) / (mu * mu) * y0)
    y1 = min(max(y1, 0.0), 1.0)
    if y1 <= 0.0:
        return DecoyBounds(0.0, 0.5, y0)
    e1 = (e_nu * q[decoy_class] * math.exp(nu) - 0.5 * y0) / (y1 * nu)
    return DecoyBounds(y1, min(max(e1, 0.0), 0.5), y0)


def multi_photon_prob(mu: float) -> float:
    return -math.expm1(-mu) - mu * math.exp(-mu)


def secure_fraction(stats: SessionStats, mode: RateMode, bounds: Optional[DecoyBounds],
                    signal_class: str, e_signal: Optional[float] = None) -> tuple[float, float]:
    """(single-photon fraction A of detected signals, single-photon error e1)."""
    mode = RateMode(mode)
    q = stats.gain[signal_class]
    e = stats.error_rate[signal_class] if e_signal is None else e_signal
    if q <= 0:
        return 0.0, 0.5
    if mode is RateMode.SINGLE_PHOTON:
        return 1.0, min(e, 0.5)
    mu = stats.mu_by_class[signal_class]
    if mode is RateMode.WCP_WORSTCASE:
        a = max(0.0, (q - multi_photon_prob(mu)) / q)
        return a, (min(0.5, e / a) if a > 0 else 0.5)
    if bounds is None:
        raise BoundUnavailable("DECOY mode needs decoy bounds")
    a = min(1.0, bounds.Y1_lower * mu * math.exp(-mu) / q)
    return a, bounds.e1_upper


def key_rate(stats: SessionStats, bounds: Optional[DecoyBounds], mode, leak_ec: float = 1.16,
             params=None, *, signal_class: Optional[str] = None) -> float:
    """Secret bits per pulse of the signal class.

    R = S * [A (1 - h2(e1)) - f h2(E)], S the sifted bits per signal pulse,
    A the single-photon share of detections, f the reconciliation
    efficiency.  ``params`` (SecurityParams) subtracts the finite-size
    term (2 l + s) / n_pulses.  B92/DPS use A = 1, e1 = E (heuristic).
    """
    mode = RateMode(mode)
    if signal_class is None:
        signal_class = "signal" if "signal" in stats.sent else next(iter(stats.sent))
    if mode is RateMode.DECOY and bounds is None:
        raise BoundUnavailable("DECOY mode needs decoy bounds")
    e = stats.error_rate[signal_class]
    if math.isnan(e):
        return 0.0
    if stats.protocol in NON_COMPOSABLE:
        a, e1 = 1.0, e
    else:
        a, e1 = secure_fraction(stats, mode, bounds, signal_class)
    s = stats.sifted_per_pulse(signal_class)
    r = s * (a * (1.0 - h2(e1)) - leak_ec * h2(e))
    if params is not None:
        r -= (2 * params.l + params.s) / max(stats.n_pulses, 1)
    return max(0.0, r)


def expected_gain_error(mu: float, eta: float, det: DetectorModel, e_opt: float = 0.0,
                        single_photon: bool = False) -> tuple[float, float]:
    """Analytic gain and error rate of a BB84 signal class.

    Photons of a Poissonian pulse split independently between the correct
    and wrong detector (optical error ``e_opt``); double clicks count half
    as errors under RANDOM_BIT, drop out under DISCARD.
    """
    d = det.dark
    if single_photon:
        t = eta if mu > 0 else 0.0
        a, b = t * (1 - e_opt) * det.eff0, t * e_opt * det.eff1
        p_ok = a + (1 - a) * d
        p_bad = b + (1 - b) * d
        # one photon fires at most one detector; the other needs a dark count
        p_both = (a + b) * d + (1 - a - b) * d * d
    else:
        lam = mu * eta
        p_ok = 1 - (1 - d) * math.exp(-lam * (1 - e_opt) * det.eff0)
        p_bad = 1 - (1 - d) * math.exp(-lam * e_opt * det.eff1)
        p_both = p_ok * p_bad
    only_ok, only_bad = p_ok - p_both, p_bad - p_both
    if det.double_click_policy.value == "DISCARD":
        q = only_ok + only_bad + p_both
        conclusive = only_ok + only_bad
        return q, (only_bad / conclusive if conclusive else 0.0)
    q = only_ok + only_bad + p_both
    return q, ((only_bad + 0.5 * p_both) / q if q else 0.0)


def expected_wcp_rate(mu: float, eta: float, det: DetectorModel, e_opt: float, f_ec: float = 1.16,
                      sift_factor: float = 0.5) -> float:
    q, e = expected_gain_error(mu, eta, det, e_opt)
    if q <= 0:
        return 0.0
    a = max(0.0, (q - multi_photon_prob(mu)) / q)
    if a == 0:
        return 0.0
    return max(0.0, sift_factor * q * (a * (1 - h2(min(0.5, e / a))) - f_ec * h2(e)))


def optimal_wcp_mu(eta: float, det: DetectorModel, e_opt: float, f_ec: float = 1.16) -> float:
    """Signal intensity maximising the worst-case (no decoy) rate."""
    def neg(lm):
        return -expected_wcp_rate(math.exp(lm), eta, det, e_opt, f_ec)

    # the rate is identically zero over most of the range; bracket on a grid first
    grid = np.linspace(math.log(1e-8), 0.0, 161)
    i = int(np.argmin([neg(g) for g in grid]))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = minimize_scalar(neg, bounds=(lo, hi), method="bounded", options={"xatol": 1e-8})
    return float(math.exp(res.x))
