"""Drift, QBER-window fault classification, frame resynchronisation and the
sync state machine.

Frame offsets are modelled on Bob's side: with offset ``o`` Bob's record at
index ``k`` belongs to Alice's slot ``k - o``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .photonics import ChannelModel, ConfigError, Detections, DriftModel, Outcome, drift_arrays
from .protocols import Protocol, RawLog

RAPID_THRESHOLD = 0.45

__all__ = [
    "ContractViolation", "InsufficientHistory", "DriftModel", "drift_arrays", "apply_drift",
    "FaultClass", "QberWindow", "classify", "ResyncResult", "shifted_qber", "frame_resync",
    "inject_frame_offset", "SyncPhase", "SyncState", "sync_step", "MonitorReport",
    "monitor_session", "RAPID_THRESHOLD",
]


class ContractViolation(RuntimeError):
    """Illegal state-machine request."""


class InsufficientHistory(ValueError):
    pass


def apply_drift(channel: ChannelModel, slot: int) -> ChannelModel:
    """Static channel seen at ``slot``; the drift model is kept attached."""
    if channel.drift is None:
        return channel
    eta, angle = drift_arrays(channel, [slot])
    return ChannelModel.from_eta(float(eta[0]), float(angle[0]), channel.drift)


# --------------------------------------------------------------------------
# classification
# --------------------------------------------------------------------------


class FaultClass(str, Enum):
    OK = "OK"
    SLOW_DEGRADE = "SLOW_DEGRADE"
    RAPID_LOSS = "RAPID_LOSS"


@dataclass
class QberWindow:
    """Per-window QBER series.  ``baseline`` is the calibrated QBER of a
    healthy link; without it the first window is taken."""

    length: int
    series: list = field(default_factory=list)
    baseline: Optional[float] = None

    def __post_init__(self):
        if self.length < 100:
            raise ConfigError("QBER windows must span at least 100 slots")

    def push(self, qber: float) -> None:
        self.series.append(float(qber))


def classify(window: QberWindow, trend_windows: int = 3, rise: float = 0.04) -> FaultClass:
    s = window.series
    if len(s) < 2:
        raise InsufficientHistory("classification needs at least two windows")
    if s[-1] >= RAPID_THRESHOLD:
        return FaultClass.RAPID_LOSS
    base = s[0] if window.baseline is None else window.baseline
    recent = float(np.mean(s[-trend_windows:]))
    if recent - base >= rise:
        return FaultClass.SLOW_DEGRADE
    return FaultClass.OK


# --------------------------------------------------------------------------
# resynchronisation
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ResyncResult:
    offset: Optional[int]
    qber: float
    scan: tuple = ()

    @property
    def ok(self) -> bool:
        return self.offset is not None


def shifted_qber(alice: RawLog, bob: Detections, shift: int, lo: int = 0,
                 hi: Optional[int] = None) -> tuple[float, int]:
    """BB84 sifted QBER pairing Alice's index i with Bob's index i + shift,
    for Bob indices in [lo, hi).  Returns (qber, sifted count)."""
    hi = len(bob) if hi is None else hi
    j = np.arange(max(lo, shift), min(hi, len(alice) + shift))
    if len(j) == 0:
        return float("nan"), 0
    i = j - shift
    out = bob.outcome[j]
    keep = (alice.basis[i] == bob.basis[j]) & (out <= Outcome.BIT1)
    n = int(keep.sum())
    if n == 0:
        return float("nan"), 0
    return float(np.mean(alice.bit[i][keep] != out[keep])), n


def frame_resync(alice: RawLog, bob: Detections, search_range: int, baseline: float = 0.02,
                 lo: int = 0, hi: Optional[int] = None, recover_factor: float = 2.0) -> ResyncResult:
    """Scan shifts in [-range, range] and keep the one with the lowest QBER,
    accepted when it is at most ``recover_factor`` x baseline."""
    if alice.protocol not in (Protocol.BB84, Protocol.BB84_DECOY):
        raise ConfigError("frame resync is implemented for BB84 logs")
    scan = []
    for s in range(-search_range, search_range + 1):
        q, n = shifted_qber(alice, bob, s, lo, hi)
        scan.append((s, q, n))
    valid = [(q, abs(s), s) for s, q, n in scan if n > 0]
    if not valid:
        return ResyncResult(None, float("nan"), tuple(scan))
    q, _, s = min(valid)
    if q <= recover_factor * baseline:
        return ResyncResult(s, q, tuple(scan))
    return ResyncResult(None, q, tuple(scan))


def inject_frame_offset(bob: Detections, offset: int, from_index: int = 0) -> Detections:
    """Bob's record k (k >= from_index) becomes his original record k - offset."""
    n = len(bob)
    src = np.arange(n)
    src[from_index:] -= offset
    valid = (src >= 0) & (src < n)
    src = np.clip(src, 0, n - 1)
    out = np.where(valid, bob.outcome[src], Outcome.NONE).astype(bob.outcome.dtype)
    basis = bob.basis[src]
    mon = None if bob.monitor_ok is None else bob.monitor_ok[src] & valid
    return Detections(bob.slot.copy(), basis, out, mon)


# --------------------------------------------------------------------------
# state machine
# --------------------------------------------------------------------------


class SyncPhase(str, Enum):
    ALIGNED = "ALIGNED"
    BIT_DRIFT = "BIT_DRIFT"
    FRAME_LOST = "FRAME_LOST"
    FATAL = "FATAL"


@dataclass(frozen=True)
class SyncState:
    phase: SyncPhase = SyncPhase.ALIGNED
    offset: int = 0
    log: tuple = ()

    def _to(self, phase: SyncPhase, **kw) -> "SyncState":
        return replace(self, phase=phase, log=self.log + ((self.phase.value, phase.value),), **kw)


def sync_step(state: SyncState, classification: FaultClass, resync: Optional[ResyncResult] = None,
              recalibrate: Optional[Callable[[], None]] = None) -> SyncState:
    classification = FaultClass(classification)
    if state.phase is SyncPhase.FATAL:
        return state
    if classification is FaultClass.RAPID_LOSS or state.phase is SyncPhase.FRAME_LOST:
        if resync is None:
            raise ContractViolation("frame loss needs a resynchronisation result")
        lost = state if state.phase is SyncPhase.FRAME_LOST else state._to(SyncPhase.FRAME_LOST)
        if resync.ok:
            return lost._to(SyncPhase.ALIGNED, offset=int(resync.offset))
        return lost._to(SyncPhase.FATAL)
    if classification is FaultClass.SLOW_DEGRADE:
        drift = state if state.phase is SyncPhase.BIT_DRIFT else state._to(SyncPhase.BIT_DRIFT)
        if recalibrate is not None:
            recalibrate()
        return drift._to(SyncPhase.ALIGNED)
    if state.phase is SyncPhase.BIT_DRIFT:
        return state._to(SyncPhase.ALIGNED)
    return state


# --------------------------------------------------------------------------
# monitored session
# --------------------------------------------------------------------------


@dataclass
class MonitorReport:
    state: SyncState
    qber: list
    raw_qber: list
    classes: list
    first_rapid: Optional[int]
    post_recovery_qber: Optional[float]
    emitted_bits: int
    key: np.ndarray


def monitor_session(alice: RawLog, bob: Detections, window_len: int, baseline: float = 0.02,
                    search_range: int = 16, rise: float = 0.04) -> MonitorReport:
    """Walk the paired logs window by window, driving the state machine.

    Sifted bits of healthy windows are buffered; they are released only if
    the session never reaches FATAL.
    """
    window = QberWindow(window_len, baseline=baseline)
    state = SyncState()
    classes, buffer, raw = [], [], []
    first_rapid = post = None
    n = len(bob)
    for w, lo in enumerate(range(0, n, window_len)):
        hi = min(lo + window_len, n)
        q, _ = shifted_qber(alice, bob, state.offset, lo, hi)
        window.push(q)
        raw.append(q)
        cls = classify(window, rise=rise) if len(window.series) >= 2 else FaultClass.OK
        classes.append(cls)
        res = None
        if cls is FaultClass.RAPID_LOSS:
            first_rapid = w if first_rapid is None else first_rapid
            res = frame_resync(alice, bob, search_range, baseline, lo, hi)
        state = sync_step(state, cls, res)
        if state.phase is SyncPhase.FATAL:
            buffer.clear()
            break
        if res is not None:
            q, _ = shifted_qber(alice, bob, state.offset, lo, hi)
            post = q if post is None else post
            window.series[-1] = q
        buffer.append(_window_bits(alice, bob, state.offset, lo, hi))
    key = np.concatenate(buffer) if buffer else np.zeros(0, np.uint8)
    return MonitorReport(state, list(window.series), raw, classes, first_rapid, post, len(key), key)


def _window_bits(alice: RawLog, bob: Detections, shift: int, lo: int, hi: int) -> np.ndarray:
    j = np.arange(max(lo, shift), min(hi, len(alice) + shift))
    i = j - shift
    keep = (alice.basis[i] == bob.basis[j]) & (bob.outcome[j] <= Outcome.BIT1)
    return alice.bit[i][keep].astype(np.uint8)
