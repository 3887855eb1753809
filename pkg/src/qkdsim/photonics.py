"""Physical-layer models: weak-pulse sources, lossy channels, threshold
detectors and interferometric receivers.

Two signal models are used throughout the package:

* qubit pulses, a photon count plus a shared Bloch vector (all photons of a
  multi-photon pulse are identically polarized), for BB84-family protocols;
* coherent trains, complex amplitudes per slot with ``|a|**2`` equal to the
  mean photon number, for DPS and B92.

Every function takes an explicit ``numpy.random.Generator``; nothing here
holds global state.  Batch variants (``*_batch``) are the workhorses, the
scalar functions are thin conveniences over them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import Iterator, Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "ConfigError",
    "Basis",
    "Outcome",
    "DoubleClickPolicy",
    "SourceConfig",
    "QubitPulse",
    "PulseBatch",
    "CoherentTrain",
    "ChannelModel",
    "DetectorModel",
    "DetectorHistory",
    "DetectionRecord",
    "Detections",
    "B92Receiver",
    "bb84_bloch",
    "basis_axis",
    "rotate_z",
    "emit_weak_pulse",
    "emit_batch",
    "channel_transmit",
    "transmit_batch",
    "measure_qubit",
    "measure_batch",
    "interfere_train",
    "detect_ports",
    "b92_measure",
]


class ConfigError(ValueError):
    """Invalid or inconsistent model configuration."""


class Basis(IntEnum):
    X = 0
    Y = 1


class Outcome(IntEnum):
    BIT0 = 0
    BIT1 = 1
    DOUBLE = 2
    NONE = 3


class DoubleClickPolicy(str, Enum):
    RANDOM_BIT = "RANDOM_BIT"
    DISCARD = "DISCARD"


_AXES = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def basis_axis(basis) -> np.ndarray:
    """Measurement axis (unit 3-vector) for basis index/indices."""
    return _AXES[np.asarray(basis, dtype=np.intp)]


def bb84_bloch(basis, bit) -> np.ndarray:
    """Bloch point of the BB84 state: bit 0 -> +axis, bit 1 -> -axis."""
    sign = 1.0 - 2.0 * np.asarray(bit, dtype=np.float64)
    return basis_axis(basis) * sign[..., None]


def rotate_z(bloch: np.ndarray, angle) -> np.ndarray:
    """Rotate Bloch vector(s) about the Z axis by ``angle`` (scalar or per row)."""
    bloch = np.asarray(bloch, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    if not np.any(angle):
        return bloch
    c, s = np.cos(angle), np.sin(angle)
    out = bloch.copy()
    out[..., 0] = c * bloch[..., 0] - s * bloch[..., 1]
    out[..., 1] = s * bloch[..., 0] + c * bloch[..., 1]
    return out


# --------------------------------------------------------------------------
# configuration types
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SourceConfig:
    """Intensity classes of the transmitter.

    ``single_photon`` replaces the Poissonian law with exactly one photon per
    non-vacuum pulse (ideal single-photon source).
    """

    mu_by_class: Mapping[str, float]
    phase_randomized: bool = True
    single_photon: bool = False
    decoy: bool = False

    def __post_init__(self):
        if not self.mu_by_class:
            raise ConfigError("source needs at least one intensity class")
        for cid, mu in self.mu_by_class.items():
            if not (math.isfinite(mu) and mu >= 0):
                raise ConfigError(f"mu for class {cid!r} must be finite and >= 0, got {mu}")
        if self.decoy and not any(mu == 0 for mu in self.mu_by_class.values()):
            raise ConfigError("decoy mode requires a vacuum class (mu = 0)")

    @property
    def class_ids(self) -> list[str]:
        return list(self.mu_by_class)

    def mu(self, class_id: str) -> float:
        try:
            return float(self.mu_by_class[class_id])
        except KeyError:
            raise ConfigError(f"unknown intensity class {class_id!r}") from None

    def mu_array(self) -> np.ndarray:
        return np.array([self.mu_by_class[c] for c in self.class_ids], dtype=np.float64)


@dataclass(frozen=True)
class ChannelModel:
    loss_db: float = 0.0
    misalignment: float = 0.0
    drift: Optional["DriftModel"] = None

    def __post_init__(self):
        if not math.isfinite(self.loss_db) or self.loss_db < 0:
            raise ConfigError(f"loss_db must be finite and >= 0, got {self.loss_db}")
        if not 0.0 <= self.misalignment <= math.pi:
            raise ConfigError(f"misalignment must lie in [0, pi], got {self.misalignment}")

    @property
    def eta(self) -> float:
        return 10.0 ** (-self.loss_db / 10.0)

    @classmethod
    def from_eta(cls, eta: float, misalignment: float = 0.0, drift=None) -> "ChannelModel":
        if not 0.0 < eta <= 1.0:
            raise ConfigError(f"transmittance must lie in (0, 1], got {eta}")
        return cls(loss_db=-10.0 * math.log10(eta), misalignment=misalignment, drift=drift)

    @staticmethod
    def misalignment_for_qber(qber: float) -> float:
        """Rotation angle whose intrinsic optical error is ``qber`` (sin^2(theta/2))."""
        return 2.0 * math.asin(math.sqrt(qber))


@dataclass(frozen=True)
class DriftModel:
    phase_drift_rate: float = 0.0  # rad per 1e3 slots
    transmittance_drift: float = 1.0  # factor per 1e3 slots
    onset: int = 0

    def __post_init__(self):
        if not math.isfinite(self.phase_drift_rate):
            raise ConfigError("phase_drift_rate must be finite")
        if not 0.0 < self.transmittance_drift <= 1.0:
            raise ConfigError("transmittance_drift must lie in (0, 1]")
        if self.onset < 0:
            raise ConfigError("onset must be >= 0")


def _fold(angle):
    a = np.mod(angle, 2 * math.pi)
    return np.where(a > math.pi, 2 * math.pi - a, a)


def drift_arrays(channel: ChannelModel, slots) -> tuple[np.ndarray, np.ndarray]:
    """Per-slot (eta, misalignment) under the channel's drift model."""
    d = channel.drift
    k = np.maximum(np.asarray(slots, dtype=np.float64) - d.onset, 0.0) / 1000.0
    angle = _fold(channel.misalignment + d.phase_drift_rate * k)
    eta = channel.eta * np.power(d.transmittance_drift, k)
    return eta, angle


@dataclass(frozen=True)
class DetectorModel:
    eff0: float = 1.0
    eff1: float = 1.0
    dark: float = 0.0
    afterpulse_p0: float = 0.0
    afterpulse_tau: float = 1.0
    blanking_gates: int = 0
    double_click_policy: DoubleClickPolicy = DoubleClickPolicy.RANDOM_BIT

    def __post_init__(self):
        for name in ("eff0", "eff1", "afterpulse_p0"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not 0.0 <= self.dark < 1.0:
            raise ConfigError(f"dark must lie in [0, 1), got {self.dark}")
        if self.afterpulse_tau <= 0:
            raise ConfigError("afterpulse_tau must be > 0")
        if self.blanking_gates < 0:
            raise ConfigError("blanking_gates must be >= 0")
        object.__setattr__(self, "double_click_policy", DoubleClickPolicy(self.double_click_policy))

    @property
    def effs(self) -> np.ndarray:
        return np.array([self.eff0, self.eff1])


@dataclass(frozen=True)
class B92Receiver:
    """Bob's B92 receiver with a monitoring detector on the reference arm.

    ``ref_split`` is the fraction of incoming reference power tapped into the
    decoding interferometer; it is tuned so the tapped reference carries the
    same mean photon number as the signal (``alpha**2 / beta**2``).  The
    remainder hits the monitor, which accepts counts in ``[m_lo, m_hi]``.
    """

    ref_split: float
    m_lo: int
    m_hi: int
    detector: DetectorModel = field(default_factory=DetectorModel)

    def __post_init__(self):
        if not 0.0 < self.ref_split < 1.0:
            raise ConfigError("ref_split must lie in (0, 1)")
        if self.m_lo < 0 or self.m_hi < self.m_lo:
            raise ConfigError("monitor window must satisfy 0 <= m_lo <= m_hi")

    @classmethod
    def centered(cls, alpha: float, beta: float, eta: float, width_sigma: float = 4.0,
                 detector: Optional[DetectorModel] = None) -> "B92Receiver":
        """Receiver whose monitor window is centred on the honest expectation."""
        split = alpha**2 / beta**2
        mean = beta**2 * eta * (1.0 - split)
        half = width_sigma * math.sqrt(mean)
        return cls(split, max(1, int(math.floor(mean - half))), int(math.ceil(mean + half)),
                   detector or DetectorModel())

    @property
    def monitor_fraction(self) -> float:
        return 1.0 - self.ref_split


# --------------------------------------------------------------------------
# signal containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class QubitPulse:
    n: int
    bloch: tuple[float, float, float]
    class_id: str
    slot: int = 0

    def __post_init__(self):
        if self.n < 0:
            raise ValueError("photon number must be >= 0")
        if math.fsum(b * b for b in self.bloch) > (1.0 + 1e-12) ** 2:
            raise ValueError("Bloch vector norm exceeds 1")


@dataclass
class PulseBatch:
    """Columnar storage for many qubit pulses.

    ``class_idx`` indexes into ``class_ids`` (the source's class order).
    """

    n: np.ndarray
    bloch: np.ndarray
    class_idx: np.ndarray
    slot: np.ndarray
    class_ids: Sequence[str] = ()

    def __len__(self) -> int:
        return len(self.n)

    def subset(self, mask) -> "PulseBatch":
        return PulseBatch(self.n[mask], self.bloch[mask], self.class_idx[mask],
                          self.slot[mask], self.class_ids)

    def pulse(self, i: int) -> QubitPulse:
        cid = self.class_ids[self.class_idx[i]] if self.class_ids else str(self.class_idx[i])
        return QubitPulse(int(self.n[i]), tuple(float(v) for v in self.bloch[i]), cid,
                          int(self.slot[i]))

    @classmethod
    def from_pulse(cls, pulse: QubitPulse) -> "PulseBatch":
        return cls(np.array([pulse.n], dtype=np.int64), np.array([pulse.bloch], dtype=np.float64),
                   np.zeros(1, dtype=np.int64), np.array([pulse.slot], dtype=np.int64),
                   (pulse.class_id,))


@dataclass
class CoherentTrain:
    """Complex amplitude per slot; shape ``(L,)`` or ``(L, 2)`` for two-mode
    (signal, reference) B92 pulses."""

    amps: np.ndarray
    global_phase_randomized: bool = False

    def __post_init__(self):
        self.amps = np.asarray(self.amps, dtype=np.complex128)
        if not np.all(np.isfinite(self.amps)):
            raise ValueError("coherent amplitudes must be finite")

    def __len__(self) -> int:
        return self.amps.shape[0]

    @property
    def two_mode(self) -> bool:
        return self.amps.ndim == 2 and self.amps.shape[1] == 2

    def attenuate(self, eta) -> "CoherentTrain":
        eta = np.asarray(eta, dtype=np.float64)
        if self.amps.ndim == 2 and eta.ndim == 1:
            eta = eta[:, None]
        return CoherentTrain(self.amps * np.sqrt(eta), self.global_phase_randomized)


@dataclass(frozen=True)
class DetectionRecord:
    slot: int
    basis_used: Optional[int]
    outcome: Outcome
    monitor_ok: Optional[bool] = None


@dataclass
class Detections:
    """Columnar DetectionRecord stream.  ``basis`` is -1 where no basis applies."""

    slot: np.ndarray
    basis: np.ndarray
    outcome: np.ndarray
    monitor_ok: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.slot)

    def __getitem__(self, i: int) -> DetectionRecord:
        b = int(self.basis[i])
        mon = None if self.monitor_ok is None else bool(self.monitor_ok[i])
        return DetectionRecord(int(self.slot[i]), None if b < 0 else b, Outcome(int(self.outcome[i])), mon)

    def __iter__(self) -> Iterator[DetectionRecord]:
        return (self[i] for i in range(len(self)))

    @property
    def clicked(self) -> np.ndarray:
        return self.outcome != Outcome.NONE

    @property
    def conclusive(self) -> np.ndarray:
        return self.outcome <= Outcome.BIT1

    @staticmethod
    def concat(parts: Sequence["Detections"]) -> "Detections":
        mon = None
        if parts and parts[0].monitor_ok is not None:
            mon = np.concatenate([p.monitor_ok for p in parts])
        return Detections(np.concatenate([p.slot for p in parts]),
                          np.concatenate([p.basis for p in parts]),
                          np.concatenate([p.outcome for p in parts]), mon)

    def take(self, order) -> "Detections":
        mon = None if self.monitor_ok is None else self.monitor_ok[order]
        return Detections(self.slot[order], self.basis[order], self.outcome[order], mon)


class DetectorHistory:
    """Gate index of each detector's most recent firing (afterpulse memory)."""

    def __init__(self):
        self.last_fire = [-math.inf, -math.inf]

    def copy(self) -> "DetectorHistory":
        h = DetectorHistory()
        h.last_fire = list(self.last_fire)
        return h


# --------------------------------------------------------------------------
# source and channel
# --------------------------------------------------------------------------


def _photon_numbers(mu: np.ndarray, single_photon: bool, rng: np.random.Generator) -> np.ndarray:
    if single_photon:
        return (mu > 0).astype(np.int64)
    return rng.poisson(mu).astype(np.int64)


def emit_batch(cfg: SourceConfig, class_idx, bits, bases, rng: np.random.Generator,
               slots=None) -> PulseBatch:
    class_idx = np.asarray(class_idx, dtype=np.int64)
    mu = cfg.mu_array()[class_idx]
    n = _photon_numbers(mu, cfg.single_photon, rng)
    if slots is None:
        slots = np.arange(len(class_idx), dtype=np.int64)
    return PulseBatch(n, bb84_bloch(bases, bits), class_idx, np.asarray(slots, dtype=np.int64),
                      tuple(cfg.class_ids))


def emit_weak_pulse(cfg: SourceConfig, class_id: str, bit: int, basis: int,
                    rng: np.random.Generator, slot: int = 0) -> QubitPulse:
    """One BB84 pulse with a Poissonian (or single) photon number."""
    mu = cfg.mu(class_id)
    if bit not in (0, 1):
        raise ConfigError(f"bit must be 0 or 1, got {bit}")
    basis = Basis(basis)
    n = int(_photon_numbers(np.array([mu]), cfg.single_photon, rng)[0])
    bloch = tuple(float(v) for v in bb84_bloch(int(basis), bit))
    return QubitPulse(n, bloch, class_id, slot)


def transmit_batch(batch: PulseBatch, ch: ChannelModel, rng: np.random.Generator,
                   eta=None, angle=None) -> PulseBatch:
    """Binomial photon loss plus a Z rotation.  ``eta``/``angle`` override the
    channel's static values (per-pulse arrays when drift is active)."""
    eta = ch.eta if eta is None else eta
    angle = ch.misalignment if angle is None else angle
    n = batch.n if np.all(np.asarray(eta) == 1.0) else rng.binomial(batch.n, eta)
    return PulseBatch(n.astype(np.int64), rotate_z(batch.bloch, angle), batch.class_idx,
                      batch.slot, batch.class_ids)


def channel_transmit(pulse: QubitPulse, ch: ChannelModel, rng: np.random.Generator) -> QubitPulse:
    out = transmit_batch(PulseBatch.from_pulse(pulse), ch, rng)
    return out.pulse(0)


# --------------------------------------------------------------------------
# detection
# --------------------------------------------------------------------------


def _fire_from_photons(k: np.ndarray, eff: float, rng: np.random.Generator) -> np.ndarray:
    # P(at least one of k photons registers) = 1 - (1 - eff)^k
    p = 1.0 - np.power(1.0 - eff, k)
    return rng.random(len(k)) < p


def _apply_afterpulses(fire: np.ndarray, slots: np.ndarray, det: DetectorModel,
                       history: DetectorHistory, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(fire.shape)
    fire = fire.copy()
    last = history.last_fire
    p0, tau, blank = det.afterpulse_p0, det.afterpulse_tau, det.blanking_gates
    for i in range(len(slots)):
        g = int(slots[i])
        for d in (0, 1):
            if not fire[i, d] and p0 > 0.0:
                dg = g - last[d]
                if dg > blank and u[i, d] < p0 * math.exp(-dg / tau):
                    fire[i, d] = True
            if fire[i, d]:
                last[d] = g
    return fire


def _resolve(fire: np.ndarray, det: DetectorModel, rng: np.random.Generator) -> np.ndarray:
    f0, f1 = fire[:, 0], fire[:, 1]
    out = np.full(len(fire), Outcome.NONE, dtype=np.int8)
    out[f0 & ~f1] = Outcome.BIT0
    out[f1 & ~f0] = Outcome.BIT1
    both = f0 & f1
    coin = rng.integers(0, 2, len(fire), dtype=np.int8)
    if det.double_click_policy is DoubleClickPolicy.RANDOM_BIT:
        out[both] = coin[both]
    else:
        out[both] = Outcome.DOUBLE
    return out


def _dark_fire(size: int, det: DetectorModel, rng: np.random.Generator) -> np.ndarray:
    if det.dark == 0.0:
        return np.zeros((size, 2), dtype=bool)
    return rng.random((size, 2)) < det.dark


def measure_batch(batch: PulseBatch, bases, det: DetectorModel, rng: np.random.Generator,
                  history: Optional[DetectorHistory] = None) -> Detections:
    """Two-detector threshold measurement along the axis of ``bases``.

    Each photon goes to detector 0 with Born probability (1 + r.a)/2.  Slots
    must be in increasing order when afterpulsing is enabled.
    """
    bases = np.asarray(bases, dtype=np.int8)
    axes = basis_axis(bases)
    p0 = np.clip(0.5 * (1.0 + np.einsum("ij,ij->i", batch.bloch, axes)), 0.0, 1.0)
    k0 = rng.binomial(batch.n, p0)
    k1 = batch.n - k0
    fire = np.empty((len(batch), 2), dtype=bool)
    fire[:, 0] = _fire_from_photons(k0, det.eff0, rng)
    fire[:, 1] = _fire_from_photons(k1, det.eff1, rng)
    fire |= _dark_fire(len(batch), det, rng)
    if det.afterpulse_p0 > 0.0:
        fire = _apply_afterpulses(fire, batch.slot, det, history or DetectorHistory(), rng)
    return Detections(batch.slot.copy(), bases.copy(), _resolve(fire, det, rng))


def measure_qubit(pulse: QubitPulse, basis_axis_vec, det: DetectorModel,
                  history: Optional[DetectorHistory], rng: np.random.Generator) -> DetectionRecord:
    axis = np.asarray(basis_axis_vec, dtype=np.float64)
    if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
        raise ValueError("measurement axis must be a unit vector")
    # arbitrary axes: project onto the X/Y frame by rotating the state instead
    phi = math.atan2(axis[1], axis[0])
    batch = PulseBatch.from_pulse(pulse)
    r = batch.bloch[0]
    along = float(r @ axis)
    perp = math.sqrt(max(0.0, 1.0 - along * along)) if np.linalg.norm(r) > 0 else 0.0
    batch.bloch = np.array([[along, perp, 0.0]])
    rec = measure_batch(batch, [0], det, rng, history)[0]
    basis = 0 if abs(phi) < 1e-12 else (1 if abs(phi - math.pi / 2) < 1e-12 else None)
    return DetectionRecord(rec.slot, basis, rec.outcome, None)


# --------------------------------------------------------------------------
# coherent-state receivers
# --------------------------------------------------------------------------


def interfere_train(train: CoherentTrain, delay: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Outputs of a one-slot-delay Mach-Zehnder: ((a_k + a_{k+d})/2, (a_k - a_{k+d})/2)."""
    if train.amps.ndim != 1:
        raise ValueError("interferometer expects a single-mode train")
    if len(train) < delay + 1:
        raise ValueError("train must be longer than the interferometer delay")
    a, b = train.amps[:-delay], train.amps[delay:]
    return (a + b) / 2.0, (a - b) / 2.0


def detect_ports(a0: np.ndarray, a1: np.ndarray, det: DetectorModel, rng: np.random.Generator,
                 slots=None) -> Detections:
    """Photon counting on two output ports: Poisson(|a|^2 * eff) plus dark counts."""
    if slots is None:
        slots = np.arange(len(a0), dtype=np.int64)
    fire = np.empty((len(a0), 2), dtype=bool)
    fire[:, 0] = rng.poisson(np.abs(a0) ** 2 * det.eff0) > 0
    fire[:, 1] = rng.poisson(np.abs(a1) ** 2 * det.eff1) > 0
    fire |= _dark_fire(len(a0), det, rng)
    return Detections(np.asarray(slots, dtype=np.int64), np.full(len(a0), -1, dtype=np.int8),
                      _resolve(fire, det, rng))


def b92_measure(train: CoherentTrain, rx: B92Receiver, rng: np.random.Generator,
                slots=None) -> Detections:
    """Decode two-mode (signal, reference) pulses and check the monitor window."""
    if not train.two_mode:
        raise ValueError("B92 measurement needs a two-mode (L, 2) train")
    sig, ref = train.amps[:, 0], train.amps[:, 1]
    tap = ref * math.sqrt(rx.ref_split)
    mon = ref * math.sqrt(rx.monitor_fraction)
    rec = detect_ports((sig + tap) / math.sqrt(2.0), (sig - tap) / math.sqrt(2.0), rx.detector, rng, slots)
    counts = rng.poisson(np.abs(mon) ** 2)
    rec.monitor_ok = (counts >= rx.m_lo) & (counts <= rx.m_hi)
    return rec


def dark_only_fire(size: int, det: DetectorModel, rng: np.random.Generator) -> np.ndarray:
    """Fire pattern of gates known to hold no signal photon and at least one
    dark count (conditional law used by the sparse session sampler)."""
    d = det.dark
    if size == 0 or d == 0.0:
        return np.zeros((size, 2), dtype=bool)
    p_any = 1.0 - (1.0 - d) ** 2
    p_both = d * d / p_any
    u = rng.random(size)
    fire = np.zeros((size, 2), dtype=bool)
    both = u < p_both
    first = (~both) & (u < p_both + (1.0 - p_both) / 2.0)
    fire[both] = True
    fire[first, 0] = True
    fire[(~both) & (~first), 1] = True
    return fire


def resolve_fire(fire: np.ndarray, det: DetectorModel, rng: np.random.Generator) -> np.ndarray:
    """Map a (N, 2) fire pattern to outcomes under the double-click policy."""
    return _resolve(fire, det, rng)
