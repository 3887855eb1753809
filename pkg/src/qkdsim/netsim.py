"""Trusted-repeater QKD network.

Layering: the quantum plane (photonics, protocols) produces key through
``pipeline``; the key plane is :class:`KeyStore`; the data plane is
:func:`hop_transport`, which sees link key only through reservations.
Each link's two endpoints hold mirrored copies of the same key, so one
store per link models both.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Hashable, Optional, Sequence

import networkx as nx
import numpy as np

from . import pipeline as pl
from .photonics import ChannelModel, ConfigError, DetectorModel, transmit_batch
from .postproc import AuthKeyPool
from .postproc.auth import K, tag_with_bits, verify_with_bits
from .protocols import (QUBIT_PROTOCOLS, RateMode, SessionConfig,
                        measure_qubits, prepare_qubits, sift)

MAC_BITS = 2 * K

NodeId = Hashable


class NoPath(LookupError):
    pass


class NoKey(RuntimeError):
    pass


# --------------------------------------------------------------------------
# key stores
# --------------------------------------------------------------------------


class Purpose(str, Enum):
    OTP = "otp"
    AUTH = "auth"


@dataclass
class Reservation:
    store: "KeyStore"
    start: int
    nbits: int
    used: int = 0
    closed: bool = False

    def take(self, nbits: int, purpose: Purpose) -> np.ndarray:
        if self.closed:
            raise RuntimeError("reservation already released")
        if self.used + nbits > self.nbits:
            raise NoKey("reservation overdrawn")
        lo = self.start + self.used
        bits = self.store._consume(lo, nbits, purpose)
        self.used += nbits
        return bits

    def commit(self) -> None:
        """Release the reservation; bits already taken stay consumed."""
        self.store._release(self)

    def rollback(self) -> None:
        """Release the reservation; fails if any bit was taken."""
        if self.used:
            raise RuntimeError("cannot roll back a reservation whose key was used")
        self.store._release(self)


class KeyStore:
    """Append-only key buffer of one link with reserve / commit / rollback.

    Consumed bits are zeroised in place and their ranges logged.
    """

    def __init__(self, link: tuple):
        self.link = link
        self._buf = np.zeros(0, dtype=np.uint8)
        self._head = 0  # next unreserved bit
        self.produced = 0
        self.consumed_otp = 0
        self.consumed_auth = 0
        self.reserved = 0
        self.audit: list = []
        self._pending: list[Reservation] = []

    @property
    def available(self) -> int:
        return self.produced - self.consumed_otp - self.consumed_auth - self.reserved

    @property
    def consumed(self) -> int:
        return self.consumed_otp + self.consumed_auth

    def deposit(self, bits) -> None:
        bits = np.asarray(bits, dtype=np.uint8)
        self._buf = np.concatenate([self._buf, bits])
        self.produced += len(bits)
        self.audit.append(("produced", len(bits)))

    def peek(self, nbits: int) -> np.ndarray:
        """Copy of the next unreserved bits (tests and audits only)."""
        return self._buf[self._head:self._head + nbits].copy()

    def reserve(self, nbits: int) -> Reservation:
        if self._pending:
            raise RuntimeError("store already has an open reservation")
        if nbits > self.available:
            raise NoKey(f"link {self.link}: need {nbits} bits, {self.available} available")
        r = Reservation(self, self._head, nbits)
        self._head += nbits
        self.reserved += nbits
        self._pending.append(r)
        return r

    def _consume(self, lo: int, nbits: int, purpose: Purpose) -> np.ndarray:
        out = self._buf[lo:lo + nbits].copy()
        self._buf[lo:lo + nbits] = 0
        self.reserved -= nbits
        if purpose is Purpose.OTP:
            self.consumed_otp += nbits
        else:
            self.consumed_auth += nbits
        self.audit.append((purpose.value, lo, lo + nbits))
        return out

    def _release(self, r: Reservation) -> None:
        if r.closed or r not in self._pending:
            raise RuntimeError("reservation released twice")
        # the untouched tail goes back; only one reservation is open at a
        # time, so the head can simply move back
        self.reserved -= r.nbits - r.used
        self._head = r.start + r.used
        r.closed = True
        self._pending.remove(r)

    def used_ranges(self) -> list:
        return [(a[1], a[2]) for a in self.audit if a[0] in ("otp", "auth")]


# --------------------------------------------------------------------------
# graph
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LinkConfig:
    loss_db: float
    session: SessionConfig
    detector: DetectorModel = DetectorModel()
    misalignment: float = 0.0
    mode: Optional[RateMode] = None
    sparse: bool = False
    bootstrap_bits: int = 4096

    @property
    def channel(self) -> ChannelModel:
        return ChannelModel(self.loss_db, self.misalignment)


def link_key(u, v) -> tuple:
    return tuple(sorted((u, v), key=repr))


class Network:
    def __init__(self):
        self.graph = nx.Graph()
        self.stores: dict = {}
        self.pools: dict = {}
        self.flagged: set = set()

    def add_node(self, node: NodeId) -> None:
        self.graph.add_node(node)

    def add_link(self, u: NodeId, v: NodeId, cfg: LinkConfig, rng: Optional[np.random.Generator] = None) -> None:
        if u == v:
            raise ConfigError("link endpoints must differ")
        if self.graph.has_edge(u, v):
            raise ConfigError(f"duplicate link {u}-{v}")
        key = link_key(u, v)
        self.graph.add_edge(u, v, cfg=cfg)
        self.stores[key] = KeyStore(key)
        rng = rng or np.random.default_rng(zlib.crc32(repr(key).encode()))
        # initial shared secret, one per link
        self.pools[key] = AuthKeyPool.random(cfg.bootstrap_bits, rng)

    def store(self, u, v) -> KeyStore:
        return self.stores[link_key(u, v)]

    def links(self) -> list:
        return sorted(self.stores, key=repr)

    @property
    def bootstrap_secrets(self) -> int:
        return len(self.pools)


def chain(nodes: Sequence[NodeId], cfg: LinkConfig) -> Network:
    net = Network()
    for n in nodes:
        net.add_node(n)
    for i, (u, v) in enumerate(zip(nodes, nodes[1:])):
        net.add_link(u, v, cfg, np.random.default_rng(i))
    return net


# --------------------------------------------------------------------------
# provisioning
# --------------------------------------------------------------------------


class ProvisionMode(str, Enum):
    FULL_SIM = "FULL_SIM"
    RATE_MODEL = "RATE_MODEL"


@dataclass
class RateCurve:
    """Secret bits per pulse against loss, interpolated linearly in log(rate)."""

    loss_db: np.ndarray
    rate: np.ndarray

    def __post_init__(self):
        order = np.argsort(self.loss_db)
        self.loss_db = np.asarray(self.loss_db, dtype=float)[order]
        self.rate = np.asarray(self.rate, dtype=float)[order]

    def __call__(self, loss_db: float) -> float:
        x, r = self.loss_db, self.rate
        if len(x) == 1:
            return float(r[0]) if loss_db == x[0] else 0.0
        i = int(np.clip(np.searchsorted(x, loss_db) - 1, 0, len(x) - 2))
        if r[i] <= 0 or r[i + 1] <= 0:
            # zero beyond the secure range; inside, stay on the safe side
            return 0.0 if loss_db >= x[i] else float(r[i])
        t = (loss_db - x[i]) / (x[i + 1] - x[i])
        return float(math.exp((1 - t) * math.log(r[i]) + t * math.log(r[i + 1])))

    @classmethod
    def calibrate(cls, link: LinkConfig, losses: Sequence[float], n_pulses: int,
                  seed: int = 0) -> "RateCurve":
        rates = []
        for j, loss in enumerate(losses):
            cfg = replace(link.session, n_pulses=n_pulses, seed=seed + j)
            res = pl.run_pipeline(cfg, ChannelModel(loss, link.misalignment), link.detector,
                                  mode=link.mode, sparse=link.sparse)
            rates.append(res.rate if res.aborted is None else 0.0)
        return cls(np.array(losses, float), np.array(rates))


@dataclass
class ProvisionReport:
    deposited: dict
    flagged: list
    results: dict = field(default_factory=dict)


def provision_links(net: Network, mode: ProvisionMode, duration: int, *,
                    curve: Optional[RateCurve] = None, seed: int = 0) -> ProvisionReport:
    """Fill every link store with ``duration`` pulses worth of key."""
    mode = ProvisionMode(mode)
    deposited, flagged, results = {}, [], {}
    for j, key in enumerate(net.links()):
        cfg: LinkConfig = net.graph.edges[key]["cfg"]
        ss = np.random.SeedSequence([seed, j])
        if mode is ProvisionMode.FULL_SIM:
            sess = replace(cfg.session, n_pulses=duration, seed=int(ss.generate_state(1)[0]))
            res = pl.run_pipeline(sess, cfg.channel, cfg.detector, mode=cfg.mode,
                                  sparse=cfg.sparse, pool=net.pools[key])
            results[key] = res
            if res.key_alice is not None and not res.keys_match:
                raise RuntimeError(f"link {key}: endpoint keys differ")
            bits = res.key_alice.bits if res.key_alice is not None else np.zeros(0, np.uint8)
        else:
            if curve is None:
                raise ConfigError("RATE_MODEL provisioning needs a rate curve")
            n = int(math.floor(curve(cfg.loss_db) * duration))
            bits = np.random.default_rng(ss).integers(0, 2, n, dtype=np.uint8)
        if len(bits) == 0:
            flagged.append(key)
            net.flagged.add(key)
        net.stores[key].deposit(bits)
        deposited[key] = len(bits)
    return ProvisionReport(deposited, flagged, results)


# --------------------------------------------------------------------------
# routing and transport
# --------------------------------------------------------------------------


def path_links(path: Sequence[NodeId]) -> list:
    return [link_key(u, v) for u, v in zip(path, path[1:])]


def bottleneck(net: Network, path: Sequence[NodeId]) -> int:
    return min(net.stores[k].available for k in path_links(path))


def find_path(net: Network, src: NodeId, dst: NodeId, need_bits: Optional[int] = None) -> list:
    """Minimum-hop path; ties go to the largest bottleneck key, then to the
    lexicographically smallest node sequence."""
    if src == dst:
        raise ValueError("source and destination coincide")
    try:
        paths = list(nx.all_shortest_paths(net.graph, src, dst))
    except (nx.NetworkXNoPath, nx.NodeNotFound):
        raise NoPath(f"no path {src} -> {dst}") from None
    best = min(paths, key=lambda p: (-bottleneck(net, p), [repr(n) for n in p]))
    if need_bits is not None and bottleneck(net, best) < need_bits:
        raise NoKey(f"path {best} cannot pay {need_bits} bits per link")
    return best


@dataclass(frozen=True)
class SecretPayload:
    data: bytes

    def __post_init__(self):
        if len(self.data) < 1:
            raise ValueError("payload must be at least one byte")

    @classmethod
    def random(cls, nbytes: int, rng: np.random.Generator) -> "SecretPayload":
        return cls(rng.integers(0, 256, nbytes, dtype=np.uint8).tobytes())

    @property
    def nbits(self) -> int:
        return 8 * len(self.data)


@dataclass(frozen=True)
class TransportMessage:
    ciphertext: bytes
    tag: bytes
    path: tuple  # remaining hops, receiver first
    payload_len: int


class Outcome(str, Enum):
    DELIVERED = "DELIVERED"
    AUTH_FAIL = "AUTH_FAIL"
    NO_KEY = "NO_KEY"
    NO_PATH = "NO_PATH"


@dataclass
class Transcript:
    """What each node saw in plaintext, and what crossed each wire."""

    plaintext: dict = field(default_factory=dict)
    wire: list = field(default_factory=list)

    def saw(self, node, data: bytes) -> None:
        self.plaintext.setdefault(node, []).append(data)


@dataclass
class DeliveryReport:
    outcome: Outcome
    path: list
    delivered: Optional[bytes] = None
    failed_hop: Optional[int] = None
    consumption: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        return {"path": "-".join(map(str, self.path)), "outcome": self.outcome.value,
                "failed_hop": "" if self.failed_hop is None else self.failed_hop,
                "consumption": ";".join(f"{a}-{b}:{n}" for (a, b), n in self.consumption.items())}


def _xor(data: bytes, key_bits: np.ndarray) -> bytes:
    pad = np.packbits(key_bits).tobytes()
    return bytes(a ^ b for a, b in zip(data, pad))


def _header(path: Sequence[NodeId], payload_len: int) -> bytes:
    return repr((tuple(path), payload_len)).encode()


Tamper = Callable[[int, TransportMessage], TransportMessage]


def hop_transport(payload: SecretPayload, path: Sequence[NodeId], net: Network, *,
                  tamper: Optional[Tamper] = None,
                  transcript: Optional[Transcript] = None) -> DeliveryReport:
    """Relay ``payload`` along ``path`` with OTP + one-time MAC per hop.

    All link reservations are made before anything is sent.  On AUTH_FAIL
    the hops that already put ciphertext on the wire keep their key burnt;
    reservations of hops never reached are rolled back.
    """
    path = list(path)
    links = path_links(path)
    need = payload.nbits + MAC_BITS
    res = []
    try:
        for k in links:
            res.append(net.stores[k].reserve(need))
    except NoKey:
        for r in res:
            r.rollback()
        return DeliveryReport(Outcome.NO_KEY, path)
    tx = transcript if transcript is not None else Transcript()
    data = payload.data
    tx.saw(path[0], data)
    consumption = {}
    for h, (k, r) in enumerate(zip(links, res)):
        otp = r.take(payload.nbits, Purpose.OTP)
        mac = r.take(MAC_BITS, Purpose.AUTH)
        consumption[k] = r.used
        ct = _xor(data, otp)
        remaining = tuple(path[h + 1:])
        msg = TransportMessage(ct, tag_with_bits(_header(remaining, len(data)) + ct, mac),
                               remaining, len(data))
        if tamper is not None:
            msg = tamper(h, msg)
        tx.wire.append((k, msg.ciphertext))
        # receiver: verify first, then decrypt
        if not verify_with_bits(_header(msg.path, msg.payload_len) + msg.ciphertext, msg.tag, mac):
            r.commit()
            for later in res[h + 1:]:
                later.rollback()
            return DeliveryReport(Outcome.AUTH_FAIL, path, None, h, consumption)
        data = _xor(msg.ciphertext, otp)
        tx.saw(path[h + 1], data)
        r.commit()
    return DeliveryReport(Outcome.DELIVERED, path, data, None, consumption)


def transport(net: Network, src: NodeId, dst: NodeId, payload: SecretPayload,
              **kw) -> DeliveryReport:
    try:
        path = find_path(net, src, dst, payload.nbits + MAC_BITS)
    except NoPath:
        return DeliveryReport(Outcome.NO_PATH, [src, dst])
    except NoKey:
        path = find_path(net, src, dst)
        return DeliveryReport(Outcome.NO_KEY, path)
    return hop_transport(payload, path, net, **kw)


def compromise_probe(node: NodeId, transcript: Transcript) -> list:
    """Every payload that node ``node`` held in plaintext."""
    return list(transcript.plaintext.get(node, []))


# --------------------------------------------------------------------------
# passive optical switching
# --------------------------------------------------------------------------


def passive_switch_session(cfg: SessionConfig, bobs: Sequence[DetectorModel], ratio: float,
                           channel: ChannelModel, rng: Optional[np.random.Generator] = None):
    """One Alice behind a beam splitter feeding two Bobs.

    Each pulse reaches Bob 1 with probability ``ratio``.  Returns one
    slot-aligned sifted pair per Bob.
    """
    if cfg.protocol not in QUBIT_PROTOCOLS:
        raise ConfigError("passive switching needs a qubit protocol")
    if not 0.0 < ratio <= 1.0 or len(bobs) != 2:
        raise ConfigError("need two Bobs and a ratio in (0, 1]")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    alice, batch = prepare_qubits(cfg, rng)
    rx = transmit_batch(batch, channel, rng)
    to_first = rng.random(len(rx)) < ratio
    out = []
    for det, mask in zip(bobs, (to_first, ~to_first)):
        bob = measure_qubits(rx.subset(mask), cfg, det, rng)
        out.append(sift(cfg.protocol, alice.subset(mask), bob))
    return out[0], out[1]
