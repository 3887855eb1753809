"""JSON scenario files, validated before anything runs."""
from __future__ import annotations

import hashlib
import json
from enum import Enum
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from . import attacks as atk
from .netsim import LinkConfig, ProvisionMode
from .photonics import ChannelModel, ConfigError, DetectorModel, SourceConfig
from .postproc import SecurityParams
from .protocols import Protocol, RateMode, SessionConfig
from .qnrc import Y00Config
from .sweep import SweepSpec


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class Kind(str, Enum):
    SESSION = "SESSION"
    SWEEP = "SWEEP"
    NETWORK = "NETWORK"
    QNRC = "QNRC"
    VERIFY = "VERIFY"


class SourceModel(Strict):
    mu_by_class: dict[str, float] = {"signal": 1.0}
    single_photon: bool = True
    decoy: bool = False

    def build(self) -> SourceConfig:
        return SourceConfig(dict(self.mu_by_class), single_photon=self.single_photon,
                            decoy=self.decoy)


class DetectorModelSpec(Strict):
    eff0: float = Field(1.0, ge=0, le=1)
    eff1: float = Field(1.0, ge=0, le=1)
    dark: float = Field(0.0, ge=0, lt=1)
    afterpulse_p0: float = Field(0.0, ge=0, le=1)
    afterpulse_tau: float = Field(1.0, gt=0)
    blanking_gates: int = Field(0, ge=0)
    double_click_policy: Literal["RANDOM_BIT", "DISCARD"] = "RANDOM_BIT"

    def build(self) -> DetectorModel:
        return DetectorModel(**self.model_dump())


class ChannelSpec(Strict):
    loss_db: float = Field(0.0, ge=0)
    misalignment: Optional[float] = None
    optical_error: Optional[float] = Field(None, ge=0, le=0.5)

    @model_validator(mode="after")
    def _one_error_knob(self):
        if self.misalignment is not None and self.optical_error is not None:
            raise ValueError("give misalignment or optical_error, not both")
        return self

    @property
    def angle(self) -> float:
        if self.optical_error is not None:
            return ChannelModel.misalignment_for_qber(self.optical_error)
        return self.misalignment or 0.0

    def build(self) -> ChannelModel:
        return ChannelModel(self.loss_db, self.angle)


class AttackSpec(Strict):
    kind: atk.AttackKind
    strategy: Literal["random", "match", "X", "Y"] = "random"
    fraction: float = Field(1.0, ge=0, le=1)
    target_yield: Optional[float] = Field(None, ge=0, le=1)
    block_len: int = Field(1, ge=1)
    resend_mu: Optional[float] = Field(None, gt=0)

    def build(self) -> atk.AttackConfig:
        return atk.AttackConfig(**self.model_dump())


class SyncSpec(Strict):
    window: int = Field(2000, ge=100)
    inject_offset: int = 0
    inject_at: int = Field(0, ge=0)
    search_range: int = Field(16, ge=0)
    baseline: float = Field(0.02, gt=0, lt=0.5)
    scramble_from: Optional[int] = Field(None, ge=0)


class SessionModel(Strict):
    protocol: Protocol = Protocol.BB84
    n_pulses: int = Field(100_000, ge=1)
    source: SourceModel = SourceModel()
    class_probabilities: Optional[dict[str, float]] = None
    test_fraction: float = Field(0.1, gt=0, lt=1)
    basis_bias: float = Field(0.5, ge=0, le=1)
    channel: ChannelSpec = ChannelSpec()
    detector: DetectorModelSpec = DetectorModelSpec()
    attack: Optional[AttackSpec] = None
    mode: Optional[RateMode] = None
    sparse: bool = False
    s: int = Field(10, ge=1)
    l: int = Field(10, ge=1)
    abort_threshold: float = Field(0.11, gt=0, le=0.5)
    b92_window_sigma: float = Field(4.0, gt=0)
    sync: Optional[SyncSpec] = None

    @model_validator(mode="after")
    def _buildable(self):
        try:
            self.config(0)
            self.channel.build()
            if self.attack is not None:
                self.attack.build()
        except ConfigError as e:
            raise ValueError(str(e)) from None
        return self

    def config(self, seed: int) -> SessionConfig:
        return SessionConfig(self.protocol, self.n_pulses, self.source.build(),
                             None if self.class_probabilities is None
                             else dict(self.class_probabilities),
                             self.test_fraction, self.basis_bias, seed,
                             b92_window_sigma=self.b92_window_sigma)

    @property
    def params(self) -> SecurityParams:
        return SecurityParams(self.s, self.l)


class SweepModel(Strict):
    losses: list[float] = Field([10.0, 15.0, 20.0, 25.0, 30.0], min_length=3)
    modes: list[RateMode] = list(RateMode)
    optical_error: float = Field(0.01, ge=0, lt=0.5)
    dark: float = Field(1e-8, ge=0, lt=1)
    eff: float = Field(1.0, gt=0, le=1)
    leak_ec: float = Field(1.16, ge=1)
    mu_signal: float = Field(0.5, gt=0)
    mu_decoy: float = Field(0.1, gt=0)
    decoy_probabilities: tuple[float, float, float] = (0.8, 0.1, 0.1)
    target_clicks: float = Field(1e5, gt=0)
    max_pulses: int = Field(10**12, ge=1000)
    dps_mu: Optional[float] = Field(None, gt=0)
    dps_target_clicks: float = Field(1e4, gt=0)

    def build(self) -> SweepSpec:
        d = self.model_dump()
        d["losses"] = tuple(d["losses"])
        d["modes"] = tuple(m.value for m in self.modes)
        return SweepSpec(**d)


class LinkModel(Strict):
    u: str
    v: str
    loss_db: float = Field(0.0, ge=0)


class TransportModel(Strict):
    src: str
    dst: str
    payload_bytes: int = Field(32, ge=1)
    tamper_hop: Optional[int] = Field(None, ge=0)


class NetworkModel(Strict):
    nodes: list[str] = Field(min_length=2)
    links: list[LinkModel] = Field(min_length=1)
    session: SessionModel = SessionModel(n_pulses=10_000)
    provision: ProvisionMode = ProvisionMode.FULL_SIM
    duration: int = Field(100_000, ge=1)
    curve_losses: list[float] = Field([5.0, 15.0, 25.0], min_length=1)
    curve_pulses: int = Field(10**6, ge=1)
    bootstrap_bits: int = Field(4096, ge=0)
    transports: list[TransportModel] = []

    @model_validator(mode="after")
    def _known_nodes(self):
        names = set(self.nodes)
        if len(names) != len(self.nodes):
            raise ValueError("duplicate node names")
        for ref in [x for lk in self.links for x in (lk.u, lk.v)] + [
                x for t in self.transports for x in (t.src, t.dst)]:
            if ref not in names:
                raise ValueError(f"unknown node {ref!r}")
        return self

    def link_config(self, loss_db: float) -> LinkConfig:
        s = self.session
        return LinkConfig(loss_db, s.config(0), s.detector.build(), s.channel.angle,
                          s.mode, s.sparse, self.bootstrap_bits)


class QnrcModel(Strict):
    M: int = Field(64, ge=2)
    alpha: float = Field(5.0, gt=0)
    channel_eta: float = Field(1.0, gt=0, le=1)
    excess_noise: float = Field(0.0, ge=0)
    n_symbols: int = Field(100_000, ge=1)
    seed_key: int = Field(1, ge=0)

    @model_validator(mode="after")
    def _buildable(self):
        try:
            self.build()
        except ConfigError as e:
            raise ValueError(str(e)) from None
        return self

    def build(self) -> Y00Config:
        return Y00Config(self.M, self.alpha, self.channel_eta, self.excess_noise)


class VerifyModel(Strict):
    criteria: Optional[list[int]] = None

    @model_validator(mode="after")
    def _ids(self):
        if self.criteria and not set(self.criteria) <= set(range(1, 10)):
            raise ValueError("criteria ids run from 1 to 9")
        return self


_SECTIONS = {Kind.SESSION: "session", Kind.SWEEP: "sweep", Kind.NETWORK: "network",
             Kind.QNRC: "qnrc", Kind.VERIFY: "verify"}


class Scenario(Strict):
    kind: Kind
    seed: int = Field(0, ge=0)
    out: Optional[str] = None
    session: Optional[SessionModel] = None
    sweep: Optional[SweepModel] = None
    network: Optional[NetworkModel] = None
    qnrc: Optional[QnrcModel] = None
    verify: Optional[VerifyModel] = None

    @model_validator(mode="after")
    def _matching_section(self):
        want = _SECTIONS[self.kind]
        for name in _SECTIONS.values():
            if name != want and getattr(self, name) is not None:
                raise ValueError(f"section {name!r} does not belong to a {self.kind.value} scenario")
        if getattr(self, want) is None:
            # every section has usable defaults except the network topology
            if self.kind is Kind.NETWORK:
                raise ValueError("a NETWORK scenario needs a 'network' section")
            object.__setattr__(self, want, {
                "session": SessionModel, "sweep": SweepModel, "qnrc": QnrcModel,
                "verify": VerifyModel}[want]())
        return self

    @property
    def body(self):
        return getattr(self, _SECTIONS[self.kind])

    def canonical(self) -> str:
        d = self.model_dump(mode="json", exclude={"out"})
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()


def load_scenario(path) -> Scenario:
    return Scenario.model_validate_json(Path(path).read_text())
