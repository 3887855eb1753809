"""One complete QKD session: quantum phase, sifting, estimation,
reconciliation, privacy amplification."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import attacks as atk
from .photonics import ChannelModel, DetectorModel
from .postproc import (AuthenticatedChannel, AuthKeyPool, QberEstimate,
                       ReconcileFail, SecretKey, SecurityParams, cascade_reconcile,
                       estimate_qber, privacy_amplify, split_test_bits)
from .postproc.estimation import DEFAULT_ABORT_QBER
from .protocols import (NON_COMPOSABLE, BoundUnavailable, DecoyBounds, Protocol, RateMode,
                        SessionConfig, SessionStats, accumulate_stats, decoy_bound,
                        run_quantum_phase, secure_fraction, sift)

# sifting, test disclosure, reconciliation transcript, hash seed
AUTH_MESSAGES = 4


class SessionAbort(RuntimeError):
    def __init__(self, reason: str, result: "PipelineResult"):
        super().__init__(reason)
        self.reason = reason
        self.result = result


@dataclass
class PipelineResult:
    cfg: SessionConfig
    stats: Optional[SessionStats] = None
    qber: Optional[QberEstimate] = None
    bounds: Optional[DecoyBounds] = None
    mode: Optional[RateMode] = None
    sifted_length: int = 0
    code_length: int = 0
    leak_bits: int = 0
    single_fraction: float = 0.0
    e1: float = 0.5
    key_alice: Optional[SecretKey] = None
    key_bob: Optional[SecretKey] = None
    auth_bits: int = 0
    aborted: Optional[str] = None
    eve: object = None
    meta: dict = field(default_factory=dict)

    @property
    def key_length(self) -> int:
        return 0 if self.key_alice is None else len(self.key_alice)

    @property
    def keys_match(self) -> bool:
        return (self.key_alice is not None
                and np.array_equal(self.key_alice.bits, self.key_bob.bits))

    @property
    def rate(self) -> float:
        return self.key_length / self.cfg.n_pulses

    def as_row(self) -> dict:
        row = self.stats.as_row() if self.stats is not None else {
            "protocol": self.cfg.protocol.value, "n_pulses": self.cfg.n_pulses}
        row.update({
            "mode": None if self.mode is None else self.mode.value,
            "qber": None if self.qber is None else self.qber.point,
            "qber_upper": None if self.qber is None else self.qber.ci_upper,
            "code_length": self.code_length,
            "leak_bits": self.leak_bits,
            "single_fraction": self.single_fraction,
            "e1": self.e1,
            "key_length": self.key_length,
            "rate_per_pulse": self.rate,
            "aborted": self.aborted or "",
            "composable": self.cfg.protocol not in NON_COMPOSABLE,
        })
        return row


def default_mode(cfg: SessionConfig) -> RateMode:
    if cfg.protocol is Protocol.BB84_DECOY:
        return RateMode.DECOY
    if cfg.source.single_photon:
        return RateMode.SINGLE_PHOTON
    return RateMode.WCP_WORSTCASE


def _rngs(cfg: SessionConfig, rng: Optional[np.random.Generator]):
    ss = np.random.SeedSequence(cfg.seed if rng is None else int(rng.integers(2**63)))
    quantum, sample, recon, pa = ss.spawn(4)
    return (np.random.default_rng(quantum), np.random.default_rng(sample),
            np.random.default_rng(recon), pa)


def run_pipeline(cfg: SessionConfig, channel: ChannelModel, det: DetectorModel,
                 attack: Optional[atk.AttackConfig] = None, *,
                 params: SecurityParams = SecurityParams(), mode: Optional[RateMode] = None,
                 sparse: bool = False, pool: Optional[AuthKeyPool] = None,
                 abort_threshold: float = DEFAULT_ABORT_QBER,
                 rng: Optional[np.random.Generator] = None,
                 raise_on_abort: bool = False) -> PipelineResult:
    """Run a session end to end.

    Only signal-class bits enter the key.  With a ``pool`` the session pays
    ``AUTH_MESSAGES`` one-time tags and aborts before any public
    announcement if the pool cannot cover them.
    """
    mode = default_mode(cfg) if mode is None else RateMode(mode)
    res = PipelineResult(cfg, mode=mode)

    def abort(reason: str) -> PipelineResult:
        res.aborted = reason
        if raise_on_abort:
            raise SessionAbort(reason, res)
        return res

    if pool is not None and pool.remaining < AUTH_MESSAGES * 2 * pool.k:
        return abort("POOL_EXHAUSTED")
    r_q, r_s, r_c, pa_seed = _rngs(cfg, rng)
    alice, bob, res.eve = run_quantum_phase(cfg, channel, det, attack, sparse=sparse, rng=r_q)

    def pay() -> None:
        if pool is not None:
            pool.charge()
            res.auth_bits += 2 * pool.k

    pay()
    ka, kb = sift(cfg.protocol, alice, bob)
    res.sifted_length = len(ka)
    if len(ka) < 2:
        return abort("NO_SIFTED_KEY")
    pay()
    (ta, tb), (ca, cb) = split_test_bits((ka, kb), cfg.test_fraction, r_s)
    res.stats = accumulate_stats(alice, bob, (ka, kb), ta.slots)
    sig = cfg.class_ids.index(cfg.signal_class)
    t_sig = ta.class_idx == sig
    if not t_sig.any():
        return abort("NO_SIGNAL_TEST_BITS")
    res.qber = estimate_qber((ta.subset(t_sig), tb.subset(t_sig)), params, abort_threshold)
    if res.qber.abort:
        return abort("QBER_ABORT")
    if mode is RateMode.DECOY:
        try:
            res.bounds = decoy_bound(res.stats, cfg.mu_signal, cfg.source.mu(cfg.decoy_class),
                                     signal_class=cfg.signal_class, decoy_class=cfg.decoy_class,
                                     vacuum_class=cfg.vacuum_class)
        except BoundUnavailable:
            return abort("DECOY_BOUND_UNAVAILABLE")
    c_sig = ca.class_idx == sig
    ca, cb = ca.subset(c_sig), cb.subset(c_sig)
    res.code_length = len(ca)
    chan = AuthenticatedChannel()
    pay()
    # with no observed error the point estimate would make one key-wide block
    q_blocks = res.qber.point if res.qber.errors else res.qber.ci_upper
    try:
        ra, rb = cascade_reconcile(ca, cb, q_blocks, chan, r_c, verify_bits=params.s)
    except ReconcileFail:
        res.leak_bits = chan.leak_bits
        return abort("RECONCILE_FAIL")
    res.leak_bits = ra.leak_bits
    if cfg.protocol in NON_COMPOSABLE:
        a, e1 = 1.0, res.qber.ci_upper
    else:
        a, e1 = secure_fraction(res.stats, mode, res.bounds, cfg.signal_class,
                                e_signal=res.qber.ci_upper)
    res.single_fraction, res.e1 = a, min(e1, 0.5)
    pay()
    res.key_alice = privacy_amplify(ra, res.e1, a, params, np.random.default_rng(pa_seed))
    res.key_bob = privacy_amplify(rb, res.e1, a, params, np.random.default_rng(pa_seed))
    res.meta = dict(res.key_alice.epsilon_meta)
    return res
