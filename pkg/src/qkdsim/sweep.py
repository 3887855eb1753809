"""Key rate against channel loss, with a log-log slope fit."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import linregress

from .photonics import ChannelModel, DetectorModel, SourceConfig
from .protocols import (Protocol, RateMode, SessionConfig, accumulate_stats, decoy_bound,
                        key_rate, optimal_wcp_mu, run_quantum_phase, sift)


@dataclass(frozen=True)
class SweepSpec:
    losses: tuple = (10.0, 15.0, 20.0, 25.0, 30.0)
    modes: tuple = ("SINGLE_PHOTON", "DECOY", "WCP_WORSTCASE")
    optical_error: float = 0.01
    dark: float = 1e-8
    eff: float = 1.0
    leak_ec: float = 1.16
    mu_signal: float = 0.5
    mu_decoy: float = 0.1
    decoy_probabilities: tuple = (0.8, 0.1, 0.1)  # signal, decoy, vacuum
    target_clicks: float = 1e5
    max_pulses: int = 10**12
    # optional DPS series: reported and fitted, no target slope
    dps_mu: Optional[float] = None
    dps_target_clicks: float = 1e4
    dps_chunk: int = 2_000_000

    def __post_init__(self):
        if len(self.losses) < 3:
            raise ValueError("a sweep needs at least 3 loss points")
        for m in self.modes:
            RateMode(m)


@dataclass
class SweepPoint:
    index: int
    mode: str
    loss_db: float
    eta: float
    mu: float
    n_pulses: int
    Q: float = float("nan")
    E: float = float("nan")
    Y1_lower: float = float("nan")
    rate: float = float("nan")
    error: str = ""


@dataclass
class Fit:
    mode: str
    slope: float
    stderr: float
    points: int


@dataclass
class SweepResult:
    points: list
    fits: dict = field(default_factory=dict)

    def rows(self) -> list:
        return [asdict(p) for p in self.points]


def _point_config(spec: SweepSpec, mode: RateMode, loss: float, seed: int) -> tuple:
    eta = 10.0 ** (-loss / 10.0)
    det = DetectorModel(spec.eff, spec.eff, spec.dark)
    if mode is RateMode.SINGLE_PHOTON:
        src, probs, mu = SourceConfig({"signal": 1.0}, single_photon=True), None, 1.0
        rate_in = eta * spec.eff
        proto = Protocol.BB84
    elif mode is RateMode.DECOY:
        mu = spec.mu_signal
        src = SourceConfig({"signal": mu, "decoy": spec.mu_decoy, "vacuum": 0.0}, decoy=True)
        probs = dict(zip(("signal", "decoy", "vacuum"), spec.decoy_probabilities))
        # size by the rarest informative class
        rate_in = spec.mu_decoy * eta * spec.eff * min(probs["decoy"], probs["signal"])
        proto = Protocol.BB84_DECOY
    else:
        mu = optimal_wcp_mu(eta * spec.eff, DetectorModel(dark=spec.dark), spec.optical_error,
                            spec.leak_ec)
        src, probs = SourceConfig({"signal": mu}), None
        rate_in = mu * eta * spec.eff
        proto = Protocol.BB84
    n = int(min(spec.max_pulses, max(1000, math.ceil(spec.target_clicks / max(rate_in, 1e-300)))))
    cfg = SessionConfig(proto, n, src, probs, seed=seed)
    ch = ChannelModel(loss, ChannelModel.misalignment_for_qber(spec.optical_error))
    return cfg, ch, det, mu, eta


def _dps_point(spec: SweepSpec, pt: SweepPoint, seed: int) -> SweepPoint:
    """Dense DPS sessions in chunks (one differential pair lost per seam)."""
    pt.mu = spec.dps_mu
    rate_in = spec.dps_mu * pt.eta * spec.eff
    n = int(min(spec.max_pulses, max(1000, math.ceil(spec.dps_target_clicks / rate_in))))
    pt.n_pulses = n
    det = DetectorModel(spec.eff, spec.eff, spec.dark)
    ch = ChannelModel(pt.loss_db, ChannelModel.misalignment_for_qber(spec.optical_error))
    rng = np.random.default_rng(seed)
    stats = None
    for lo in range(0, n, spec.dps_chunk):
        cfg = SessionConfig(Protocol.DPS, min(spec.dps_chunk, n - lo), SourceConfig({"signal": spec.dps_mu}))
        alice, bob, _ = run_quantum_phase(cfg, ch, det, rng=rng)
        pair = sift(Protocol.DPS, alice, bob)
        part = accumulate_stats(alice, bob, pair, pair[0].slots)
        stats = part if stats is None else stats.merge(part)
    pt.Q, pt.E = stats.gain["signal"], stats.error_rate["signal"]
    pt.rate = key_rate(stats, None, RateMode.WCP_WORSTCASE, spec.leak_ec)
    return pt


def run_point(args) -> SweepPoint:
    spec, idx, mode, loss, seed = args
    if mode == "DPS":
        pt = SweepPoint(idx, mode, loss, 10.0 ** (-loss / 10.0), float("nan"), 0)
        try:
            return _dps_point(spec, pt, seed)
        except Exception as exc:
            pt.error = f"{type(exc).__name__}: {exc}"
            return pt
    mode = RateMode(mode)
    pt = SweepPoint(idx, mode.value, loss, 10.0 ** (-loss / 10.0), float("nan"), 0)
    try:
        cfg, ch, det, mu, eta = _point_config(spec, mode, loss, seed)
        pt.mu, pt.n_pulses = mu, cfg.n_pulses
        alice, bob, _ = run_quantum_phase(cfg, ch, det, sparse=True,
                                          rng=np.random.default_rng(seed))
        pair = sift(cfg.protocol, alice, bob)
        # asymptotic estimate: every sifted bit counts as disclosed
        stats = accumulate_stats(alice, bob, pair, pair[0].slots)
        bounds = None
        if mode is RateMode.DECOY:
            bounds = decoy_bound(stats, spec.mu_signal, spec.mu_decoy)
            pt.Y1_lower = bounds.Y1_lower
        pt.Q, pt.E = stats.gain["signal"], stats.error_rate["signal"]
        pt.rate = key_rate(stats, bounds, mode, spec.leak_ec)
    except Exception as exc:  # a failed point is reported, not fatal
        pt.error = f"{type(exc).__name__}: {exc}"
    return pt


def fit_slope(points: Sequence[SweepPoint]) -> Optional[Fit]:
    ok = [p for p in points if not p.error and p.rate > 0]
    if len(ok) < 3:
        return None
    lr = linregress(np.log([p.eta for p in ok]), np.log([p.rate for p in ok]))
    return Fit(ok[0].mode, float(lr.slope), float(lr.stderr), len(ok))


def sweep_distance(spec: SweepSpec, master_seed: int = 0, jobs: int = 1) -> SweepResult:
    tasks = []
    series = [RateMode(m).value for m in spec.modes] + (["DPS"] if spec.dps_mu else [])
    for m in series:
        for loss in spec.losses:
            idx = len(tasks)
            seed = int(np.random.SeedSequence([master_seed, idx]).generate_state(1)[0])
            tasks.append((spec, idx, m, float(loss), seed))
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            points = list(ex.map(run_point, tasks))
    else:
        points = [run_point(t) for t in tasks]
    res = SweepResult(points)
    for m in series:
        fit = fit_slope([p for p in points if p.mode == m])
        if fit is not None:
            res.fits[fit.mode] = fit
    return res
