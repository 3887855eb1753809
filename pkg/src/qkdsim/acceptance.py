"""Acceptance checks run by ``qkdsim verify`` and the test suite.

Every check draws from its own seed stream, so results are reproducible
check by check.  Wall-clock times are reported alongside but never written
into result files.
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.stats import binom, norm

from . import attacks as atk
from . import netsim as ns
from . import qnrc
from . import syncctl as sc
from .photonics import ChannelModel, DetectorModel, SourceConfig, bb84_bloch, basis_axis
from .pipeline import run_pipeline
from .postproc import SecurityParams, cascade_reconcile
from .protocols import (SARG_PAIRS, Protocol, SessionConfig, accumulate_stats, decoy_bound,
                        h2, key_rate, run_quantum_phase, sift)
from .sweep import SweepSpec, sweep_distance

RUNTIME_LIMITS = {1: 10.0, 2: 60.0}


@dataclass
class CriterionResult:
    id: int
    name: str
    passed: bool
    measured: dict = field(default_factory=dict)
    runtime_s: float = 0.0

    @property
    def within_time(self) -> bool:
        limit = RUNTIME_LIMITS.get(self.id)
        return limit is None or self.runtime_s < limit

    @property
    def ok(self) -> bool:
        return self.passed and self.within_time

    def line(self) -> str:
        t = f"{self.runtime_s:.1f}s"
        if self.id in RUNTIME_LIMITS:
            t += f" (limit {RUNTIME_LIMITS[self.id]:.0f}s)"
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.id:2d} {self.name}  {t}"


def _rng(seed: int, cid: int, *extra) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, cid, *extra]))


def _seed(seed: int, cid: int, *extra) -> int:
    return int(np.random.SeedSequence([seed, cid, *extra]).generate_state(1)[0])


def _single_photon(n: int, protocol=Protocol.BB84, seed: int = 0) -> SessionConfig:
    return SessionConfig(protocol, n, SourceConfig({"signal": 1.0}, single_photon=True), seed=seed)


# --------------------------------------------------------------------------
# 1. intercept-resend
# --------------------------------------------------------------------------


def check_intercept_resend(seed: int) -> CriterionResult:
    m = {}
    ok = True
    for frac in (1.0, 0.5):
        cfg = _single_photon(210_000, seed=_seed(seed, 1, int(frac * 100)))
        alice, bob, _ = run_quantum_phase(cfg, ChannelModel(), DetectorModel(),
                                          atk.AttackConfig(atk.AttackKind.INTERCEPT_RESEND,
                                                           fraction=frac))
        ka, kb = sift(cfg.protocol, alice, bob)
        q = float(np.mean(ka.bits != kb.bits))
        m[f"f{frac}"] = {"sifted": len(ka), "qber": q, "expected": 0.25 * frac}
        ok &= len(ka) >= 100_000 and abs(q - 0.25 * frac) <= 0.01
    return CriterionResult(1, "intercept-resend QBER", ok, m)


# --------------------------------------------------------------------------
# 2. scaling exponents
# --------------------------------------------------------------------------

SLOPE_TARGETS = {"SINGLE_PHOTON": (1.0, 0.15), "DECOY": (1.0, 0.15), "WCP_WORSTCASE": (2.0, 0.2)}


def check_scaling(seed: int, jobs: int = 1) -> CriterionResult:
    spec = SweepSpec()
    res = sweep_distance(spec, master_seed=_seed(seed, 2), jobs=jobs)
    m = {"dark": spec.dark, "losses": list(spec.losses)}
    ok = spec.dark <= 1e-6
    for mode, (target, tol) in SLOPE_TARGETS.items():
        fit = res.fits.get(mode)
        if fit is None:
            m[mode] = {"slope": None}
            ok = False
            continue
        m[mode] = {"slope": fit.slope, "stderr": fit.stderr, "points": fit.points,
                   "target": target, "tolerance": tol}
        ok &= fit.points == len(spec.losses) and abs(fit.slope - target) <= tol
    return CriterionResult(2, "rate scaling exponents", ok, m)


# --------------------------------------------------------------------------
# 3. photon-number splitting
# --------------------------------------------------------------------------


def check_pns(seed: int) -> CriterionResult:
    ch, det = ChannelModel(20.0), DetectorModel(dark=1e-7)
    n = 400_000_000
    attack = atk.AttackConfig(atk.AttackKind.PNS)

    def stats(cfg, att):
        alice, bob, _ = run_quantum_phase(cfg, ch, det, att, sparse=True)
        pair = sift(cfg.protocol, alice, bob)
        return accumulate_stats(alice, bob, pair, pair[0].slots)

    wcp = SessionConfig(Protocol.BB84, n, SourceConfig({"signal": 0.1}), seed=_seed(seed, 3, 0))
    honest, pns = stats(wcp, None), stats(replace(wcp, seed=_seed(seed, 3, 1)), attack)
    g_h, g_p = honest.gain["signal"], pns.gain["signal"]
    r_h = key_rate(honest, None, "WCP_WORSTCASE")
    r_p = key_rate(pns, None, "WCP_WORSTCASE")

    src = SourceConfig({"signal": 0.1, "decoy": 0.02, "vacuum": 0.0}, decoy=True)
    probs = {"signal": 0.7, "decoy": 0.2, "vacuum": 0.1}
    y1 = []
    for j, att in enumerate((None, attack)):
        cfg = SessionConfig(Protocol.BB84_DECOY, n, src, probs, seed=_seed(seed, 3, 2 + j))
        y1.append(decoy_bound(stats(cfg, att), 0.1, 0.02).Y1_lower)
    drop = 1.0 - y1[1] / y1[0] if y1[0] > 0 else float("nan")
    m = {"gain_honest": g_h, "gain_pns": g_p, "gain_rel_diff": g_p / g_h - 1.0,
         "wcp_rate_honest": r_h, "wcp_rate_pns": r_p,
         "y1_lower_honest": y1[0], "y1_lower_pns": y1[1], "y1_drop": drop}
    ok = abs(g_p / g_h - 1.0) <= 0.01 and r_p == 0.0 and drop >= 0.30
    return CriterionResult(3, "PNS consistency and decoy detection", ok, m)


# --------------------------------------------------------------------------
# 4. sifting combinatorics
# --------------------------------------------------------------------------


def _born(state_basis: int, state_bit: int, meas_basis: int, outcome: int) -> float:
    r = bb84_bloch(state_basis, state_bit)
    return 0.5 * (1.0 + (1 - 2 * outcome) * float(r @ basis_axis(meas_basis)))


def enumerate_sift_fraction(protocol) -> float:
    """Exact expected sifted fraction for ideal single photons, by summing
    over every preparation, measurement basis and outcome."""
    protocol = Protocol(protocol)
    total = 0.0
    if protocol is Protocol.BB84:
        for a_basis, bit, b_basis, out in product((0, 1), (0, 1), (0, 1), (0, 1)):
            if a_basis == b_basis:
                total += 0.125 * _born(a_basis, bit, b_basis, out)
        return total
    if protocol is Protocol.SARG04:
        for pair, bit, b_basis, out in product(range(4), (0, 1), (0, 1), (0, 1)):
            sb, sv = SARG_PAIRS[pair, bit]
            # conclusive iff the outcome is orthogonal to exactly one pair state
            excluded = [SARG_PAIRS[pair, k][0] == b_basis and SARG_PAIRS[pair, k][1] != out
                        for k in (0, 1)]
            if sum(excluded) == 1:
                total += (1 / 16) * _born(int(sb), int(sv), b_basis, out)
        return total
    raise ValueError(f"no enumeration oracle for {protocol.value}")


def check_sifting(seed: int) -> CriterionResult:
    m = {}
    ok = True
    for j, (proto, target) in enumerate(((Protocol.BB84, 0.5), (Protocol.SARG04, 0.25))):
        cfg = _single_photon(100_000, proto, _seed(seed, 4, j))
        alice, bob, _ = run_quantum_phase(cfg, ChannelModel(), DetectorModel())
        frac = len(sift(proto, alice, bob)[0]) / cfg.n_pulses
        oracle = enumerate_sift_fraction(proto)
        m[proto.value] = {"measured": frac, "oracle": oracle, "target": target}
        ok &= abs(frac - target) <= 0.01 and abs(oracle - target) < 1e-12
        ok &= abs(frac - oracle) <= 0.01
    return CriterionResult(4, "sifting combinatorics", ok, m)


# --------------------------------------------------------------------------
# 5. post-processing soundness
# --------------------------------------------------------------------------


def _expected_length(meta: dict) -> int:
    e = meta["e1_upper"]
    h = 0.0 if e <= 0 or e >= 1 else -e * math.log2(e) - (1 - e) * math.log2(1 - e)
    raw = meta["n"] * meta["single_photon_fraction"] * (1 - h) - meta["leak_bits"]
    return max(0, math.floor(raw - 2 * meta["l"] - meta["s"]))


def bias_summary(keys: list) -> dict:
    """Pooled and per-position bias of a set of final keys."""
    L = min(len(k) for k in keys)
    mat = np.stack([k[:L] for k in keys]).astype(np.int64)
    N, total = mat.size, int(mat.sum())
    pooled_z = (total - N / 2) / math.sqrt(N / 4)
    S = len(keys)
    col = mat.sum(axis=0)
    col_z = (col - S / 2) / math.sqrt(S / 4)
    # exact two-sided tail of Bin(S, 1/2) beyond 3 sigma
    hi = math.floor(S / 2 + 3 * math.sqrt(S / 4))
    lo = math.ceil(S / 2 - 3 * math.sqrt(S / 4))
    p_tail = float(binom.sf(hi, S, 0.5) + binom.cdf(lo - 1, S, 0.5))
    outliers = int(np.count_nonzero((col > hi) | (col < lo)))
    allowed = L * p_tail + 3 * math.sqrt(L * p_tail * (1 - p_tail))
    return {"sessions": S, "positions": L, "pooled_z": pooled_z, "max_abs_position_z":
            float(np.abs(col_z).max()), "positions_beyond_3sigma": outliers,
            "expected_beyond_3sigma": L * p_tail, "allowed_beyond_3sigma": allowed}


def check_postproc(seed: int, sessions: int = 200) -> CriterionResult:
    n, q = 10_000, 0.02
    bound = 1.25 * n * h2(q)
    rng = _rng(seed, 5, 0)
    identical = within = 0
    leaks = []
    for _ in range(100):
        a = rng.integers(0, 2, n, dtype=np.uint8)
        b = a ^ (rng.random(n) < q).astype(np.uint8)
        ra, rb = cascade_reconcile(a, b, q, rng=rng)
        identical += bool(np.array_equal(ra.bits, rb.bits))
        within += ra.leak_bits <= bound
        leaks.append(ra.leak_bits)

    ch = ChannelModel(misalignment=ChannelModel.misalignment_for_qber(q))
    params = SecurityParams()
    formula_ok, keys, aborted, mismatched = 0, [], 0, 0
    for i in range(sessions):
        res = run_pipeline(_single_photon(22_500, seed=_seed(seed, 5, 1, i)), ch, DetectorModel(),
                           params=params)
        if res.aborted:
            aborted += 1
            continue
        mismatched += not res.keys_match
        formula_ok += _expected_length(res.meta) == res.key_length == res.meta["length"]
        keys.append(res.key_alice.bits)
    bias = bias_summary(keys) if keys else {}
    bias_ok = bool(keys) and abs(bias["pooled_z"]) <= 3.0 and (
        bias["positions_beyond_3sigma"] <= bias["allowed_beyond_3sigma"])
    m = {"cascade_identical": identical, "cascade_leak_within_bound": within,
         "leak_bound": bound, "leak_mean": float(np.mean(leaks)), "leak_max": int(max(leaks)),
         "sessions": sessions, "sessions_aborted": aborted, "keys_mismatched": mismatched,
         "length_formula_exact": formula_ok, "bias": bias}
    ok = (identical == 100 and within >= 95 and aborted == 0 and mismatched == 0
          and formula_ok == sessions and bias_ok)
    return CriterionResult(5, "post-processing soundness", ok, m)


# --------------------------------------------------------------------------
# 6. USD success law
# --------------------------------------------------------------------------


def check_usd(seed: int, n: int = 100_000) -> CriterionResult:
    m, ok = {}, True
    for j, mu in enumerate((0.1, 0.5, 1.0)):
        rng = _rng(seed, 6, j)
        amps = np.where(rng.integers(0, 2, n) == 1, 1.0, -1.0) * math.sqrt(mu)
        success, sign = atk.usd_measure(amps, mu, rng)
        p = 1.0 - math.exp(-2 * mu)
        rate = float(success.mean())
        sigma = math.sqrt(p * (1 - p) / n)
        wrong = int(np.count_nonzero(success & (sign != np.sign(amps))))
        m[str(mu)] = {"success": rate, "expected": p, "z": (rate - p) / sigma, "wrong": wrong}
        ok &= abs(rate - p) <= 3 * sigma and wrong == 0
    return CriterionResult(6, "USD success law", ok, m)


# --------------------------------------------------------------------------
# 7. Y00 cipher
# --------------------------------------------------------------------------


def check_y00(seed: int) -> CriterionResult:
    rng = _rng(seed, 7)
    rt = qnrc.run_qnrc(qnrc.Y00Config(64, 3.0), 1_000_000, _seed(seed, 7, 0), rng)
    mask = qnrc.run_qnrc(qnrc.Y00Config(64, 5.0), 100_000, _seed(seed, 7, 1), rng)
    gamma = {}
    for M, alpha in ((64, 5.0), (128, 5.0), (256, 10.0)):
        cfg = qnrc.Y00Config(M, alpha)
        gamma[f"M{M}_A{alpha:g}"] = {"formula": qnrc.masking_count(cfg),
                                     "monte_carlo": qnrc.masking_count_mc(cfg, 200_000, rng)}
    bob_errors = int(round(rt.bob_ber * rt.n))
    m = {"bob_errors_A3": bob_errors, "symbols": rt.n,
         "expected_errors_A3": rt.n * float(norm.sf(2 * 3.0)),
         "eve_symbol_error_M64_A5": mask.eve_symbol_error,
         "eve_kp_symbol_error_M64_A5": mask.eve_kp_symbol_error, "gamma": gamma}
    ok = (bob_errors == 0 and mask.eve_symbol_error > 0.5
          and all(abs(g["formula"] - g["monte_carlo"]) <= 1 for g in gamma.values()))
    return CriterionResult(7, "Y00 round trip and masking", ok, m)


# --------------------------------------------------------------------------
# 8. trusted-repeater transport
# --------------------------------------------------------------------------


def _snapshot(net: ns.Network) -> dict:
    return {k: (s.available, s.consumed, s.peek(s.available).tobytes())
            for k, s in net.stores.items()}


def _monobit_p(bits: np.ndarray) -> float:
    s = abs(int(2 * bits.astype(np.int64).sum() - len(bits)))
    return float(math.erfc(s / math.sqrt(2 * len(bits))))


def check_network(seed: int) -> CriterionResult:
    nodes = list("ABCDE")
    link = ns.LinkConfig(0.0, _single_photon(10_000))
    net = ns.chain(nodes, link)
    ns.provision_links(net, ns.ProvisionMode.FULL_SIM, 120_000, seed=_seed(seed, 8))
    rng = _rng(seed, 8, 1)
    m = {"deposited": min(s.available for s in net.stores.values())}

    payload = ns.SecretPayload.random(128, rng)
    before = {k: s.available for k, s in net.stores.items()}
    tx = ns.Transcript()
    rep = ns.transport(net, "A", "E", payload, transcript=tx)
    per_link = {f"{a}-{b}": before[(a, b)] - net.stores[(a, b)].available for a, b in before}
    need = payload.nbits + ns.MAC_BITS
    m["delivered_intact"] = rep.outcome is ns.Outcome.DELIVERED and rep.delivered == payload.data
    m["consumption_exact"] = all(v == need for v in per_link.values())
    m["consumption"] = per_link
    m["probe_recovers"] = {n: payload.data in ns.compromise_probe(n, tx) for n in nodes[1:-1]}

    def flip(h, msg):
        if h != 1:
            return msg
        ct = bytearray(msg.ciphertext)
        ct[int(rng.integers(len(ct)))] ^= 1 << int(rng.integers(8))
        return ns.TransportMessage(bytes(ct), msg.tag, msg.path, msg.payload_len)

    pre = {k: s.available for k, s in net.stores.items()}
    tam = ns.transport(net, "A", "E", ns.SecretPayload.random(128, rng), tamper=flip)
    m["tamper_outcome"] = tam.outcome.value
    m["tamper_delivered"] = tam.delivered is not None
    # pads already exposed on the wire stay burnt; hops never reached roll back
    burnt = {f"{a}-{b}": pre[(a, b)] - net.stores[(a, b)].available for a, b in pre}
    m["tamper_burnt"] = burnt
    reached = {f"{a}-{b}" for a, b in ns.path_links(nodes[:3])}
    m["tamper_unreached_unchanged"] = all(v == 0 for k, v in burnt.items() if k not in reached)

    # a transport that cannot be funded end to end must leave no trace
    starve = net.stores[("D", "E")]
    drain = starve.reserve(starve.available - need + 1)
    drain.take(drain.nbits, ns.Purpose.OTP)
    drain.commit()
    snap = _snapshot(net)
    fail = ns.hop_transport(ns.SecretPayload.random(128, rng), nodes, net)
    m["failed_outcome"] = fail.outcome.value
    m["failed_stores_unchanged"] = _snapshot(net) == snap

    fresh = ns.chain(nodes, link)
    ns.provision_links(fresh, ns.ProvisionMode.FULL_SIM, 120_000, seed=_seed(seed, 8, 2))
    wire = ns.Transcript()
    zero = ns.SecretPayload(bytes(128))
    for _ in range(20):
        ns.transport(fresh, "A", "E", zero, transcript=wire)
    bits = np.unpackbits(np.frombuffer(b"".join(ct for _, ct in wire.wire), np.uint8))
    m["ciphertext_bits"] = len(bits)
    m["monobit_p"] = _monobit_p(bits)
    ok = (m["delivered_intact"] and m["consumption_exact"] and all(m["probe_recovers"].values())
          and tam.outcome is ns.Outcome.AUTH_FAIL and tam.delivered is None
          and m["tamper_unreached_unchanged"]
          and fail.outcome is ns.Outcome.NO_KEY and m["failed_stores_unchanged"]
          and len(bits) == 20 * 4 * 1024 and m["monobit_p"] >= 0.01)
    return CriterionResult(8, "trusted-repeater transport", bool(ok), m)


# --------------------------------------------------------------------------
# 9. synchronisation control
# --------------------------------------------------------------------------


def check_sync(seed: int) -> CriterionResult:
    n, W, at, offset = 40_000, 2_000, 20_000, 7
    cfg = _single_photon(n, seed=_seed(seed, 9))
    ch = ChannelModel(misalignment=ChannelModel.misalignment_for_qber(0.02))
    alice, bob, _ = run_quantum_phase(cfg, ch, DetectorModel())
    rep = sc.monitor_session(alice, sc.inject_frame_offset(bob, offset, at), W)
    w_inj = at // W
    loss_q = rep.raw_qber[w_inj] if rep.first_rapid is not None else float("nan")

    rng = _rng(seed, 9, 1)
    junk = sc.inject_frame_offset(bob, 0)
    junk.outcome[at:] = rng.integers(0, 2, n - at)
    dead = sc.monitor_session(alice, junk, W)
    m = {"first_rapid_window": rep.first_rapid, "injection_window": w_inj,
         "recovered_offset": rep.state.offset, "final_phase": rep.state.phase.value,
         "post_recovery_qber": rep.post_recovery_qber, "qber_at_frame_loss": loss_q,
         "rapid_threshold": sc.RAPID_THRESHOLD,
         "unrecoverable_phase": dead.state.phase.value, "unrecoverable_emitted": dead.emitted_bits}
    ok = (rep.first_rapid is not None and 0 <= rep.first_rapid - w_inj < 3
          and rep.state.phase is sc.SyncPhase.ALIGNED and rep.state.offset == offset
          and rep.post_recovery_qber is not None and rep.post_recovery_qber <= 0.03
          and loss_q >= sc.RAPID_THRESHOLD
          and dead.state.phase is sc.SyncPhase.FATAL and dead.emitted_bits == 0)
    return CriterionResult(9, "sync state machine", bool(ok), m)


# --------------------------------------------------------------------------
# driver
# --------------------------------------------------------------------------

CHECKS: dict[int, Callable] = {
    1: check_intercept_resend,
    2: check_scaling,
    3: check_pns,
    4: check_sifting,
    5: check_postproc,
    6: check_usd,
    7: check_y00,
    8: check_network,
    9: check_sync,
}


def run_check(cid: int, seed: int = 0, jobs: int = 1) -> CriterionResult:
    fn = CHECKS[cid]
    t0 = time.perf_counter()
    res = fn(seed, jobs=jobs) if cid == 2 else fn(seed)
    res.runtime_s = time.perf_counter() - t0
    return res


def run_all(seed: int = 0, jobs: int = 1, only: Optional[list] = None,
            echo: Optional[Callable[[str], None]] = None) -> list:
    out = []
    for cid in sorted(only or CHECKS):
        res = run_check(cid, seed, jobs)
        if echo is not None:
            echo(res.line())
        out.append(res)
    return out


def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.integer, np.bool_)):
        return x.item()
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return None if math.isnan(x) else x
    return x


def write_results(results: list, out_dir, seed: int) -> tuple[Path, Path]:
    """results.json and results.csv; timings are left out so reruns match byte for byte."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"seed": seed, "criteria": [
        {"id": r.id, "name": r.name, "passed": bool(r.passed), "measured": _clean(r.measured)}
        for r in results]}
    jpath = out_dir / "results.json"
    jpath.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["id", "name", "passed", "measured"])
    for r in results:
        w.writerow([r.id, r.name, int(r.passed), json.dumps(_clean(r.measured), sort_keys=True)])
    cpath = out_dir / "results.csv"
    cpath.write_bytes(buf.getvalue().encode())
    return jpath, cpath
