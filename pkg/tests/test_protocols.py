import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qkdsim.acceptance import enumerate_sift_fraction
from qkdsim.photonics import ChannelModel, ConfigError, DetectorModel, SourceConfig
from qkdsim.protocols import (BoundUnavailable, DecoyBounds, LogMismatch, Protocol, RateMode,
                              SessionConfig, SessionStats, accumulate_stats, decoy_bound,
                              expected_gain_error, h2, key_rate, optimal_wcp_mu, run_quantum_phase,
                              sift)


def single(n, proto=Protocol.BB84, seed=0, **kw):
    return SessionConfig(proto, n, SourceConfig({"signal": 1.0}, single_photon=True), seed=seed, **kw)


def decoy_cfg(n, seed=0, mus=(0.5, 0.1)):
    src = SourceConfig({"signal": mus[0], "decoy": mus[1], "vacuum": 0.0}, decoy=True)
    return SessionConfig(Protocol.BB84_DECOY, n, src,
                         {"signal": 0.7, "decoy": 0.2, "vacuum": 0.1}, seed=seed)


def all_stats(cfg, ch, det, attack=None, sparse=False):
    a, b, _ = run_quantum_phase(cfg, ch, det, attack, sparse=sparse)
    pair = sift(cfg.protocol, a, b)
    return accumulate_stats(a, b, pair, pair[0].slots)


class TestQuantumPhase:
    def test_lossless_clicks_every_slot(self):
        a, b, _ = run_quantum_phase(single(1000), ChannelModel(), DetectorModel())
        assert b.clicked.all() and len(a) == 1000

    def test_poisson_thinning(self):
        cfg = SessionConfig(Protocol.BB84, 10**6, SourceConfig({"signal": 0.1}))
        _, b, _ = run_quantum_phase(cfg, ChannelModel(10.0), DetectorModel())
        assert b.clicked.mean() == pytest.approx(-math.expm1(-0.01), rel=0.1)

    def test_dps_same_phase_train(self):
        cfg = SessionConfig(Protocol.DPS, 1000, SourceConfig({"signal": 0.2}))
        a, b, _ = run_quantum_phase(cfg, ChannelModel(), DetectorModel(), rng=np.random.default_rng(0))
        # force an all-zero phase train by replaying the interferometer on equal amplitudes
        from qkdsim.photonics import CoherentTrain, detect_ports, interfere_train
        a0, a1 = interfere_train(CoherentTrain(np.full(1000, math.sqrt(5.0))))
        rec = detect_ports(a0, a1, DetectorModel(), np.random.default_rng(1))
        assert np.all(rec.outcome[rec.outcome <= 1] == 0)

    def test_qubit_model_mismatch(self):
        from qkdsim.attacks import AttackConfig, AttackKind
        with pytest.raises(ConfigError):
            run_quantum_phase(single(10), ChannelModel(), DetectorModel(),
                              AttackConfig(AttackKind.USD_SEQUENTIAL))
        dps = SessionConfig(Protocol.DPS, 10, SourceConfig({"signal": 0.2}))
        with pytest.raises(ConfigError):
            run_quantum_phase(dps, ChannelModel(), DetectorModel(),
                              AttackConfig(AttackKind.PNS))

    def test_same_seed_same_logs(self):
        cfg = decoy_cfg(20000, seed=4)
        r1 = run_quantum_phase(cfg, ChannelModel(5), DetectorModel(dark=1e-4))
        r2 = run_quantum_phase(cfg, ChannelModel(5), DetectorModel(dark=1e-4))
        assert np.array_equal(r1[1].outcome, r2[1].outcome)
        assert np.array_equal(r1[0].bit, r2[0].bit)

    def test_sparse_matches_dense_statistics(self):
        cfg = decoy_cfg(2 * 10**6, seed=2)
        ch, det = ChannelModel(6.0), DetectorModel(dark=1e-4)
        d = all_stats(cfg, ch, det)
        s = all_stats(cfg, ch, det, sparse=True)
        for c in ("signal", "decoy", "vacuum"):
            a, b = s.clicks[c], d.clicks[c]
            assert abs(a - b) <= 4 * math.sqrt(a + b)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            SessionConfig(Protocol.BB84, 0, SourceConfig({"signal": 0.5}))
        with pytest.raises(ConfigError):
            SessionConfig(Protocol.BB84, 10, SourceConfig({"signal": 0.5}), {"signal": 0.7})


class TestSifting:
    def test_bb84_fraction(self):
        a, b, _ = run_quantum_phase(single(10**5), ChannelModel(), DetectorModel())
        assert len(sift(Protocol.BB84, a, b)[0]) / 10**5 == pytest.approx(0.5, abs=0.01)

    def test_sarg_fraction(self):
        cfg = single(10**5, Protocol.SARG04)
        a, b, _ = run_quantum_phase(cfg, ChannelModel(), DetectorModel())
        assert len(sift(Protocol.SARG04, a, b)[0]) / 10**5 == pytest.approx(0.25, abs=0.01)

    def test_enumeration_oracles(self):
        assert enumerate_sift_fraction(Protocol.BB84) == pytest.approx(0.5, abs=1e-15)
        assert enumerate_sift_fraction(Protocol.SARG04) == pytest.approx(0.25, abs=1e-15)

    def test_forced_basis_equals_click_fraction(self):
        cfg = SessionConfig(Protocol.BB84, 20000, SourceConfig({"signal": 0.3}), basis_bias=1.0)
        a, b, _ = run_quantum_phase(cfg, ChannelModel(3), DetectorModel())
        assert len(sift(Protocol.BB84, a, b)[0]) == int(b.clicked.sum())

    @pytest.mark.parametrize("proto", [Protocol.BB84, Protocol.SARG04, Protocol.DPS])
    def test_ideal_qber_zero(self, proto):
        src = SourceConfig({"signal": 0.2}) if proto is Protocol.DPS else SourceConfig(
            {"signal": 1.0}, single_photon=True)
        cfg = SessionConfig(proto, 20000, src)
        a, b, _ = run_quantum_phase(cfg, ChannelModel(), DetectorModel())
        ka, kb = sift(proto, a, b)
        assert len(ka) > 0 and np.array_equal(ka.bits, kb.bits)

    def test_b92_keeps_monitored_slots(self):
        cfg = SessionConfig(Protocol.B92, 20000, SourceConfig({"signal": 0.3}))
        a, b, _ = run_quantum_phase(cfg, ChannelModel(), DetectorModel())
        ka, kb = sift(Protocol.B92, a, b)
        assert len(ka) > 0 and np.all(b.monitor_ok[np.isin(b.slot, ka.slots)])
        assert np.mean(ka.bits != kb.bits) < 0.01

    def test_misaligned_logs(self):
        a, b, _ = run_quantum_phase(single(100), ChannelModel(), DetectorModel())
        with pytest.raises(LogMismatch):
            sift(Protocol.BB84, a.subset(np.arange(100) < 50), b)

    @given(st.integers(0, 2**31), st.floats(0, 0.3))
    def test_pair_alignment(self, seed, e):
        cfg = single(500, seed=seed)
        ch = ChannelModel(misalignment=ChannelModel.misalignment_for_qber(e))
        a, b, _ = run_quantum_phase(cfg, ch, DetectorModel(dark=0.01))
        ka, kb = sift(Protocol.BB84, a, b)
        assert len(ka) == len(kb) and np.array_equal(ka.slots, kb.slots)
        assert np.all(np.diff(ka.slots) > 0)


class TestStats:
    def test_zero_errors(self):
        s = all_stats(single(5000), ChannelModel(), DetectorModel())
        assert s.error_rate["signal"] == 0

    def test_two_percent(self):
        ch = ChannelModel(misalignment=ChannelModel.misalignment_for_qber(0.02))
        s = all_stats(single(10**5), ch, DetectorModel())
        assert s.error_rate["signal"] == pytest.approx(0.02, abs=0.005)

    def test_vacuum_gain_is_dark(self):
        s = all_stats(decoy_cfg(10**6), ChannelModel(), DetectorModel(dark=1e-3))
        expect = s.sent["vacuum"] * (1 - (1 - 1e-3) ** 2)
        assert abs(s.clicks["vacuum"] - expect) <= 4 * math.sqrt(expect)

    def test_empty_disclosure_rejected(self):
        a, b, _ = run_quantum_phase(single(100), ChannelModel(), DetectorModel())
        with pytest.raises(ValueError):
            accumulate_stats(a, b, sift(Protocol.BB84, a, b), [])

    def test_merge_adds_counts(self):
        s1 = all_stats(single(1000, seed=1), ChannelModel(), DetectorModel())
        s2 = all_stats(single(3000, seed=2), ChannelModel(), DetectorModel())
        m = s1.merge(s2)
        assert m.n_pulses == 4000 and m.sent["signal"] == 4000


class TestBounds:
    def test_decoy_bound_below_truth(self):
        eta, d = 10 ** -0.8, 1e-5
        s = all_stats(decoy_cfg(10**6, seed=3), ChannelModel(8.0), DetectorModel(dark=d))
        b = decoy_bound(s, 0.5, 0.1)
        y1_true = eta + 2 * d
        assert 0 < b.Y1_lower <= y1_true * 1.05
        assert b.Y1_lower > 0.6 * y1_true

    def test_decoy_bound_drops_under_pns(self):
        from qkdsim.attacks import AttackConfig, AttackKind
        ch, det = ChannelModel(20.0), DetectorModel(dark=1e-7)
        cfg = decoy_cfg(10**8, seed=5, mus=(0.1, 0.02))
        honest = decoy_bound(all_stats(cfg, ch, det, sparse=True), 0.1, 0.02)
        pns = decoy_bound(all_stats(cfg, ch, det, AttackConfig(AttackKind.PNS), sparse=True), 0.1, 0.02)
        assert pns.Y1_lower < honest.Y1_lower

    def test_degenerate_intensities(self):
        s = all_stats(decoy_cfg(10**4, mus=(0.3, 0.3)), ChannelModel(), DetectorModel())
        with pytest.raises(BoundUnavailable):
            decoy_bound(s, 0.3, 0.3)

    def test_missing_classes(self):
        s = all_stats(single(1000), ChannelModel(), DetectorModel())
        with pytest.raises(BoundUnavailable):
            decoy_bound(s, 0.5, 0.1)


def _stats(q, e, mu=0.5, sifted_frac=0.5, n=10**6):
    sent = n
    clicks = int(round(q * n))
    sifted = int(round(sifted_frac * clicks))
    return SessionStats(Protocol.BB84, n, {"signal": mu}, {"signal": sent}, {"signal": clicks},
                        {"signal": sifted}, {"signal": sifted}, {"signal": int(round(e * sifted))})


class TestKeyRate:
    def test_ideal_single_photon(self):
        s = all_stats(single(10**4), ChannelModel(), DetectorModel())
        assert key_rate(s, None, "SINGLE_PHOTON") == pytest.approx(0.5, abs=0.01)

    def test_wcp_clamp(self):
        s = _stats(q=1e-3, e=0.01, mu=0.1)
        assert key_rate(s, None, RateMode.WCP_WORSTCASE) == 0.0

    def test_decoy_needs_bounds(self):
        with pytest.raises(BoundUnavailable):
            key_rate(_stats(0.01, 0.01), None, "DECOY")

    @given(st.floats(0, 0.5), st.floats(0, 0.5))
    def test_monotone_in_e1(self, e1a, e1b):
        s = _stats(0.05, 0.02)
        lo, hi = sorted((e1a, e1b))
        r_lo = key_rate(s, DecoyBounds(0.05, lo), "DECOY")
        r_hi = key_rate(s, DecoyBounds(0.05, hi), "DECOY")
        assert r_hi <= r_lo + 1e-15

    @given(st.floats(1.0, 2.0), st.floats(1.0, 2.0))
    def test_monotone_in_leak(self, fa, fb):
        s = _stats(0.05, 0.03)
        lo, hi = sorted((fa, fb))
        assert key_rate(s, None, "SINGLE_PHOTON", hi) <= key_rate(s, None, "SINGLE_PHOTON", lo) + 1e-15

    def test_decoy_beats_worst_case(self):
        s = all_stats(decoy_cfg(10**7, seed=8), ChannelModel(10.0), DetectorModel(dark=1e-6),
                      sparse=True)
        b = decoy_bound(s, 0.5, 0.1)
        assert key_rate(s, b, "DECOY") >= key_rate(s, None, "WCP_WORSTCASE")

    def test_sarg_below_bb84(self):
        ch = ChannelModel(3.0, ChannelModel.misalignment_for_qber(0.02))
        bb = all_stats(single(10**5, seed=1), ch, DetectorModel())
        sg = all_stats(single(10**5, Protocol.SARG04, seed=1), ch, DetectorModel())
        assert key_rate(sg, None, "SINGLE_PHOTON") <= key_rate(bb, None, "SINGLE_PHOTON")

    def test_finite_size_term(self):
        from qkdsim.postproc import SecurityParams
        s = _stats(0.05, 0.02)
        full = key_rate(s, None, "SINGLE_PHOTON")
        assert key_rate(s, None, "SINGLE_PHOTON", params=SecurityParams(10, 10)) == pytest.approx(
            full - 30 / s.n_pulses)

    def test_analytic_gain_matches_simulation(self):
        det = DetectorModel(dark=1e-4)
        cfg = SessionConfig(Protocol.BB84, 10**6, SourceConfig({"signal": 0.4}))
        ch = ChannelModel(4.0, ChannelModel.misalignment_for_qber(0.03))
        s = all_stats(cfg, ch, det)
        q, e = expected_gain_error(0.4, ch.eta, det, 0.03)
        assert s.gain["signal"] == pytest.approx(q, rel=0.02)
        assert s.error_rate["signal"] == pytest.approx(e, abs=0.003)

    def test_optimal_mu_is_interior(self):
        det = DetectorModel(dark=1e-8)
        mu = optimal_wcp_mu(0.01, det, 0.01)
        assert 0 < mu < 0.1


@given(st.floats(0, 1))
def test_h2_symmetric(p):
    assert h2(p) == pytest.approx(h2(1 - p), abs=1e-12)
    assert 0 <= h2(p) <= 1
