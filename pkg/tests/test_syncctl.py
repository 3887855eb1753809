import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qkdsim import syncctl as sc
from qkdsim.photonics import ChannelModel, ConfigError, DetectorModel, SourceConfig
from qkdsim.protocols import Protocol, SessionConfig, run_quantum_phase
from qkdsim.syncctl import FaultClass, ResyncResult, SyncPhase, SyncState


def window(series, baseline=0.02):
    w = sc.QberWindow(1000, baseline=baseline)
    for q in series:
        w.push(q)
    return w


def logs(n=20000, seed=0, qber=0.02):
    cfg = SessionConfig(Protocol.BB84, n, SourceConfig({"signal": 1.0}, single_photon=True), seed=seed)
    ch = ChannelModel(misalignment=ChannelModel.misalignment_for_qber(qber))
    a, b, _ = run_quantum_phase(cfg, ch, DetectorModel())
    return a, b


class TestClassify:
    @pytest.mark.parametrize("series,expect", [
        ([0.02, 0.02, 0.021], FaultClass.OK),
        ([0.02, 0.5], FaultClass.RAPID_LOSS),
        ([0.02, 0.45], FaultClass.RAPID_LOSS),
        ([0.02, 0.449], FaultClass.SLOW_DEGRADE),  # below the rapid threshold
        ([0.02, 0.02, 0.02, 0.02, 0.449], FaultClass.SLOW_DEGRADE),
        ([0.02, 0.06, 0.07, 0.08], FaultClass.SLOW_DEGRADE),
        ([0.02, 0.03, 0.04, 0.05], FaultClass.OK),
    ])
    def test_vectors(self, series, expect):
        assert sc.classify(window(series)) is expect

    def test_first_window_baseline(self):
        assert sc.classify(window([0.1, 0.16, 0.17, 0.18], None)) is FaultClass.SLOW_DEGRADE

    def test_needs_history(self):
        with pytest.raises(sc.InsufficientHistory):
            sc.classify(window([0.02]))

    def test_window_minimum(self):
        with pytest.raises(ConfigError):
            sc.QberWindow(50)

    @given(st.lists(st.floats(0, 0.5), min_size=2, max_size=8), st.floats(0, 0.3))
    def test_monotone_in_last_value(self, series, bump):
        order = {FaultClass.OK: 0, FaultClass.SLOW_DEGRADE: 1, FaultClass.RAPID_LOSS: 2}
        a = sc.classify(window(series))
        b = sc.classify(window(series[:-1] + [min(0.5, series[-1] + bump)]))
        assert order[b] >= order[a]


class TestResync:
    @pytest.mark.parametrize("offset", [7, -3, 0])
    def test_recovers_offset(self, offset):
        a, b = logs()
        r = sc.frame_resync(a, sc.inject_frame_offset(b, offset), 16)
        assert r.ok and r.offset == offset and r.qber < 0.04

    def test_out_of_range_fails(self):
        a, b = logs()
        r = sc.frame_resync(a, sc.inject_frame_offset(b, 30), 16)
        assert not r.ok and r.qber > 0.3

    def test_scrambled_fails(self, rng):
        a, b = logs()
        b.outcome[:] = rng.integers(0, 2, len(b))
        assert not sc.frame_resync(a, b, 16).ok

    def test_inject_partial(self):
        a, b = logs(5000)
        shifted = sc.inject_frame_offset(b, 2, 1000)
        assert np.array_equal(shifted.outcome[:1000], b.outcome[:1000])
        assert np.array_equal(shifted.outcome[1002:], b.outcome[1000:-2])

    def test_bb84_only(self):
        cfg = SessionConfig(Protocol.B92, 1000, SourceConfig({"signal": 0.3}))
        a, b, _ = run_quantum_phase(cfg, ChannelModel(), DetectorModel())
        with pytest.raises(ConfigError):
            sc.frame_resync(a, b, 4)


class TestDrift:
    def test_examples(self):
        ch = ChannelModel(3.0, 0.1, sc.DriftModel(0.2, 0.9, onset=1000))
        eta, ang = sc.drift_arrays(ch, [0, 1000, 3000, 6000])
        assert ang == pytest.approx([0.1, 0.1, 0.5, 1.1])
        assert eta == pytest.approx(ch.eta * np.array([1, 1, 0.81, 0.9**5]))

    def test_angle_folds(self):
        ch = ChannelModel(0, 0.0, sc.DriftModel(1.0))
        _, ang = sc.drift_arrays(ch, [4000])
        assert float(ang[0]) == pytest.approx(2 * math.pi - 4.0)

    def test_apply_drift(self):
        ch = ChannelModel(0, 0.0, sc.DriftModel(0.5))
        assert sc.apply_drift(ch, 2000).misalignment == pytest.approx(1.0)
        assert sc.apply_drift(ChannelModel(), 10) == ChannelModel()

    def test_qber_rises_along_session(self):
        cfg = SessionConfig(Protocol.BB84, 40000, SourceConfig({"signal": 1.0}, single_photon=True))
        ch = ChannelModel(0, 0.0, sc.DriftModel(0.05))
        a, b, _ = run_quantum_phase(cfg, ch, DetectorModel())
        q0, _ = sc.shifted_qber(a, b, 0, 0, 5000)
        q1, _ = sc.shifted_qber(a, b, 0, 35000, 40000)
        assert q1 > q0 + 0.1

    def test_bad_drift(self):
        with pytest.raises(ConfigError):
            sc.DriftModel(transmittance_drift=1.5)


class TestStateMachine:
    def test_slow_degrade_round_trip(self):
        called = []
        s = sc.sync_step(SyncState(), FaultClass.SLOW_DEGRADE, recalibrate=lambda: called.append(1))
        assert s.phase is SyncPhase.ALIGNED and called == [1]
        assert s.log == (("ALIGNED", "BIT_DRIFT"), ("BIT_DRIFT", "ALIGNED"))

    def test_rapid_recovers(self):
        s = sc.sync_step(SyncState(), FaultClass.RAPID_LOSS, ResyncResult(7, 0.02))
        assert s.phase is SyncPhase.ALIGNED and s.offset == 7
        assert s.log == (("ALIGNED", "FRAME_LOST"), ("FRAME_LOST", "ALIGNED"))

    def test_rapid_fails(self):
        s = sc.sync_step(SyncState(), FaultClass.RAPID_LOSS, ResyncResult(None, 0.5))
        assert s.phase is SyncPhase.FATAL

    def test_resync_required(self):
        with pytest.raises(sc.ContractViolation):
            sc.sync_step(SyncState(), FaultClass.RAPID_LOSS)

    @given(st.lists(st.sampled_from(list(FaultClass)), max_size=10))
    def test_fatal_absorbing(self, seq):
        s = SyncState(SyncPhase.FATAL)
        for c in seq:
            s = sc.sync_step(s, c, ResyncResult(1, 0.0))
        assert s == SyncState(SyncPhase.FATAL)

    def test_ok_is_no_op(self):
        assert sc.sync_step(SyncState(), FaultClass.OK) == SyncState()


class TestMonitor:
    def test_recovers_injected_offset(self):
        a, b = logs(40000, 3)
        b = sc.inject_frame_offset(b, 7, 20000)
        rep = sc.monitor_session(a, b, 2000)
        assert rep.first_rapid == 10 and rep.state.offset == 7
        assert rep.state.phase is SyncPhase.ALIGNED and rep.post_recovery_qber < 0.04

    def test_fatal_emits_nothing(self, rng):
        a, b = logs(40000, 3)
        b.outcome[20000:] = rng.integers(0, 2, 20000)
        rep = sc.monitor_session(a, b, 2000)
        assert rep.state.phase is SyncPhase.FATAL and rep.emitted_bits == 0

    def test_clean_session_emits_sifted_bits(self):
        a, b = logs(20000, 4)
        rep = sc.monitor_session(a, b, 2000)
        assert rep.state == SyncState() and rep.emitted_bits == pytest.approx(10000, rel=0.05)


@settings(max_examples=15)
@given(st.integers(-16, 16), st.sampled_from([0.01, 0.02, 0.05, 0.1]), st.integers(0, 1000))
def test_any_offset_in_range_recovers(offset, qber, seed):
    a, b = logs(40000, seed, qber)
    rep = sc.monitor_session(a, sc.inject_frame_offset(b, offset, 20000), 2000, baseline=qber)
    assert rep.state.phase is SyncPhase.ALIGNED and rep.state.offset == offset
    if offset:
        assert rep.post_recovery_qber <= 1.5 * qber
