import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from qkdsim import qnrc
from qkdsim.photonics import ConfigError
from qkdsim.qnrc import (RunningKeyGen, Y00Config, expand_running_key, is_primitive,
                         masking_count, masking_count_mc, run_qnrc, y00_phase)


class TestPhase:
    @pytest.mark.parametrize("X,Z,M,theta", [
        (0, 0, 4, 0.0),
        (1, 0, 4, math.pi),
        (0, 1, 4, 1.25 * math.pi),   # Pol(1) = 1 flips the half-plane
        (1, 1, 4, 0.25 * math.pi),
        (0, 2, 4, 0.5 * math.pi),
        (1, 63, 64, (63 / 64) * math.pi),
    ])
    def test_examples(self, X, Z, M, theta):
        assert float(y00_phase(X, Z, M)) == pytest.approx(theta)

    def test_out_of_range_key(self):
        with pytest.raises(ValueError):
            y00_phase(0, 8, 8)

    def test_2M_distinct_phases(self):
        M = 16
        X, Z = np.meshgrid(np.arange(2), np.arange(M))
        ph = np.mod(np.rint(y00_phase(X.ravel(), Z.ravel(), M) / (math.pi / M)), 2 * M)
        assert len(set(ph.astype(int))) == 2 * M

    def test_config_validation(self):
        for bad in ({"M": 3, "alpha": 1}, {"M": 4, "alpha": -1}, {"M": 4, "alpha": 1, "channel_eta": 2}):
            with pytest.raises(ConfigError):
                Y00Config(**bad)


class TestRunningKey:
    def test_default_polynomial_primitive(self):
        assert is_primitive(qnrc.DEFAULT_TAPS)

    @pytest.mark.parametrize("taps,expect", [((4, 1, 0), True), ((4, 3, 2, 1, 0), False),
                                             ((4, 2, 0), False), ((5, 2, 0), True)])
    def test_small_polynomials(self, taps, expect):
        assert is_primitive(taps) is expect

    def test_small_period(self):
        g = RunningKeyGen.from_state(1, (4, 1, 0))
        s = g.bits(45)
        assert np.array_equal(s[:15], s[15:30]) and g.period == 15
        assert not all(np.array_equal(s[:15], np.roll(s[:15], k)) for k in range(1, 15))

    def test_recurrence(self):
        g = RunningKeyGen(12345)
        s = g.bits(5000).astype(int)
        i = np.arange(len(s) - 61)
        assert np.all(s[i + 61] == s[i + 5] ^ s[i + 2] ^ s[i + 1] ^ s[i])

    def test_chunked_reads_match(self):
        a, b = RunningKeyGen(99), RunningKeyGen(99)
        one = a.bits(3000)
        parts = np.concatenate([b.bits(7), b.bits(1000), b.bits(1993)])
        assert np.array_equal(one, parts)

    def test_zero_state_rejected(self):
        with pytest.raises(ConfigError):
            RunningKeyGen.from_state(0)
        with pytest.raises(ConfigError):
            RunningKeyGen.from_state(1 << 61)

    def test_literal_state_is_stream_prefix(self):
        assert RunningKeyGen.from_state(0b1011, (4, 1, 0)).bits(4).tolist() == [1, 1, 0, 1]

    def test_short_keys_start_balanced(self):
        for key in (1, 2, 7):
            assert abs(RunningKeyGen(key).bits(20000).mean() - 0.5) < 0.02

    def test_non_primitive_warns(self):
        with pytest.warns(UserWarning):
            RunningKeyGen.from_state(1, (4, 2, 0))

    def test_expansion_uniform(self):
        z = expand_running_key(RunningKeyGen(7), 10**5, 64)
        assert chisquare(np.bincount(z, minlength=64)).pvalue > 1e-3

    def test_non_power_of_two(self):
        z = expand_running_key(RunningKeyGen(7), 9000, 6)
        assert z.max() < 6 and chisquare(np.bincount(z, minlength=6)).pvalue > 1e-3

    def test_M2_uses_raw_bits(self):
        g1, g2 = RunningKeyGen(31), RunningKeyGen(31)
        assert np.array_equal(expand_running_key(g1, 500, 2), g2.bits(500))


class TestMeasurement:
    def test_homodyne_variance(self, rng):
        v = qnrc.homodyne_array(np.full(10**5, 2.0 + 0j), 0.0, rng)
        assert v.mean() == pytest.approx(2.0, abs=0.01)
        assert v.var() == pytest.approx(0.25, rel=0.02)

    def test_heterodyne_variance(self, rng):
        x, p = qnrc.heterodyne_array(np.full(10**5, 1j), rng)
        assert x.var() == pytest.approx(0.5, rel=0.02) and p.mean() == pytest.approx(1.0, abs=0.01)

    def test_bob_is_error_free_at_large_amplitude(self, rng):
        r = run_qnrc(Y00Config(64, 6.0), 20000, 5, rng)
        assert r.bob_ber == 0.0

    def test_wrong_key_decrypts_to_noise(self, rng):
        cfg = Y00Config(64, 6.0)
        n = 40000
        X = rng.integers(0, 2, n)
        Z = expand_running_key(RunningKeyGen(5), n, 64)
        Zw = expand_running_key(RunningKeyGen(6), n, 64)
        v = qnrc.homodyne_array(qnrc.y00_encrypt_array(X, Z, cfg), qnrc.bob_beta(Zw, 64), rng)
        assert np.mean(qnrc.y00_decrypt_array(v, Zw) != X) == pytest.approx(0.5, abs=0.02)

    def test_vanishing_amplitude(self, rng):
        r = run_qnrc(Y00Config(8, 1e-6), 20000, 3, rng)
        assert r.bob_ber == pytest.approx(0.5, abs=0.02)

    def test_known_plaintext_beats_blind(self, rng):
        r = run_qnrc(Y00Config(64, 5.0), 20000, 3, rng)
        assert r.eve_kp_symbol_error <= r.eve_symbol_error

    def test_scalar_wrappers(self, rng):
        cfg = Y00Config(4, 10.0)
        sym = qnrc.y00_encrypt(1, 3, cfg)
        out = qnrc.homodyne_measure(sym, float(qnrc.bob_beta(3, 4)), rng)
        assert qnrc.y00_decrypt(out, 3, cfg) == 1


class TestMasking:
    def test_example(self):
        # sigma = sqrt(1/2)/5, pi/64 spacing: floor(2.88) = 2
        assert masking_count(Y00Config(64, 5.0)) == 5

    @pytest.mark.parametrize("M,a", [(64, 5.0), (128, 5.0), (256, 10.0)])
    def test_formula_vs_monte_carlo(self, M, a):
        cfg = Y00Config(M, a)
        assert abs(masking_count(cfg) - masking_count_mc(cfg, 10**6, np.random.default_rng(M))) <= 1

    @given(st.sampled_from([8, 16, 32, 64, 128]), st.floats(0.5, 50), st.floats(0.5, 50))
    def test_monotone_in_amplitude(self, M, a, b):
        lo, hi = sorted((a, b))
        assert masking_count(Y00Config(M, hi)) <= masking_count(Y00Config(M, lo))

    @given(st.floats(0.5, 50))
    def test_monotone_in_M(self, a):
        assert masking_count(Y00Config(32, a)) <= masking_count(Y00Config(64, a))

    def test_odd_and_capped(self):
        assert masking_count(Y00Config(8, 1e-3)) == 16
        assert masking_count(Y00Config(8, 0.0)) == 16
        assert masking_count(Y00Config(64, 3.0)) % 2 == 1
