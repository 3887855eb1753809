import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import binom

from qkdsim.postproc import (AuthenticatedChannel, AuthKeyPool, PoolExhausted, SecurityParams,
                             Toeplitz, cascade_reconcile, estimate_qber, final_length, gf64_mul,
                             privacy_amplify, read_key, split_test_bits, wc_tag, wc_verify,
                             write_key)
from qkdsim.postproc.auth import forgery_bound, tag_with_bits, verify_with_bits
from qkdsim.postproc.cascade import ReconciledKey, initial_block_size
from qkdsim.postproc.estimation import clopper_pearson_upper
from qkdsim.postproc.keyfile import decode_key, encode_key
from qkdsim.protocols import Owner, SiftedKey, h2


def pair(n, q, rng):
    a = rng.integers(0, 2, n, dtype=np.uint8)
    return a, a ^ (rng.random(n) < q).astype(np.uint8)


def sifted(a, b):
    s = np.arange(len(a))
    return SiftedKey(a, s, Owner.ALICE), SiftedKey(b, s, Owner.BOB)


class TestEstimation:
    def test_cp_zero_errors_closed_form(self):
        # with k = 0 the bound solves (1 - p)^n = 1 - c
        n, c = 10**4, 1 - 2.0**-10
        assert clopper_pearson_upper(0, n, c) == pytest.approx(1 - (1 - c) ** (1 / n), rel=1e-9)
        assert clopper_pearson_upper(0, n, c) < 1e-3

    def test_cp_covers_binomial_tail(self):
        n, k, c = 500, 12, 0.99
        u = clopper_pearson_upper(k, n, c)
        assert binom.cdf(k, n, u) == pytest.approx(1 - c, rel=1e-6)

    def test_cp_edges(self):
        assert clopper_pearson_upper(5, 5, 0.9) == 1.0
        assert clopper_pearson_upper(0, 0, 0.9) == 1.0

    def test_split_is_seeded_and_disjoint(self, rng):
        a, b = pair(1000, 0.05, rng)
        p = sifted(a, b)
        t1, c1 = split_test_bits(p, 0.5, np.random.default_rng(3))
        t2, _ = split_test_bits(p, 0.5, np.random.default_rng(3))
        assert np.array_equal(t1[0].slots, t2[0].slots)
        assert len(t1[0]) == 500 and len(c1[0]) == 500
        assert not set(t1[0].slots) & set(c1[0].slots)

    def test_split_rejects_bad_fraction(self, rng):
        a, b = pair(10, 0, rng)
        with pytest.raises(ValueError):
            split_test_bits(sifted(a, b), 1.0, rng)

    def test_abort_flag(self, rng):
        a, b = pair(4000, 0.2, rng)
        est = estimate_qber(sifted(a, b), SecurityParams())
        assert est.abort and est.point == pytest.approx(0.2, abs=0.02)

    @given(st.integers(0, 2**32), st.floats(0.0, 0.2))
    def test_hoeffding_coverage(self, seed, q):
        # the upper bound sits at or above the sample mean plus nothing less than zero
        rng = np.random.default_rng(seed)
        a, b = pair(2000, q, rng)
        est = estimate_qber(sifted(a, b), SecurityParams(5, 5))
        assert est.ci_upper >= est.point
        hoeff = est.point + math.sqrt(math.log(2**5) / (2 * est.n_test))
        assert est.ci_upper <= hoeff + 1e-12

    def test_params_positive(self):
        with pytest.raises(ValueError):
            SecurityParams(0, 10)


class TestCascade:
    def test_block_size(self):
        assert initial_block_size(0.02, 10**4) == 37
        assert initial_block_size(0.0, 100) == 100

    def test_identical_inputs_leak(self, rng):
        n, q = 10**4, 0.02
        a = rng.integers(0, 2, n, dtype=np.uint8)
        ra, rb = cascade_reconcile(a, a.copy(), q, rng=rng)
        k1 = initial_block_size(q, n)
        blocks = [-(-n // (k1 * 2**p)) for p in range(4)]
        expected = blocks[0] + sum(b - 1 for b in blocks[1:]) + 10
        assert ra.leak_bits == expected and rb.corrections == 0

    @pytest.mark.parametrize("q", [0.01, 0.03, 0.05])
    def test_reconciles(self, q):
        rng = np.random.default_rng(int(q * 100))
        a, b = pair(20000, q, rng)
        ra, rb = cascade_reconcile(a, b, q, rng=rng)
        assert np.array_equal(ra.bits, rb.bits)
        assert ra.leak_bits <= 1.3 * len(a) * h2(q) + 2 * 10 + 10 + 200

    def test_inputs_untouched(self, rng):
        a, b = pair(2000, 0.03, rng)
        b0 = b.copy()
        cascade_reconcile(a, b, 0.03, rng=rng)
        assert np.array_equal(b, b0)

    def test_channel_counts_everything(self, rng):
        a, b = pair(5000, 0.03, rng)
        ch = AuthenticatedChannel()
        ch.disclose(7)
        ra, _ = cascade_reconcile(a, b, 0.03, ch, rng)
        assert ch.leak_bits == ra.leak_bits + 7

    def test_high_qber_gives_no_key(self, rng):
        a, b = pair(4000, 0.25, rng)
        try:
            ra, _ = cascade_reconcile(a, b, 0.25, rng=rng)
        except Exception:
            return
        assert final_length(len(a), 1.0, 0.25, ra.leak_bits, SecurityParams()) == 0


class TestPrivacy:
    @given(st.integers(1, 80), st.integers(0, 60), st.integers(0, 2**32))
    def test_fft_matches_matrix(self, n, l, seed):
        rng = np.random.default_rng(seed)
        t = Toeplitz.random(n, l, rng)
        x = rng.integers(0, 2, n, dtype=np.uint8)
        ref = (t.matrix().astype(np.int64) @ x) % 2 if l else np.zeros(0)
        assert np.array_equal(t(x), ref)

    @given(st.integers(0, 2**32))
    def test_linear(self, seed):
        rng = np.random.default_rng(seed)
        t = Toeplitz.random(64, 20, rng)
        x, y = rng.integers(0, 2, (2, 64), dtype=np.uint8)
        assert np.array_equal(t(x ^ y), t(x) ^ t(y))

    def test_toeplitz_structure(self, rng):
        m = Toeplitz.random(7, 4, rng).matrix()
        assert np.all(m[1:, 1:] == m[:-1, :-1])

    def test_length_formula(self):
        p = SecurityParams(10, 10)
        n, a, e, leak = 10000, 0.9, 0.03, 2500
        want = math.floor(n * a * (1 - h2(e)) - leak - 30)
        assert final_length(n, a, e, leak, p) == want
        assert final_length(100, 1.0, 0.5, 0, p) == 0

    @given(st.integers(100, 10**5), st.floats(0, 0.5), st.floats(0, 0.5), st.integers(0, 5000))
    def test_length_monotone(self, n, e_a, e_b, leak):
        p = SecurityParams()
        lo, hi = sorted((e_a, e_b))
        assert final_length(n, 1.0, hi, leak, p) <= final_length(n, 1.0, lo, leak, p)
        assert final_length(n, 1.0, lo, leak + 1, p) <= final_length(n, 1.0, lo, leak, p)
        assert final_length(n + 1, 1.0, lo, leak, p) >= final_length(n, 1.0, lo, leak, p)

    def test_zero_cost_keeps_near_all_bits(self):
        assert final_length(1000, 1.0, 0.0, 0, SecurityParams(1, 1)) == 997

    def test_shared_seed_gives_equal_keys(self, rng):
        a = rng.integers(0, 2, 3000, dtype=np.uint8)
        k = ReconciledKey(a, 200, True)
        k1 = privacy_amplify(k, 0.02, 1.0, SecurityParams(), np.random.default_rng(5))
        k2 = privacy_amplify(k, 0.02, 1.0, SecurityParams(), np.random.default_rng(5))
        assert np.array_equal(k1.bits, k2.bits)
        assert len(k1) == k1.epsilon_meta["length"] == final_length(3000, 1.0, 0.02, 200, SecurityParams())

    def test_unverified_rejected(self, rng):
        with pytest.raises(ValueError):
            privacy_amplify(ReconciledKey(np.zeros(10, np.uint8), 0, False), 0, 1, SecurityParams(), rng)


def clmul_ref(a: int, b: int) -> int:
    r = 0
    for i in range(64):
        if (b >> i) & 1:
            r ^= a << i
    poly = (1 << 64) | 0b11011
    for i in range(127, 63, -1):
        if (r >> i) & 1:
            r ^= poly << (i - 64)
    return r


class TestAuth:
    @given(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
    def test_gf_mul_reference(self, a, b):
        assert int(gf64_mul(np.uint64(a), np.uint64(b))) == clmul_ref(a, b)

    @given(st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1))
    def test_gf_mul_distributes(self, a, b, c):
        u = np.uint64
        assert gf64_mul(u(a), u(b) ^ u(c)) == gf64_mul(u(a), u(b)) ^ gf64_mul(u(a), u(c))

    def test_round_trip_and_cost(self, rng):
        alice = AuthKeyPool.random(1024, rng)
        bob = alice.copy()
        msg = b"parity transcript"
        tag = wc_tag(msg, alice)
        assert wc_verify(msg, tag, bob)
        assert alice.consumed == bob.consumed == 128

    @given(st.binary(min_size=1, max_size=64), st.integers(0, 511))
    def test_any_bit_flip_rejected(self, msg, pos):
        key = np.random.default_rng(len(msg) + pos).integers(0, 2, 128, dtype=np.uint8)
        tag = tag_with_bits(msg, key)
        bad = bytearray(msg)
        bad[(pos // 8) % len(bad)] ^= 1 << (pos % 8)
        assert not verify_with_bits(bytes(bad), tag, key)

    def test_length_extension_rejected(self, rng):
        key = rng.integers(0, 2, 128, dtype=np.uint8)
        assert tag_with_bits(b"ab", key) != tag_with_bits(b"ab\0", key)

    def test_key_bits_zeroed(self, rng):
        pool = AuthKeyPool.random(256, rng)
        wc_tag(b"x", pool)
        assert not pool._bits[:128].any()

    def test_pool_exhausted(self, rng):
        pool = AuthKeyPool.random(200, rng)
        wc_tag(b"x", pool)
        with pytest.raises(PoolExhausted):
            wc_tag(b"y", pool)

    def test_forgery_bound(self):
        assert forgery_bound(16) == 3 / 2.0**64


class TestKeyFile:
    @given(st.lists(st.integers(0, 1), max_size=300))
    def test_round_trip(self, bits):
        meta = {"length": len(bits)}
        blob = encode_key(np.array(bits, np.uint8), meta)
        assert decode_key(blob, meta).tolist() == bits

    def test_file(self, tmp_path, rng):
        from qkdsim.postproc import SecretKey
        k = SecretKey(rng.integers(0, 2, 77, dtype=np.uint8), {"s": 10})
        write_key(tmp_path / "k.qkey", k)
        assert np.array_equal(read_key(tmp_path / "k.qkey", {"s": 10}), k.bits)
        with pytest.raises(ValueError):
            read_key(tmp_path / "k.qkey", {"s": 11})

    def test_corrupt(self):
        with pytest.raises(ValueError):
            decode_key(b"NOPE")
        blob = encode_key(np.ones(9, np.uint8), {})
        with pytest.raises(ValueError):
            decode_key(blob[:-1])


def test_test_and_code_qber_within_hoeffding():
    # sampling without replacement: |q_test - q_code| stays inside the two-sided
    # Hoeffding radius at confidence 1 - 2^-10 in every trial
    rng = np.random.default_rng(42)
    eps = 2.0**-10
    for _ in range(100):
        a, b = pair(10_000, 0.03, rng)
        (ta, tb), (ca, cb) = split_test_bits(sifted(a, b), 0.1, rng)
        qt, qc = np.mean(ta.bits != tb.bits), np.mean(ca.bits != cb.bits)
        radius = math.sqrt(math.log(2 / eps) / (2 * len(ta)))
        assert abs(qt - qc) <= radius
