"""Cascade error reconciliation.

Alice's bits are fixed, Bob's are corrected in place.  Every parity Alice
reveals goes through :class:`AuthenticatedChannel`, which is the single
source of truth for leakage.  Parities of sub-blocks Alice already
revealed are remembered and never charged twice.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np


class ReconcileFail(RuntimeError):
    """Keys still differ after the maximum number of passes."""


class AuthenticatedChannel:
    """Public, authenticated classical channel between Alice and Bob.

    Counts every disclosed bit and message; authentication of the
    transcript is paid by the caller.
    """

    def __init__(self):
        self.leak_bits = 0
        self.messages = 0

    def disclose(self, nbits: int = 1) -> None:
        self.leak_bits += nbits
        self.messages += 1


@dataclass
class ReconciledKey:
    bits: np.ndarray
    leak_bits: int
    verified: bool
    corrections: int = 0
    passes: int = 0


def initial_block_size(qber: float, n: int) -> int:
    if qber <= 0:
        return n
    return max(2, min(n, int(math.ceil(0.73 / qber))))


def _parity(bits: np.ndarray, idx: np.ndarray) -> int:
    return int(np.bitwise_xor.reduce(bits[idx])) if len(idx) else 0


class _Cascade:
    def __init__(self, a: np.ndarray, b: np.ndarray, k1: int, chan: AuthenticatedChannel,
                 rng: np.random.Generator):
        self.a, self.b = a, b
        self.n = len(a)
        self.k1 = k1
        self.chan = chan
        self.rng = rng
        self.perms: list[np.ndarray] = []
        self.inv: list[np.ndarray] = []
        self.sizes: list[int] = []
        self.diff: list[np.ndarray] = []
        self.alice_cache: dict = {}
        self.corrections = 0

    def _alice_parity(self, p: int, lo: int, hi: int) -> int:
        key = (p, lo, hi)
        if key not in self.alice_cache:
            self.chan.disclose(1)
            self.alice_cache[key] = _parity(self.a, self.perms[p][lo:hi])
        return self.alice_cache[key]

    def _block_range(self, p: int, blk: int) -> tuple[int, int]:
        k = self.sizes[p]
        return blk * k, min((blk + 1) * k, self.n)

    def _binary_search(self, p: int, blk: int) -> int:
        lo, hi = self._block_range(p, blk)
        perm = self.perms[p]
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if self._alice_parity(p, lo, mid) != _parity(self.b, perm[lo:mid]):
                hi = mid
            else:
                lo = mid
        return int(perm[lo])

    def _flip(self, x: int, queue: deque) -> None:
        self.b[x] ^= 1
        self.corrections += 1
        for p in range(len(self.perms)):
            blk = int(self.inv[p][x]) // self.sizes[p]
            self.diff[p][blk] ^= 1
            if self.diff[p][blk]:
                queue.append((p, blk))

    def run_pass(self) -> None:
        p = len(self.perms)
        k = min(self.n, self.k1 * 2 ** p)
        perm = np.arange(self.n) if p == 0 else self.rng.permutation(self.n)
        inv = np.empty(self.n, dtype=np.int64)
        inv[perm] = np.arange(self.n)
        self.perms.append(perm)
        self.inv.append(inv)
        self.sizes.append(k)
        nblk = -(-self.n // k)
        pad = nblk * k - self.n
        pa = np.concatenate([self.a[perm], np.zeros(pad, np.uint8)]).reshape(nblk, k)
        pb = np.concatenate([self.b[perm], np.zeros(pad, np.uint8)]).reshape(nblk, k)
        par_a = np.bitwise_xor.reduce(pa, axis=1)
        par_b = np.bitwise_xor.reduce(pb, axis=1)
        for blk in range(nblk):
            lo, hi = self._block_range(p, blk)
            self.alice_cache[(p, lo, hi)] = int(par_a[blk])
        # once pass 0 is public the total parity is known, so the last block is implied
        self.chan.disclose(nblk if p == 0 else nblk - 1)
        self.diff.append((par_a ^ par_b).astype(np.uint8))
        queue = deque((p, int(blk)) for blk in np.flatnonzero(self.diff[p]))
        while queue:
            q, blk = queue.popleft()
            if not self.diff[q][blk]:
                continue
            self._flip(self._binary_search(q, blk), queue)


def _verify(a: np.ndarray, b: np.ndarray, nbits: int, chan: AuthenticatedChannel,
            rng: np.random.Generator) -> bool:
    """Compare ``nbits`` random-subset parities (a universal hash)."""
    if nbits <= 0:
        return bool(np.array_equal(a, b))
    masks = rng.integers(0, 2, size=(nbits, len(a)), dtype=np.uint8)
    ha = (masks.astype(np.int64) @ a.astype(np.int64)) & 1
    hb = (masks.astype(np.int64) @ b.astype(np.int64)) & 1
    chan.disclose(nbits)
    return bool(np.array_equal(ha, hb))


def cascade_reconcile(code_a, code_b, qber_est, channel: Optional[AuthenticatedChannel] = None,
                      rng: Optional[np.random.Generator] = None, *, passes: int = 4,
                      max_passes: int = 16, verify_bits: int = 10) -> tuple[ReconciledKey, ReconciledKey]:
    """Reconcile Bob's code bits onto Alice's.

    ``qber_est`` (a QberEstimate or a float) sizes the first-pass blocks at
    ceil(0.73 / QBER); block size doubles each pass.  After ``passes``
    passes a ``verify_bits`` random hash is compared (a wrong match slips
    through with probability 2^-verify_bits); on mismatch further
    passes run up to ``max_passes`` before :class:`ReconcileFail`.
    """
    a = np.asarray(getattr(code_a, "bits", code_a), dtype=np.uint8).copy()
    b = np.asarray(getattr(code_b, "bits", code_b), dtype=np.uint8).copy()
    if len(a) != len(b):
        raise ValueError("code keys differ in length")
    if passes < 4:
        raise ValueError("cascade needs at least 4 passes")
    chan = channel or AuthenticatedChannel()
    rng = rng or np.random.default_rng()
    q = float(getattr(qber_est, "point", qber_est))
    n = len(a)
    if n == 0:
        return ReconciledKey(a, 0, True), ReconciledKey(b, 0, True)
    leak0 = chan.leak_bits
    cas = _Cascade(a, b, initial_block_size(q, n), chan, rng)
    for _ in range(passes):
        cas.run_pass()
    ok = _verify(a, cas.b, verify_bits, chan, rng)
    while not ok and len(cas.perms) < max_passes:
        cas.run_pass()
        ok = _verify(a, cas.b, verify_bits, chan, rng)
    if not ok:
        raise ReconcileFail(f"keys differ after {len(cas.perms)} passes")
    leak = chan.leak_bits - leak0
    npass = len(cas.perms)
    return (ReconciledKey(a, leak, True, 0, npass),
            ReconciledKey(cas.b, leak, True, cas.corrections, npass))
