from .auth import AuthKeyPool, PoolExhausted, gf64_mul, poly_mac, wc_tag, wc_verify
from .cascade import AuthenticatedChannel, ReconciledKey, ReconcileFail, cascade_reconcile
from .estimation import QberEstimate, SecurityParams, estimate_qber, split_test_bits
from .keyfile import read_key, write_key
from .privacy import SecretKey, Toeplitz, final_length, privacy_amplify

__all__ = [
    "AuthKeyPool", "PoolExhausted", "gf64_mul", "poly_mac", "wc_tag", "wc_verify",
    "AuthenticatedChannel", "ReconciledKey", "ReconcileFail", "cascade_reconcile",
    "QberEstimate", "SecurityParams", "estimate_qber", "split_test_bits",
    "read_key", "write_key",
    "SecretKey", "Toeplitz", "final_length", "privacy_amplify",
]
