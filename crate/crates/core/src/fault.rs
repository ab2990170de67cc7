//! Test-only hook for corrupting a backward rule, used to prove that the
//! gradient checker actually fails when a derivative is wrong.

use std::sync::atomic::{AtomicU64, Ordering};

static GELU_GRAD_SKEW: AtomicU64 = AtomicU64::new(0x3FF0_0000_0000_0000); // 1.0

/// Multiplies every GELU derivative by `factor` (1.0 restores correctness).
///
/// Process-global; only meant for negative-control tests.
#[doc(hidden)]
pub fn set_gelu_grad_skew(factor: f64) {
    GELU_GRAD_SKEW.store(factor.to_bits(), Ordering::SeqCst);
}

pub(crate) fn gelu_grad_skew() -> f64 {
    f64::from_bits(GELU_GRAD_SKEW.load(Ordering::Relaxed))
}
