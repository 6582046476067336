//! Lightweight allocation instrumentation.
//!
//! Dense-matrix constructors throughout the crate report their dimension
//! here, which lets scale tests assert that a large-`n` likelihood
//! evaluation never touched an n-by-n allocation.

use std::sync::atomic::{AtomicUsize, Ordering};

static MAX_DENSE_DIM: AtomicUsize = AtomicUsize::new(0);

/// Record a dense allocation of shape `rows` x `cols`.
pub(crate) fn note_dense_alloc(rows: usize, cols: usize) {
    MAX_DENSE_DIM.fetch_max(rows.max(cols), Ordering::Relaxed);
}

/// Reset the tracked maximum dense dimension to zero.
pub fn reset_dense_tracking() {
    MAX_DENSE_DIM.store(0, Ordering::Relaxed);
}

/// Largest dense matrix dimension allocated since the last reset.
pub fn max_dense_dim() -> usize {
    MAX_DENSE_DIM.load(Ordering::Relaxed)
}
