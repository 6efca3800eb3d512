//! Operation counters.
//!
//! Wallclock numbers on a desk machine are noisy; multiply counts and buffer
//! sizes are not. These counters back the padding-waste and tiled-attention
//! memory claims with deterministic measurements.
//!
//! Counters are thread-local: a tape is confined to one thread, and
//! measurements are meant to run exclusively, so cross-thread mixing would
//! only ever be contamination.

use std::cell::Cell;

thread_local! {
    /// Scalar multiplies issued by feedforward-family matmuls (GeGLU/MLP and
    /// the MLM head), forward and backward. Attention projections and the
    /// attention core are excluded so the count scales exactly linearly in
    /// token count.
    static FF_MULTS: Cell<u64> = const { Cell::new(0) };

    /// Largest attention score buffer allocated for a single (batch, head)
    /// pair, in elements.
    static SCORE_BUF_PEAK: Cell<u64> = const { Cell::new(0) };
}

pub fn reset() {
    FF_MULTS.with(|c| c.set(0));
    SCORE_BUF_PEAK.with(|c| c.set(0));
}

pub fn ff_mults() -> u64 {
    FF_MULTS.with(|c| c.get())
}

pub fn score_buf_peak() -> u64 {
    SCORE_BUF_PEAK.with(|c| c.get())
}

pub(crate) fn add_ff_mults(n: u64) {
    FF_MULTS.with(|c| c.set(c.get() + n));
}

pub(crate) fn note_score_buf(elems: u64) {
    SCORE_BUF_PEAK.with(|c| c.set(c.get().max(elems)));
}
