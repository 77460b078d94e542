//! Queue-aware hybrid CoMP resource allocation for fronthaul-constrained
//! C-RAN clusters.
//!
//! The crate is organised bottom-up: [`channel`] draws the MIMO links and
//! imperfect CSIT, [`hcomp`] builds shared/private precoders and evaluates a
//! frame, [`queueing`] tracks per-UE buffers, [`allocator`] implements the
//! online value-learning power/rate controller, [`oracle`] solves small MDPs
//! exactly for reference, and [`sim`] runs experiments over all schemes.

// Links the system OpenBLAS that provides the LAPACK routines.
extern crate openblas_src;

pub mod allocator;
pub mod channel;
pub mod error;
pub mod hcomp;
pub mod linalg;
pub mod oracle;
pub mod queueing;
pub mod sim;

pub use error::{Error, Result};

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn watts_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dbm_round_trip() {
        assert!((dbm_to_watts(30.0) - 1.0).abs() < 1e-12);
        assert!((dbm_to_watts(-15.0) - 10f64.powf(-4.5)).abs() < 1e-18);
        assert!((watts_to_dbm(dbm_to_watts(20.0)) - 20.0).abs() < 1e-12);
    }
}
