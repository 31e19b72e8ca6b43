//! Fixtures shared by the benchmarks.

use rdwgd_core::measures::RngSeed;
use rdwgd_core::sources::sample_convolved;
use rdwgd_core::{initial_measure, ConvolvedSourceSpec, DiscreteMeasure};

/// `m` samples of the noisy unit circle (sigma2 = 0.1) and `n` atoms drawn from them.
pub fn circle_problem(m: usize, n: usize) -> (DiscreteMeasure, DiscreteMeasure) {
    let spec = ConvolvedSourceSpec::circle(1.0, 0.1).expect("valid source");
    let mu = sample_convolved(&spec, m, RngSeed::new(7)).expect("m > 0");
    let nu = initial_measure(&mu, n, 7).expect("n <= m");
    (mu, nu)
}
