//! Shared inputs for the benchmarks.

use countmix::simulation::{fixture_q2k3, simulate_dataset};
use countmix::{CountMatrix, Theta};

/// The published q=2, k=3 design and `n` rows drawn from it.
pub fn fixture_data(n: usize) -> (Theta, CountMatrix) {
    let theta = fixture_q2k3();
    let data = simulate_dataset(&theta, n, 1).expect("fixture parameters are valid");
    (theta, data.counts)
}
