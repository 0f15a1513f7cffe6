//! Xavier-uniform initialization.

use rand::Rng;

use super::tensor::Mat;

/// Bound of the Xavier-uniform distribution, `sqrt(1 / (n_in + n_out))`.
pub fn xavier_bound(n_in: usize, n_out: usize) -> f64 {
    (1.0 / (n_in + n_out) as f64).sqrt()
}

/// `rows x cols` matrix with entries i.i.d. uniform in `±xavier_bound(cols, rows)`.
pub fn xavier_init<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    assert!(rows >= 1 && cols >= 1, "xavier_init needs non-empty shapes");
    let bound = xavier_bound(cols, rows);
    Mat {
        rows,
        cols,
        data: (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect(),
    }
}

/// Stacked gate matrix (`gates * hidden x cols`) where every gate block is
/// initialized with its own fan-in/fan-out (`cols`, `hidden`).
pub fn xavier_gates<R: Rng + ?Sized>(gates: usize, hidden: usize, cols: usize, rng: &mut R) -> Mat {
    let mut data = Vec::with_capacity(gates * hidden * cols);
    for _ in 0..gates {
        data.extend(xavier_init(hidden, cols, rng).data);
    }
    Mat { rows: gates * hidden, cols, data }
}
