//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::Params;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Number of coordinates to check; all of them when it exceeds the count.
    pub samples: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { h: 1e-5, tolerance: 1e-4, samples: 50, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares `analytic` against central differences of `loss` at `params` on a
/// seeded sample of coordinates. The error measure is
/// `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<P, F>(mut loss: F, params: &P, analytic: &P, opts: &GradCheckOptions) -> GradCheckReport
where
    P: Params,
    F: FnMut(&P) -> f64,
{
    let n = params.num_params();
    assert_eq!(n, analytic.num_params(), "analytic gradient shape mismatch");
    let coords: Vec<usize> = if opts.samples >= n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut c = sample(&mut rng, n, opts.samples).into_vec();
        c.sort_unstable();
        c
    };
    let mut work = params.clone();
    let mut report = GradCheckReport { checked: coords.len(), max_rel_error: 0.0, failures: Vec::new() };
    for &i in &coords {
        let orig = params.coord(i);
        *work.coord_mut(i) = orig + opts.h;
        let up = loss(&work);
        *work.coord_mut(i) = orig - opts.h;
        let down = loss(&work);
        *work.coord_mut(i) = orig;
        let numeric = (up - down) / (2.0 * opts.h);
        let a = analytic.coord(i);
        let rel = (a - numeric).abs() / a.abs().max(1.0);
        report.max_rel_error = report.max_rel_error.max(rel);
        if !(rel <= opts.tolerance) {
            report.failures.push(GradMismatch { index: i, analytic: a, numeric, rel_error: rel });
        }
    }
    report
}
