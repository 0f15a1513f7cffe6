//! Dynamic time warping of leader and follower series, Newell parameter
//! extraction from the warping path, and the percentile car-following /
//! free-flow split.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::Segment;
use crate::traj::LeaderFollowerPair;
use crate::util::{median, percentile};
use crate::DT;

/// Monotone, continuous alignment between two sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpPath {
    /// `(i, j)` index pairs into `(seq_a, seq_b)`, from `(0, 0)` to the end.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Optimal DTW alignment under absolute-difference local cost.
pub fn dtw_align(seq_a: &[f64], seq_b: &[f64]) -> Result<WarpPath> {
    dtw_align_banded(seq_a, seq_b, None)
}

/// [`dtw_align`] restricted to `|i - j| <= band` when `band` is set. The band
/// is widened to the length difference so a path always exists.
pub fn dtw_align_banded(seq_a: &[f64], seq_b: &[f64], band: Option<usize>) -> Result<WarpPath> {
    let (n, m) = (seq_a.len(), seq_b.len());
    if n == 0 || m == 0 {
        return Err(Error::Argument("DTW inputs must be non-empty".into()));
    }
    let band = band.map(|w| w.max(n.abs_diff(m)));
    let inside = |i: usize, j: usize| band.is_none_or(|w| i.abs_diff(j) <= w);
    let idx = |i: usize, j: usize| i * m + j;
    let mut acc = vec![f64::INFINITY; n * m];
    for i in 0..n {
        for j in 0..m {
            if !inside(i, j) {
                continue;
            }
            let local = (seq_a[i] - seq_b[j]).abs();
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let mut b = f64::INFINITY;
                if i > 0 && j > 0 {
                    b = b.min(acc[idx(i - 1, j - 1)]);
                }
                if i > 0 {
                    b = b.min(acc[idx(i - 1, j)]);
                }
                if j > 0 {
                    b = b.min(acc[idx(i, j - 1)]);
                }
                b
            };
            acc[idx(i, j)] = local + best;
        }
    }

    // Backtrack; ties prefer the diagonal, then the step that keeps the path
    // closer to the diagonal offset it already has.
    let mut pairs = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let (ni, nj) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = acc[idx(i - 1, j - 1)];
            let up = acc[idx(i - 1, j)];
            let left = acc[idx(i, j - 1)];
            if diag <= up && diag <= left {
                (i - 1, j - 1)
            } else if up <= left {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        i = ni;
        j = nj;
        pairs.push((i, j));
    }
    pairs.reverse();
    let total_cost = pairs.iter().map(|&(i, j)| (seq_a[i] - seq_b[j]).abs()).sum();
    Ok(WarpPath { pairs, total_cost })
}

/// Time delay and spacing series recovered from a speed alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NewellParams {
    /// Per matched pair: `(leader index, follower index)`.
    pub matches: Vec<(usize, usize)>,
    /// `t_follower - t_leader` per matched pair, s.
    pub tau: Vec<f64>,
    /// `x_leader(t_leader) - x_follower(t_follower)` per matched pair, m.
    pub d: Vec<f64>,
    /// Delay from the position alignment, kept as a cross-check, s.
    pub tau_x: Vec<f64>,
    pub median_tau: f64,
    pub median_d: f64,
    /// Speeds were (nearly) constant, so the alignment is not unique.
    pub low_confidence: bool,
    /// Number of matched pairs with a negative spacing estimate.
    pub negative_d: usize,
}

impl NewellParams {
    /// Median delay of matched pairs whose follower index falls inside
    /// `seg` (start inclusive, end exclusive except for the final segment).
    pub fn segment_tau(&self, seg: &Segment, last: bool) -> Option<f64> {
        let taus: Vec<f64> = self
            .matches
            .iter()
            .zip(&self.tau)
            .filter(|((_, j), _)| *j >= seg.start && (*j < seg.end || (last && *j == seg.end)))
            .map(|(_, &t)| t)
            .collect();
        median(&taus)
    }
}

/// Speed standard deviation below which alignment is considered degenerate.
const FLAT_SPEED_STD: f64 = 0.05;

fn std_dev(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Aligns leader and follower speeds and reads off Newell's delay and spacing
/// at each matched pair of instants.
pub fn extract_newell_params(pair: &LeaderFollowerPair) -> Result<NewellParams> {
    extract_newell_params_banded(pair, None)
}

pub fn extract_newell_params_banded(pair: &LeaderFollowerPair, band: Option<usize>) -> Result<NewellParams> {
    if pair.duration() + 1e-9 < crate::traj::MIN_PAIR_OVERLAP {
        return Err(Error::Argument(format!("pair overlap {} s is below 3 s", pair.duration())));
    }
    let vl = pair.leader.speeds();
    let vf = pair.follower.speeds();
    let path = dtw_align_banded(&vl, &vf, band)?;
    let lp = &pair.leader.points;
    let fp = &pair.follower.points;
    let mut tau = Vec::with_capacity(path.pairs.len());
    let mut d = Vec::with_capacity(path.pairs.len());
    for &(i, j) in &path.pairs {
        // Frame differences keep equal delays bitwise equal.
        tau.push((fp[j].frame - lp[i].frame) as f64 * DT);
        d.push(lp[i].x - fp[j].x);
    }
    let path_x = dtw_align_banded(&pair.leader.positions(), &pair.follower.positions(), band)?;
    let tau_x = path_x.pairs.iter().map(|&(i, j)| (fp[j].frame - lp[i].frame) as f64 * DT).collect();
    let negative_d = d.iter().filter(|&&x| x < 0.0).count();
    Ok(NewellParams {
        median_tau: median(&tau).unwrap_or(0.0),
        median_d: median(&d).unwrap_or(0.0),
        low_confidence: std_dev(&vl) < FLAT_SPEED_STD || std_dev(&vf) < FLAT_SPEED_STD,
        matches: path.pairs,
        tau,
        d,
        tau_x,
        negative_d,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SectionLabel {
    /// Car-following.
    CF,
    /// Free-flow.
    FF,
}

impl SectionLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SectionLabel::CF => "CF",
            SectionLabel::FF => "FF",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CfFfSplit {
    pub threshold: f64,
    pub labels: Vec<SectionLabel>,
    /// Fewer than 20 samples, or all samples equal.
    pub degenerate: bool,
}

/// Minimum sample count for a meaningful percentile.
pub const MIN_SPLIT_SAMPLES: usize = 20;

/// Percentile threshold on delays; units at or below it are car-following.
pub fn split_cf_ff(tau_samples: &[f64], pct: f64) -> Result<CfFfSplit> {
    let threshold = percentile(tau_samples, pct)
        .ok_or_else(|| Error::Argument("no delay samples to split".into()))?;
    let mut degenerate = false;
    if tau_samples.len() < MIN_SPLIT_SAMPLES {
        log::warn!(
            "CF/FF split over only {} delay samples; percentile is unreliable",
            tau_samples.len()
        );
        degenerate = true;
    }
    if tau_samples.iter().all(|&t| t == tau_samples[0]) {
        log::warn!("all delay samples equal; every unit labeled CF");
        degenerate = true;
    }
    Ok(CfFfSplit {
        threshold,
        labels: label_by_threshold(tau_samples, threshold),
        degenerate,
    })
}

pub fn label_by_threshold(tau_samples: &[f64], threshold: f64) -> Vec<SectionLabel> {
    tau_samples
        .iter()
        .map(|&t| if t <= threshold { SectionLabel::CF } else { SectionLabel::FF })
        .collect()
}

/// CSV dump `i,j,t_leader,t_follower,tau,d` of a speed alignment.
pub fn write_alignment_csv<W: Write>(pair: &LeaderFollowerPair, params: &NewellParams, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["i", "j", "t_leader", "t_follower", "tau", "d"])?;
    for ((&(i, j), tau), d) in params.matches.iter().zip(&params.tau).zip(&params.d) {
        w.write_record([
            i.to_string(),
            j.to_string(),
            pair.leader.points[i].t.to_string(),
            pair.follower.points[j].t.to_string(),
            tau.to_string(),
            d.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
