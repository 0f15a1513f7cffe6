//! Bottom-up segmentation of speed profiles into slope-homogeneous pieces.
//!
//! A profile of `n` samples starts as `n - 1` atomic segments, one per pair of
//! consecutive samples. Adjacent segments share their boundary sample. The
//! cheapest adjacent pair is merged until at most `floor(T / l_min)` segments
//! remain, where the merge cost favours similar slopes and rewards (for
//! `lambda > 0`) pairs whose slopes share a sign. Refinement then fuses
//! neighbours whose slopes differ by less than `epsilon_merge`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::ols;
use crate::DT;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegConfig {
    /// Weight of the slope sign agreement term.
    pub lambda: f64,
    /// Slope tolerance for refinement, m/s².
    pub epsilon_merge: f64,
    /// Minimum segment length, s.
    pub l_min: f64,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            lambda: 0.1,
            epsilon_merge: 0.01,
            l_min: 0.5,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !(self.epsilon_merge > 0.0) || !(self.l_min > 0.0) {
            return Err(Error::Config(format!("invalid segmentation config {self:?}")));
        }
        Ok(())
    }
}

/// Contiguous piece of a sampled profile; `start..=end` are sample indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// Least-squares slope of speed over time, m/s².
    pub theta: f64,
    /// Residual sum of squares of the fit.
    pub residual: f64,
}

impl Segment {
    /// Fits a segment over samples `start..=end` of `profile`, whose first
    /// sample sits at time `t0`.
    pub fn fit(profile: &[f64], t0: f64, start: usize, end: usize) -> Segment {
        let t: Vec<f64> = (start..=end).map(|i| (i - start) as f64 * DT).collect();
        let (theta, _, residual) = ols(&t, &profile[start..=end]);
        Segment {
            start,
            end,
            t_start: t0 + start as f64 * DT,
            t_end: t0 + end as f64 * DT,
            theta,
            residual,
        }
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn samples(&self) -> usize {
        self.end - self.start + 1
    }
}

/// Output of [`segment_profile`].
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub segments: Vec<Segment>,
    /// Set when the profile was shorter than `2 * l_min` and returned whole.
    pub short: bool,
}

fn signum0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `|θ_l - θ_r| - λ·sgn(θ_l·θ_r)` with `sgn(0) = 0`.
pub fn merge_cost(left: &Segment, right: &Segment, cfg: &SegConfig) -> f64 {
    slope_cost(left.theta, right.theta, cfg.lambda)
}

pub fn slope_cost(theta_left: f64, theta_right: f64, lambda: f64) -> f64 {
    (theta_left - theta_right).abs() - lambda * signum0(theta_left * theta_right)
}

/// Termination bound `floor(T / l_min)` for a profile lasting `duration` s.
pub fn max_segments(duration: f64, l_min: f64) -> usize {
    ((duration / l_min) + 1e-9).floor().max(1.0) as usize
}

#[derive(PartialEq)]
struct Candidate {
    cost: f64,
    left_start: usize,
    left_version: u64,
    right_version: u64,
    left: usize,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    // min-heap on (cost, left_start)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.left_start.cmp(&self.left_start))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Greedy bottom-up segmentation of `profile` (sampled every DT from `t0`).
///
/// Ties in merge cost go to the left-most pair. Candidate costs live in a heap
/// and are invalidated lazily through per-segment version counters. Segments
/// still shorter than `l_min` after the greedy phase are folded into the
/// neighbour with the closer slope.
pub fn segment_profile(profile: &[f64], t0: f64, cfg: &SegConfig) -> Result<Segmentation> {
    cfg.validate()?;
    if profile.len() < 2 {
        return Err(Error::Argument("profile needs at least 2 samples".into()));
    }
    let n = profile.len();
    let duration = (n - 1) as f64 * DT;
    if duration < 2.0 * cfg.l_min {
        return Ok(Segmentation {
            segments: vec![Segment::fit(profile, t0, 0, n - 1)],
            short: true,
        });
    }
    let n_max = max_segments(duration, cfg.l_min);

    // Doubly linked list over slots; slot i initially holds atomic segment i.
    let mut segs: Vec<Segment> = (0..n - 1).map(|i| Segment::fit(profile, t0, i, i + 1)).collect();
    let mut alive = vec![true; segs.len()];
    let mut version = vec![0u64; segs.len()];
    let mut prev: Vec<Option<usize>> = (0..segs.len()).map(|i| i.checked_sub(1)).collect();
    let mut next: Vec<Option<usize>> = (0..segs.len()).map(|i| Some(i + 1).filter(|&j| j < segs.len())).collect();
    let mut count = segs.len();

    let mut heap = BinaryHeap::new();
    let push = |heap: &mut BinaryHeap<Candidate>, segs: &[Segment], version: &[u64], l: usize, r: usize| {
        heap.push(Candidate {
            cost: merge_cost(&segs[l], &segs[r], cfg),
            left_start: segs[l].start,
            left_version: version[l],
            right_version: version[r],
            left: l,
        });
    };
    for i in 0..segs.len().saturating_sub(1) {
        push(&mut heap, &segs, &version, i, i + 1);
    }

    while count > n_max {
        let Some(c) = heap.pop() else { break };
        let l = c.left;
        let Some(r) = next[l] else { continue };
        if !alive[l] || version[l] != c.left_version || version[r] != c.right_version {
            continue;
        }
        segs[l] = Segment::fit(profile, t0, segs[l].start, segs[r].end);
        version[l] += 1;
        alive[r] = false;
        next[l] = next[r];
        if let Some(rr) = next[r] {
            prev[rr] = Some(l);
        }
        count -= 1;
        if let Some(p) = prev[l] {
            push(&mut heap, &segs, &version, p, l);
        }
        if let Some(nx) = next[l] {
            push(&mut heap, &segs, &version, l, nx);
        }
    }

    let mut out = Vec::with_capacity(count);
    let mut cur = Some(0);
    while let Some(i) = cur {
        out.push(segs[i]);
        cur = next[i];
    }
    let out = absorb_short(out, profile, t0, cfg.l_min);
    Ok(Segmentation { segments: out, short: false })
}

/// Folds every segment shorter than `min_len` seconds into the adjacent
/// segment with the closer slope, re-fitting the union, until none remain
/// (or only one segment is left).
pub fn absorb_short(mut segs: Vec<Segment>, profile: &[f64], t0: f64, min_len: f64) -> Vec<Segment> {
    loop {
        if segs.len() <= 1 {
            return segs;
        }
        let Some(i) = (0..segs.len())
            .filter(|&i| segs[i].duration() + 1e-9 < min_len)
            .min_by(|&a, &b| segs[a].duration().total_cmp(&segs[b].duration()).then(a.cmp(&b)))
        else {
            return segs;
        };
        let left = i.checked_sub(1);
        let right = Some(i + 1).filter(|&j| j < segs.len());
        let target = match (left, right) {
            (Some(l), Some(r)) => {
                let dl = (segs[l].theta - segs[i].theta).abs();
                let dr = (segs[r].theta - segs[i].theta).abs();
                if dl <= dr {
                    l
                } else {
                    r
                }
            }
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => return segs,
        };
        let (a, b) = if target < i { (target, i) } else { (i, target) };
        let merged = Segment::fit(profile, t0, segs[a].start, segs[b].end);
        segs[a] = merged;
        segs.remove(b);
    }
}

/// Merges adjacent segments whose slopes differ by less than
/// `cfg.epsilon_merge` until no such pair is left. Each pass merges the
/// left-most qualifying pair and re-fits the union before looking again.
pub fn refine_segments(segs: &[Segment], profile: &[f64], t0: f64, cfg: &SegConfig) -> Result<Vec<Segment>> {
    check_tiling(segs, profile.len())?;
    let mut out = segs.to_vec();
    while let Some(i) = (0..out.len().saturating_sub(1))
        .find(|&i| (out[i].theta - out[i + 1].theta).abs() < cfg.epsilon_merge)
    {
        out[i] = Segment::fit(profile, t0, out[i].start, out[i + 1].end);
        out.remove(i + 1);
    }
    Ok(out)
}

/// Segmentation followed by refinement.
pub fn segment_and_refine(profile: &[f64], t0: f64, cfg: &SegConfig) -> Result<Segmentation> {
    let seg = segment_profile(profile, t0, cfg)?;
    let segments = refine_segments(&seg.segments, profile, t0, cfg)?;
    Ok(Segmentation { segments, short: seg.short })
}

/// Verifies that `segs` tile samples `0..n` with shared boundary samples.
pub fn check_tiling(segs: &[Segment], n: usize) -> Result<()> {
    let ok = !segs.is_empty()
        && segs[0].start == 0
        && segs[segs.len() - 1].end + 1 == n
        && segs.windows(2).all(|w| w[0].end == w[1].start)
        && segs.iter().all(|s| s.end > s.start || n == 1);
    if ok {
        Ok(())
    } else {
        Err(Error::Internal("segments do not tile the profile".into()))
    }
}

/// Writes segments as CSV `t_start,t_end,theta,residual`.
pub fn write_segments_csv<W: Write>(segs: &[Segment], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t_start", "t_end", "theta", "residual"])?;
    for s in segs {
        w.write_record([
            s.t_start.to_string(),
            s.t_end.to_string(),
            s.theta.to_string(),
            s.residual.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
