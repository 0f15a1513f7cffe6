//! Six-valued driving regimes and the slope-based labeling pipeline.
//!
//! Labeling a pair runs: bottom-up segmentation and refinement of the
//! follower's speed, folding of sub-3 s segments, speed DTW for per-segment
//! delays, a corpus-wide percentile split into car-following and free-flow
//! segments, and finally the slope classifier on each segment.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dtw::{extract_newell_params_banded, label_by_threshold, NewellParams, SectionLabel};
use crate::error::{Error, Result};
use crate::segment::{absorb_short, check_tiling, segment_and_refine, SegConfig, Segment};
use crate::traj::LeaderFollowerPair;
use crate::util::percentile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum DrivingRegime {
    /// Steady following.
    F = 0,
    /// Acceleration.
    A = 1,
    /// Deceleration.
    D = 2,
    /// Stationary.
    S = 3,
    /// Free acceleration.
    Fa = 4,
    /// Cruising.
    C = 5,
}

pub const NUM_REGIMES: usize = 6;

impl DrivingRegime {
    pub const ALL: [DrivingRegime; NUM_REGIMES] = [
        DrivingRegime::F,
        DrivingRegime::A,
        DrivingRegime::D,
        DrivingRegime::S,
        DrivingRegime::Fa,
        DrivingRegime::C,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn one_hot(self) -> [f64; NUM_REGIMES] {
        let mut v = [0.0; NUM_REGIMES];
        v[self.index()] = 1.0;
        v
    }

    pub fn name(self) -> &'static str {
        match self {
            DrivingRegime::F => "F",
            DrivingRegime::A => "A",
            DrivingRegime::D => "D",
            DrivingRegime::S => "S",
            DrivingRegime::Fa => "Fa",
            DrivingRegime::C => "C",
        }
    }

    /// Section the regime belongs to.
    pub fn section(self) -> SectionLabel {
        match self {
            DrivingRegime::Fa | DrivingRegime::C => SectionLabel::FF,
            _ => SectionLabel::CF,
        }
    }
}

impl fmt::Display for DrivingRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    /// Steady-state slope threshold |ω₀|, m/s².
    pub omega0: f64,
    /// Speed treated as standing still, m/s.
    pub v_stop: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { omega0: 0.5, v_stop: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classification {
    pub regime: DrivingRegime,
    /// Free-flow deceleration, which has no regime of its own and maps to C.
    pub inconsistent: bool,
}

/// Section first, then slope, then speed.
pub fn classify_slope(theta: f64, section: SectionLabel, v_mean: f64, cfg: &ClassifierConfig) -> Classification {
    use DrivingRegime::*;
    let steady = theta.abs() <= cfg.omega0;
    let (regime, inconsistent) = match section {
        SectionLabel::CF if steady && v_mean < cfg.v_stop => (S, false),
        SectionLabel::CF if steady => (F, false),
        SectionLabel::CF if theta > 0.0 => (A, false),
        SectionLabel::CF => (D, false),
        SectionLabel::FF if steady => (C, false),
        SectionLabel::FF if theta > 0.0 => (Fa, false),
        SectionLabel::FF => (C, true),
    };
    Classification { regime, inconsistent }
}

pub fn classify_segment(seg: &Segment, section: SectionLabel, v_mean: f64, cfg: &ClassifierConfig) -> Classification {
    classify_slope(seg.theta, section, v_mean, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    /// First timestep of the new regime.
    pub index: usize,
    pub from: DrivingRegime,
    pub to: DrivingRegime,
}

/// Per-timestep regimes of one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeLabels {
    pub regimes: Vec<DrivingRegime>,
    pub sections: Vec<SectionLabel>,
    pub transitions: Vec<Transition>,
    /// Number of segments mapped through the free-flow deceleration fallback.
    pub inconsistencies: usize,
}

/// Expands per-segment classes to timesteps. Sample `k` belongs to the
/// segment with `start <= k < end`; the final sample to the last segment.
pub fn label_regimes(
    pair: &LeaderFollowerPair,
    segs: &[Segment],
    sections: &[SectionLabel],
    cfg: &ClassifierConfig,
) -> Result<RegimeLabels> {
    let n = pair.len();
    check_tiling(segs, n)?;
    if sections.len() != segs.len() {
        return Err(Error::Internal("one section label per segment required".into()));
    }
    let speeds = pair.follower.speeds();
    let mut regimes = Vec::with_capacity(n);
    let mut secs = Vec::with_capacity(n);
    let mut inconsistencies = 0;
    for (s, (seg, &section)) in segs.iter().zip(sections).enumerate() {
        let v_mean = speeds[seg.start..=seg.end].iter().sum::<f64>() / seg.samples() as f64;
        let c = classify_segment(seg, section, v_mean, cfg);
        inconsistencies += usize::from(c.inconsistent);
        let end = if s + 1 == segs.len() { seg.end + 1 } else { seg.end };
        for _ in seg.start..end {
            regimes.push(c.regime);
            secs.push(section);
        }
    }
    let transitions = regimes
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] != w[1])
        .map(|(k, w)| Transition { index: k + 1, from: w[0], to: w[1] })
        .collect();
    Ok(RegimeLabels { regimes, sections: secs, transitions, inconsistencies })
}

/// Parameters of the full labeling pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelConfig {
    pub seg: SegConfig,
    pub classifier: ClassifierConfig,
    /// Segments shorter than this are folded into a neighbour, s.
    pub min_segment_s: f64,
    /// Percentile of segment delays separating CF from FF.
    pub percentile: f64,
    /// Optional Sakoe-Chiba band for the DTW, in samples.
    pub dtw_band: Option<usize>,
}

impl Default for LabelConfig {
    fn default() -> Self {
        LabelConfig {
            seg: SegConfig::default(),
            classifier: ClassifierConfig::default(),
            min_segment_s: 3.0,
            percentile: 85.0,
            dtw_band: None,
        }
    }
}

/// Segmentation and alignment of one pair, before the CF/FF threshold is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairAnalysis {
    pub segments: Vec<Segment>,
    pub newell: NewellParams,
    /// Median delay per segment, s.
    pub segment_tau: Vec<f64>,
}

pub fn analyze_pair(pair: &LeaderFollowerPair, cfg: &LabelConfig) -> Result<PairAnalysis> {
    let profile = pair.follower.speeds();
    let t0 = pair.overlap.0;
    let seg = segment_and_refine(&profile, t0, &cfg.seg)?;
    let segments = absorb_short(seg.segments, &profile, t0, cfg.min_segment_s);
    let newell = extract_newell_params_banded(pair, cfg.dtw_band)?;
    let last = segments.len() - 1;
    let segment_tau = segments
        .iter()
        .enumerate()
        .map(|(k, s)| newell.segment_tau(s, k == last).unwrap_or(newell.median_tau))
        .collect();
    Ok(PairAnalysis { segments, newell, segment_tau })
}

/// Percentile threshold over all segment delays of a corpus.
pub fn section_threshold(analyses: &[PairAnalysis], pct: f64) -> Result<f64> {
    let taus: Vec<f64> = analyses.iter().flat_map(|a| a.segment_tau.iter().copied()).collect();
    if taus.len() < crate::dtw::MIN_SPLIT_SAMPLES {
        log::warn!("CF/FF threshold from only {} segments", taus.len());
    }
    percentile(&taus, pct).ok_or_else(|| Error::Data("no segments to derive a CF/FF threshold".into()))
}

pub fn label_with_threshold(
    pair: &LeaderFollowerPair,
    analysis: &PairAnalysis,
    threshold: f64,
    cfg: &LabelConfig,
) -> Result<RegimeLabels> {
    let sections = label_by_threshold(&analysis.segment_tau, threshold);
    label_regimes(pair, &analysis.segments, &sections, &cfg.classifier)
}

/// Labels a whole corpus with a threshold computed from the corpus itself.
/// Returns the labels (in pair order) and the threshold used.
pub fn label_corpus(pairs: &[LeaderFollowerPair], cfg: &LabelConfig) -> Result<(Vec<RegimeLabels>, f64)> {
    let analyses = pairs
        .par_iter()
        .map(|p| analyze_pair(p, cfg))
        .collect::<Result<Vec<_>>>()?;
    let threshold = section_threshold(&analyses, cfg.percentile)?;
    let labels = pairs
        .iter()
        .zip(&analyses)
        .map(|(p, a)| label_with_threshold(p, a, threshold, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok((labels, threshold))
}

/// CSV `t,regime_id,regime_name,section`, one row per timestep.
pub fn write_labels_csv<W: Write>(pair: &LeaderFollowerPair, labels: &RegimeLabels, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "regime_id", "regime_name", "section"])?;
    for ((p, r), s) in pair.follower.points.iter().zip(&labels.regimes).zip(&labels.sections) {
        w.write_record([
            p.t.to_string(),
            r.index().to_string(),
            r.name().to_string(),
            s.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
