//! Three-stage curriculum for the hybrid model.
//!
//! * Stage 1 trains the regime predictor alone on label-smoothed
//!   cross-entropy, the kinematic network frozen.
//! * Stage 2 trains both: cross-entropy for the regime predictor and the
//!   closed-loop trajectory loss for the kinematic network. The regime reaches
//!   the kinematic network through the argmax of the predictor, so the two
//!   gradients do not mix.
//! * Stage 3 freezes the regime predictor and fine-tunes the kinematic network,
//!   first on single-step predictions from observed inputs (phase 1) and, once
//!   the validation single-step acceleration MSE drops below the switch
//!   threshold, on closed-loop rollouts (phase 2).
//!
//! Closed-loop gradients use backpropagation through the rollout: the
//! kinematic update is differentiated analytically and the rollout is cut
//! into windows of `bptt_window` steps whose starting state is treated as a
//! constant.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::propagate;
use crate::nn::adam::{adam_step, AdamConfig, OptimState};
use crate::nn::loss::{loss_cls_grad, RegWeights};
use crate::nn::model::{
    regime_input, Checkpoint, FeatureScaler, HybridModel, KinForward, KinFrame, KinematicNet, RegimeNet,
    KIN_FEATURES,
};
use crate::nn::params::Params;
use crate::regime::{DrivingRegime, NUM_REGIMES};
use crate::sim::{closed_loop_simulate, initial_regime, kin_window, regime_step, track_regimes, ModelHandle};
use crate::traj::LeaderFollowerPair;
use crate::util::config_hash;
use crate::DT;

/// Where the kinematic network gets its regime input during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DrSource {
    /// Argmax of the regime predictor, run on the (observed or rolled-out)
    /// states.
    #[default]
    Predicted,
    /// Labels from the regime classifier. Only meaningful on observed states;
    /// used for ablations.
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurriculumConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    /// Upper bound on stage-3 epochs; early stopping usually ends it sooner.
    pub stage3_epochs: usize,
    /// Phase 1 to phase 2 switch: validation single-step acceleration MSE.
    pub phase_switch_mse: f64,
    pub seed: u64,
    /// Windows per gradient step.
    pub batch: usize,
    /// Rollouts per gradient step.
    pub seq_batch: usize,
    pub adam: AdamConfig,
    pub label_smoothing: f64,
    pub stage1_patience: usize,
    pub stage3_patience: usize,
    pub bptt_window: usize,
    pub ce_weight: f64,
    pub global_weight: f64,
    pub reg_weights: RegWeights,
    pub dr_source: DrSource,
    /// Use every `window_stride`-th window in window-based training.
    pub window_stride: usize,
    /// Closed-loop training rollouts are cut to this many predicted steps,
    /// starting at a seeded random offset. `None` rolls out whole pairs.
    pub rollout_horizon: Option<usize>,
    pub divergence_factor: f64,
    pub divergence_epochs: usize,
    /// Restore the best validation parameters when a stage ends.
    pub restore_best: bool,
    /// Stage 3 starts directly in the closed-loop phase.
    pub skip_local_phase: bool,
    /// Directory for per-stage checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig {
            stage1_epochs: 50,
            stage2_epochs: 50,
            stage3_epochs: 200,
            phase_switch_mse: 0.05,
            seed: 0,
            batch: 128,
            seq_batch: 8,
            adam: AdamConfig::default(),
            label_smoothing: 0.1,
            stage1_patience: 10,
            stage3_patience: 15,
            bptt_window: 50,
            ce_weight: 1.0,
            global_weight: 1.0,
            reg_weights: RegWeights::default(),
            dr_source: DrSource::Predicted,
            window_stride: 1,
            rollout_horizon: None,
            divergence_factor: 10.0,
            divergence_epochs: 5,
            restore_best: true,
            skip_local_phase: false,
            checkpoint_dir: None,
        }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.phase_switch_mse > 0.0) {
            return Err(Error::Config("phase_switch_mse must be positive".into()));
        }
        if self.batch == 0 || self.seq_batch == 0 || self.bptt_window == 0 || self.window_stride == 0 {
            return Err(Error::Config("batch sizes, bptt_window and window_stride must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        if self.rollout_horizon == Some(0) {
            return Err(Error::Config("rollout_horizon must be positive".into()));
        }
        Ok(())
    }
}

/// One pair prepared for training.
#[derive(Debug, Clone)]
pub struct Sequence {
    pub pair: LeaderFollowerPair,
    /// Scaled `[dd, dv, v]` of the observed states.
    pub scaled: Vec<[f64; KIN_FEATURES]>,
    pub labels: Vec<DrivingRegime>,
    pub lx: Vec<f64>,
    pub lv: Vec<f64>,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
}

impl Sequence {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Raw `[dd, dv, v]` rows of a pair.
pub fn raw_features(pair: &LeaderFollowerPair) -> Vec<[f64; KIN_FEATURES]> {
    pair.spacing
        .iter()
        .zip(&pair.rel_speed)
        .zip(&pair.follower.points)
        .map(|((&s, &dv), p)| [s, dv, p.v])
        .collect()
}

pub fn fit_scaler(pairs: &[LeaderFollowerPair]) -> FeatureScaler {
    let rows: Vec<[f64; KIN_FEATURES]> = pairs.iter().flat_map(raw_features).collect();
    FeatureScaler::fit(rows.iter())
}

/// Builds training sequences; `labels[i]` must cover pair `i` sample by sample.
pub fn prepare(pairs: &[LeaderFollowerPair], labels: &[Vec<DrivingRegime>], scaler: &FeatureScaler) -> Result<Vec<Sequence>> {
    if labels.len() != pairs.len() {
        return Err(Error::Data(format!("{} pairs but {} label sequences", pairs.len(), labels.len())));
    }
    pairs
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (p, l))| {
            if l.len() != p.len() {
                return Err(Error::Data(format!("pair {i}: {} samples but {} regime labels", p.len(), l.len())));
            }
            Ok(Sequence {
                pair: p.clone(),
                scaled: raw_features(p).into_iter().map(|r| scaler.apply(r)).collect(),
                labels: l.clone(),
                lx: p.leader.positions(),
                lv: p.leader.speeds(),
                x: p.follower.positions(),
                v: p.follower.speeds(),
                a: p.follower.accels(),
            })
        })
        .collect()
}

/// Training-log record, one per epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub phase: u8,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_cls_acc: Option<f64>,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cls_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub global_loss: Option<f64>,
    /// Validation single-step acceleration MSE that decided the phase of this
    /// epoch (stage 3 only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub switch_metric: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub truncations: Option<usize>,
}

#[derive(Debug, Default)]
pub struct TrainLog {
    pub entries: Vec<EpochLog>,
    sink: Option<std::fs::File>,
}

impl TrainLog {
    pub fn to_file(path: &std::path::Path) -> Result<Self> {
        Ok(TrainLog { entries: Vec::new(), sink: Some(std::fs::File::create(path)?) })
    }

    fn push(&mut self, e: EpochLog) -> Result<()> {
        log::info!(
            "stage {} phase {} epoch {}: train {:.6} val {:.6}",
            e.stage,
            e.phase,
            e.epoch,
            e.train_loss,
            e.val_loss
        );
        if let Some(f) = &mut self.sink {
            serde_json::to_writer(&mut *f, &e)?;
            f.write_all(b"\n")?;
        }
        self.entries.push(e);
        Ok(())
    }
}

/// Trainer state: the model plus one optimizer per network.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: HybridModel,
    pub cfg: CurriculumConfig,
    pub optim_regime: Option<OptimState>,
    pub optim_kin: OptimState,
    pub log: Vec<EpochLog>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Sums per-sample gradients in input order, then scales by `1 / n`.
fn reduce<P: Params>(zero: &P, grads: Vec<P>) -> P {
    let n = grads.len().max(1) as f64;
    let mut acc = zero.zeros_like();
    for g in &grads {
        acc.add_assign(g);
    }
    acc.scale(1.0 / n);
    acc
}

/// `(sequence, t)` windows ending at `t`.
fn windows(seqs: &[Sequence], from: usize, to_end: usize, stride: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, s) in seqs.iter().enumerate() {
        let n = s.len();
        let mut t = from;
        while t + to_end < n {
            out.push((i, t));
            t += stride;
        }
    }
    out
}

fn gru_window(model: &HybridModel, seq: &Sequence, t: usize) -> Vec<Vec<f64>> {
    let lo = (t + 1).saturating_sub(model.config.window);
    let dr0 = initial_regime(seq.a[0], seq.v[0]);
    (lo..=t)
        .map(|j| regime_input(seq.scaled[j], if j == 0 { dr0 } else { seq.labels[j - 1] }))
        .collect()
}

/// Cross-entropy of the regime predictor on one teacher-forced window, with
/// gradient. Returns `(loss, correct, grad)`.
fn cls_sample(model: &HybridModel, seq: &Sequence, t: usize, eps: f64, grad: bool) -> Result<(f64, bool, Option<RegimeNet>)> {
    let gru = model.regime.as_ref().expect("regime predictor");
    let fwd = gru.forward(&gru_window(model, seq, t))?;
    let label = seq.labels[t].index();
    let (loss, dp) = loss_cls_grad(&fwd.probs, label, eps);
    let correct = crate::nn::model::argmax(&fwd.probs) == label;
    let g = grad.then(|| {
        let mut g = gru.zeros_like();
        gru.backward(&fwd, &dp, &mut g);
        g
    });
    Ok((loss, correct, g))
}

/// Mean validation cross-entropy and accuracy.
pub fn evaluate_cls(model: &HybridModel, seqs: &[Sequence], eps: f64) -> Result<(f64, f64)> {
    let ws = windows(seqs, 0, 0, 1);
    if ws.is_empty() {
        return Ok((0.0, 1.0));
    }
    let res: Vec<(f64, bool)> = ws
        .par_iter()
        .map(|&(i, t)| cls_sample(model, &seqs[i], t, eps, false).map(|(l, c, _)| (l, c)))
        .collect::<Result<_>>()?;
    let n = res.len() as f64;
    Ok((res.iter().map(|r| r.0).sum::<f64>() / n, res.iter().filter(|r| r.1).count() as f64 / n))
}

/// Regime weights fed to the kinematic network along observed states.
fn observed_weights(model: &HybridModel, seq: &Sequence, src: DrSource) -> Result<Vec<[f64; NUM_REGIMES]>> {
    if !model.kin.uses_regime() {
        return Ok(Vec::new());
    }
    match src {
        DrSource::GroundTruth => Ok(seq.labels.iter().map(|r| r.one_hot()).collect()),
        DrSource::Predicted => Ok(track_regimes(model, &seq.scaled, initial_regime(seq.a[0], seq.v[0]))?.1),
    }
}

/// Single-step squared acceleration error for the window ending at `t`.
fn local_sample(model: &HybridModel, seq: &Sequence, w: &[[f64; NUM_REGIMES]], t: usize, grad: bool) -> Result<(f64, Option<KinematicNet>)> {
    let frames = kin_window(model, &seq.scaled, w, t);
    let fwd = model.kin.forward(&frames)?;
    let err = fwd.y - seq.a[t + 1];
    let g = grad.then(|| {
        let mut g = model.kin.zeros_like();
        model.kin.backward(&fwd, &frames, 2.0 * err, &mut g);
        g
    });
    Ok((err * err, g))
}

/// Validation single-step acceleration MSE on observed inputs.
pub fn evaluate_local(model: &HybridModel, seqs: &[Sequence], src: DrSource) -> Result<f64> {
    let weights: Vec<_> = seqs.iter().map(|s| observed_weights(model, s, src)).collect::<Result<_>>()?;
    let ws = windows(seqs, model.config.window - 1, 1, 1);
    if ws.is_empty() {
        return Err(Error::Data("no validation windows".into()));
    }
    let errs: Vec<f64> = ws
        .par_iter()
        .map(|&(i, t)| local_sample(model, &seqs[i], &weights[i], t, false).map(|r| r.0))
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Mean closed-loop spacing MSE over validation pairs.
pub fn evaluate_closed_loop(model: &HybridModel, seqs: &[Sequence]) -> Result<f64> {
    let handle = ModelHandle::Neural(std::sync::Arc::new(model.clone()));
    let v: Vec<f64> = seqs
        .par_iter()
        .map(|s| closed_loop_simulate(&s.pair, &handle).map(|r| r.mse_spacing))
        .collect::<Result<_>>()?;
    Ok(v.iter().sum::<f64>() / v.len().max(1) as f64)
}

/// Outcome of one closed-loop training rollout.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// Mean over predicted steps of the weighted per-step squared errors.
    pub loss: f64,
    /// Number of predicted steps contributing to the loss.
    pub steps: usize,
    /// Rollout stopped early because spacing became non-positive.
    pub truncated: bool,
    pub clips: usize,
    pub a: Vec<f64>,
    pub v: Vec<f64>,
    pub x: Vec<f64>,
}

struct StepRecord {
    frames: Vec<KinFrame>,
    fwd: KinForward,
    lo: usize,
    clipped: bool,
}

/// Closed-loop rollout of the kinematic network over `seq` from `start`,
/// predicting at most `horizon` steps. With `grad` set, accumulates the
/// gradient of the returned loss into it.
pub fn rollout_loss(
    model: &HybridModel,
    seq: &Sequence,
    cfg: &CurriculumConfig,
    start: usize,
    horizon: Option<usize>,
    mut grad: Option<&mut KinematicNet>,
) -> Result<Rollout> {
    let w = model.config.window;
    let n = seq.len();
    if start + w >= n {
        return Err(Error::Argument("rollout start leaves no step to predict".into()));
    }
    let end = horizon.map_or(n, |h| (start + w + h).min(n));
    let uses_regime = model.kin.uses_regime();
    let rw = cfg.reg_weights;
    let std = model.scaler.std;
    let dr0 = initial_regime(seq.a[start], seq.v[start]);

    let mut x: Vec<f64> = seq.x[start..start + w].to_vec();
    let mut v: Vec<f64> = seq.v[start..start + w].to_vec();
    let mut a: Vec<f64> = seq.a[start..start + w].to_vec();
    let mut scaled: Vec<[f64; KIN_FEATURES]> = seq.scaled[start..start + w].to_vec();
    let mut regimes: Vec<DrivingRegime> = Vec::new();
    let mut weights: Vec<[f64; NUM_REGIMES]> = Vec::new();
    let push_regime = |scaled: &[[f64; KIN_FEATURES]], regimes: &mut Vec<DrivingRegime>, weights: &mut Vec<[f64; NUM_REGIMES]>| -> Result<()> {
        if !uses_regime {
            return Ok(());
        }
        let k = scaled.len() - 1;
        let (r, wt) = match cfg.dr_source {
            DrSource::GroundTruth => (seq.labels[start + k], seq.labels[start + k].one_hot()),
            DrSource::Predicted => regime_step(model, scaled, regimes, dr0)?,
        };
        regimes.push(r);
        weights.push(wt);
        Ok(())
    };
    for k in 0..w {
        push_regime(&scaled[..=k], &mut regimes, &mut weights)?;
    }

    let mut total = 0.0;
    let mut steps = 0usize;
    let mut clips = 0usize;
    let mut truncated = false;
    // Local index k is global index start + k; predictions fill k >= w.
    let mut chunk_start = w;
    let mut records: Vec<StepRecord> = Vec::new();
    let mut k = w;
    while start + k < end {
        let t = k - 1;
        let frames = kin_window(model, &scaled, &weights, t);
        let lo = t + 1 - frames.len();
        let fwd = model.kin.forward(&frames)?;
        let st = propagate(x[t], v[t], fwd.y, DT);
        let g = start + k;
        let dd = seq.lx[g] - st.x;
        if dd <= 0.0 {
            truncated = true;
            break;
        }
        if st.clipped {
            clips += 1;
        }
        x.push(st.x);
        v.push(st.v);
        a.push(st.a);
        scaled.push(model.scaler.apply([dd, seq.lv[g] - st.v, st.v]));
        push_regime(&scaled, &mut regimes, &mut weights)?;
        let obs_dd = seq.lx[g] - seq.x[g];
        total += rw.a * (st.a - seq.a[g]).powi(2) + rw.v * (st.v - seq.v[g]).powi(2) + rw.dx * (dd - obs_dd).powi(2);
        steps += 1;
        if grad.is_some() {
            records.push(StepRecord { frames, fwd, lo, clipped: st.clipped });
        }
        k += 1;
        if grad.is_some() && (k - chunk_start == cfg.bptt_window || start + k >= end) {
            backprop_chunk(model, seq, start, chunk_start, &records, &x, &v, &a, rw, std, grad.as_deref_mut().unwrap());
            records.clear();
            chunk_start = k;
        }
    }
    if let Some(gr) = grad.as_deref_mut() {
        if !records.is_empty() {
            backprop_chunk(model, seq, start, chunk_start, &records, &x, &v, &a, rw, std, gr);
        }
    }
    if steps == 0 {
        return Err(Error::Numeric("rollout collided on its first predicted step".into()));
    }
    let scale = 1.0 / steps as f64;
    if let Some(gr) = grad {
        gr.scale(scale);
    }
    Ok(Rollout { loss: total * scale, steps, truncated, clips, a, v, x })
}

/// Reverse sweep over predicted steps `c0 .. c0 + records.len()` (local
/// indices). States before `c0` are constants. Gradients are unnormalized
/// sums over steps.
#[allow(clippy::too_many_arguments)]
fn backprop_chunk(
    model: &HybridModel,
    seq: &Sequence,
    start: usize,
    c0: usize,
    records: &[StepRecord],
    x: &[f64],
    v: &[f64],
    a: &[f64],
    rw: RegWeights,
    std: [f64; KIN_FEATURES],
    grad: &mut KinematicNet,
) {
    let c1 = c0 + records.len();
    let len = records.len();
    let mut gx = vec![0.0; len];
    let mut gv = vec![0.0; len];
    for p in (c0..c1).rev() {
        let i = p - c0;
        let g = start + p;
        let dd = seq.lx[g] - x[p];
        let obs_dd = seq.lx[g] - seq.x[g];
        // Direct loss terms at state p.
        gx[i] += -2.0 * rw.dx * (dd - obs_dd);
        gv[i] += 2.0 * rw.v * (v[p] - seq.v[g]);
        let rec = &records[i];
        let mut ga = 2.0 * rw.a * (a[p] - seq.a[g]) + gv[i] * DT + gx[i] * 0.5 * DT * DT;
        if rec.clipped {
            ga = 0.0;
        }
        // Transition from state p - 1.
        if p > c0 {
            let (xv, gxv) = (gv[i] + gx[i] * DT, gx[i]);
            gv[i - 1] += xv;
            gx[i - 1] += gxv;
        }
        if ga == 0.0 {
            continue;
        }
        let dxs = model.kin.backward(&rec.fwd, &rec.frames, ga, grad);
        for (off, d) in dxs.iter().enumerate() {
            let j = rec.lo + off;
            if j < c0 {
                continue;
            }
            let (g_dd, g_dv, g_v) = (d[0] / std[0], d[1] / std[1], d[2] / std[2]);
            gx[j - c0] -= g_dd;
            gv[j - c0] += g_v - g_dv;
        }
    }
}

impl Trainer {
    pub fn new(model: HybridModel, cfg: CurriculumConfig) -> Result<Self> {
        cfg.validate()?;
        model.check_dims()?;
        let optim_regime = model.regime.as_ref().map(|r| OptimState::for_params(r, cfg.adam));
        let optim_kin = OptimState::for_params(&model.kin, cfg.adam);
        Ok(Trainer { model, cfg, optim_regime, optim_kin, log: Vec::new() })
    }

    fn record(&mut self, sink: &mut Option<&mut TrainLog>, e: EpochLog) -> Result<()> {
        if let Some(l) = sink {
            l.push(e.clone())?;
        }
        self.log.push(e);
        Ok(())
    }

    fn checkpoint(&self, stage: u8) -> Result<()> {
        if let Some(dir) = &self.cfg.checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let mut ck = Checkpoint::new(self.model.clone(), &format!("stage{stage}"), Some(config_hash(&self.cfg)));
            ck.optim_regime = self.optim_regime.clone();
            ck.optim_kin = Some(self.optim_kin.clone());
            ck.save(&dir.join(format!("stage{stage}.json")))?;
        }
        Ok(())
    }

    fn require_labels(seqs: &[Sequence]) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::Data("no training sequences".into()));
        }
        if seqs.iter().any(|s| s.labels.len() != s.len()) {
            return Err(Error::Data("regime labels missing for some samples".into()));
        }
        Ok(())
    }

    /// Stage 1: regime predictor only.
    pub fn stage1(&mut self, train: &[Sequence], val: &[Sequence], mut sink: Option<&mut TrainLog>) -> Result<()> {
        if self.model.regime.is_none() {
            return Err(Error::Argument("stage 1 needs a regime-embedded model".into()));
        }
        Self::require_labels(train)?;
        let eps = self.cfg.label_smoothing;
        let all = windows(train, 0, 0, self.cfg.window_stride);
        let mut best = (f64::INFINITY, self.model.regime.clone());
        let mut stale = 0;
        for epoch in 0..self.cfg.stage1_epochs {
            let mut order = all.clone();
            order.shuffle(&mut epoch_rng(self.cfg.seed, epoch));
            let mut sum = 0.0;
            for batch in order.chunks(self.cfg.batch) {
                let model = &self.model;
                let res: Vec<(f64, RegimeNet)> = batch
                    .par_iter()
                    .map(|&(i, t)| cls_sample(model, &train[i], t, eps, true).map(|(l, _, g)| (l, g.unwrap())))
                    .collect::<Result<_>>()?;
                sum += res.iter().map(|r| r.0).sum::<f64>();
                let gru = self.model.regime.as_mut().unwrap();
                let g = reduce(gru, res.into_iter().map(|r| r.1).collect());
                adam_step(gru, &g, self.optim_regime.as_mut().unwrap())?;
            }
            let (val_loss, acc) = if val.is_empty() { (f64::NAN, f64::NAN) } else { evaluate_cls(&self.model, val, eps)? };
            self.record(
                &mut sink,
                EpochLog {
                    stage: 1,
                    phase: 1,
                    epoch,
                    train_loss: sum / order.len().max(1) as f64,
                    val_loss,
                    val_cls_acc: Some(acc),
                    lr: self.cfg.adam.lr,
                    cls_loss: None,
                    global_loss: None,
                    switch_metric: None,
                    truncations: None,
                },
            )?;
            if val.is_empty() {
                continue;
            }
            if val_loss < best.0 {
                best = (val_loss, self.model.regime.clone());
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.cfg.stage1_patience {
                    break;
                }
            }
        }
        if self.cfg.restore_best && best.0.is_finite() {
            self.model.regime = best.1;
        }
        self.checkpoint(1)
    }

    /// Seeded rollout start for sequence `i` in `epoch`.
    fn rollout_start(&self, seq: &Sequence, i: usize, epoch: usize) -> usize {
        let w = self.model.config.window;
        match self.cfg.rollout_horizon {
            Some(h) if seq.len() > w + h => {
                let mut rng = epoch_rng(self.cfg.seed ^ (i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03), epoch);
                rng.random_range(0..=seq.len() - w - h)
            }
            _ => 0,
        }
    }

    /// Closed-loop gradient over a batch of sequences; returns mean loss,
    /// truncation count and the mean gradient.
    fn global_batch(&self, seqs: &[Sequence], batch: &[usize], epoch: usize) -> Result<(f64, usize, KinematicNet)> {
        let res: Vec<(Rollout, KinematicNet)> = batch
            .par_iter()
            .map(|&i| {
                let mut g = self.model.kin.zeros_like();
                let start = self.rollout_start(&seqs[i], i, epoch);
                rollout_loss(&self.model, &seqs[i], &self.cfg, start, self.cfg.rollout_horizon, Some(&mut g)).map(|r| (r, g))
            })
            .collect::<Result<_>>()?;
        let loss = res.iter().map(|r| r.0.loss).sum::<f64>() / res.len() as f64;
        let trunc = res.iter().filter(|r| r.0.truncated).count();
        let g = reduce(&self.model.kin, res.into_iter().map(|r| r.1).collect());
        Ok((loss, trunc, g))
    }

    /// Stage 2: cross-entropy on the regime predictor plus closed-loop loss on
    /// the kinematic network.
    pub fn stage2(&mut self, train: &[Sequence], val: &[Sequence], mut sink: Option<&mut TrainLog>) -> Result<()> {
        if self.model.regime.is_none() {
            return Err(Error::Argument("stage 2 needs a regime-embedded model".into()));
        }
        Self::require_labels(train)?;
        let eps = self.cfg.label_smoothing;
        let mut initial: Option<f64> = None;
        let mut diverged = 0;
        for epoch in 0..self.cfg.stage2_epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut epoch_rng(self.cfg.seed, epoch));
            let (mut ce_sum, mut gl_sum, mut trunc, mut nb) = (0.0, 0.0, 0, 0usize);
            for batch in order.chunks(self.cfg.seq_batch) {
                let ws: Vec<(usize, usize)> = batch
                    .iter()
                    .flat_map(|&i| (0..train[i].len()).step_by(self.cfg.window_stride).map(move |t| (i, t)))
                    .collect();
                let model = &self.model;
                let res: Vec<(f64, RegimeNet)> = ws
                    .par_iter()
                    .map(|&(i, t)| cls_sample(model, &train[i], t, eps, true).map(|(l, _, g)| (l, g.unwrap())))
                    .collect::<Result<_>>()?;
                let ce = res.iter().map(|r| r.0).sum::<f64>() / res.len().max(1) as f64;
                let mut g_gru = reduce(self.model.regime.as_ref().unwrap(), res.into_iter().map(|r| r.1).collect());
                g_gru.scale(self.cfg.ce_weight);
                let (gl, tr, mut g_kin) = self.global_batch(train, batch, epoch)?;
                g_kin.scale(self.cfg.global_weight);
                adam_step(self.model.regime.as_mut().unwrap(), &g_gru, self.optim_regime.as_mut().unwrap())?;
                adam_step(&mut self.model.kin, &g_kin, &mut self.optim_kin)?;
                ce_sum += self.cfg.ce_weight * ce;
                gl_sum += self.cfg.global_weight * gl;
                trunc += tr;
                nb += 1;
            }
            let (ce, gl) = (ce_sum / nb as f64, gl_sum / nb as f64);
            let total = ce + gl;
            let (val_loss, acc) = if val.is_empty() {
                (f64::NAN, None)
            } else {
                let (vc, acc) = evaluate_cls(&self.model, val, eps)?;
                (vc + evaluate_closed_loop(&self.model, val)?, Some(acc))
            };
            self.record(
                &mut sink,
                EpochLog {
                    stage: 2,
                    phase: 2,
                    epoch,
                    train_loss: total,
                    val_loss,
                    val_cls_acc: acc,
                    lr: self.cfg.adam.lr,
                    cls_loss: Some(ce),
                    global_loss: Some(gl),
                    switch_metric: None,
                    truncations: Some(trunc),
                },
            )?;
            let init = *initial.get_or_insert(total);
            if total > self.cfg.divergence_factor * init {
                diverged += 1;
                if diverged >= self.cfg.divergence_epochs {
                    return Err(Error::Numeric(format!(
                        "stage 2 diverged: loss {total:.4} exceeded {}x the initial {init:.4} for {diverged} epochs",
                        self.cfg.divergence_factor
                    )));
                }
            } else {
                diverged = 0;
            }
        }
        self.checkpoint(2)
    }

    /// Stage 3: kinematic network only, local then closed-loop.
    pub fn stage3(&mut self, train: &[Sequence], val: &[Sequence], mut sink: Option<&mut TrainLog>) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Data("no training sequences".into()));
        }
        if self.model.kin.uses_regime() && self.cfg.dr_source == DrSource::GroundTruth {
            Self::require_labels(train)?;
        }
        if val.is_empty() {
            return Err(Error::Data("stage 3 needs validation sequences for the phase switch".into()));
        }
        let src = self.cfg.dr_source;
        // The regime predictor is frozen, so observed-state regimes are fixed.
        let weights: Vec<Vec<[f64; NUM_REGIMES]>> =
            train.iter().map(|s| observed_weights(&self.model, s, src)).collect::<Result<_>>()?;
        let local = windows(train, self.model.config.window - 1, 1, self.cfg.window_stride);
        let mut phase = if self.cfg.skip_local_phase { 2u8 } else { 1u8 };
        let mut best = (f64::INFINITY, self.model.kin.clone());
        let mut stale = 0;
        for epoch in 0..self.cfg.stage3_epochs {
            let mut switch_metric = None;
            if phase == 1 {
                let m = evaluate_local(&self.model, val, src)?;
                switch_metric = Some(m);
                if m < self.cfg.phase_switch_mse {
                    phase = 2;
                }
            }
            let (train_loss, trunc) = if phase == 1 {
                let mut order = local.clone();
                order.shuffle(&mut epoch_rng(self.cfg.seed, epoch));
                let mut sum = 0.0;
                for batch in order.chunks(self.cfg.batch) {
                    let model = &self.model;
                    let res: Vec<(f64, KinematicNet)> = batch
                        .par_iter()
                        .map(|&(i, t)| local_sample(model, &train[i], &weights[i], t, true).map(|(l, g)| (l, g.unwrap())))
                        .collect::<Result<_>>()?;
                    sum += res.iter().map(|r| r.0).sum::<f64>();
                    let g = reduce(&self.model.kin, res.into_iter().map(|r| r.1).collect());
                    adam_step(&mut self.model.kin, &g, &mut self.optim_kin)?;
                }
                (sum / order.len().max(1) as f64, None)
            } else {
                let mut order: Vec<usize> = (0..train.len()).collect();
                order.shuffle(&mut epoch_rng(self.cfg.seed, epoch));
                let (mut sum, mut tr, mut nb) = (0.0, 0, 0usize);
                for batch in order.chunks(self.cfg.seq_batch) {
                    let (l, t, g) = self.global_batch(train, batch, epoch)?;
                    adam_step(&mut self.model.kin, &g, &mut self.optim_kin)?;
                    sum += l;
                    tr += t;
                    nb += 1;
                }
                (sum / nb as f64, Some(tr))
            };
            let val_loss = if phase == 1 {
                evaluate_local(&self.model, val, src)?
            } else {
                evaluate_closed_loop(&self.model, val)?
            };
            self.record(
                &mut sink,
                EpochLog {
                    stage: 3,
                    phase,
                    epoch,
                    train_loss,
                    val_loss,
                    val_cls_acc: None,
                    lr: self.cfg.adam.lr,
                    cls_loss: None,
                    global_loss: None,
                    switch_metric,
                    truncations: trunc,
                },
            )?;
            if phase == 2 {
                if val_loss < best.0 {
                    best = (val_loss, self.model.kin.clone());
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= self.cfg.stage3_patience {
                        break;
                    }
                }
            }
        }
        if self.cfg.restore_best && best.0.is_finite() {
            self.model.kin = best.1;
        }
        self.checkpoint(3)
    }

    /// Full curriculum; plain baselines run stage 3 only.
    pub fn run(&mut self, train: &[Sequence], val: &[Sequence], mut sink: Option<&mut TrainLog>) -> Result<()> {
        if self.model.regime.is_some() {
            self.stage1(train, val, sink.as_deref_mut())?;
            self.stage2(train, val, sink.as_deref_mut())?;
        }
        self.stage3(train, val, sink)
    }
}
