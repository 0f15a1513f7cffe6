//! Closed-loop simulation of followers under any model, platoon runs,
//! MSE evaluation and plot-ready exports.
//!
//! Every rollout seeds the first `WARMUP` samples from observation and then
//! evolves the follower from predicted accelerations with the shared
//! kinematic update. The leader is replayed from data, or, in a platoon, is
//! the previously simulated vehicle.

use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::propagate;
use crate::nn::model::{argmax, regime_input, HybridModel, KinFrame, KIN_FEATURES};
use crate::regime::NUM_REGIMES;
use crate::physics::{idm_accel, IdmParams, NewellConfig, SPACING_FLOOR};
use crate::regime::{ClassifierConfig, DrivingRegime};
use crate::synth::regime_of_accel;
use crate::traj::{LeaderFollowerPair, Trajectory, VehicleId};
use crate::DT;

/// Observed history steps seeding each rollout.
pub const WARMUP: usize = 10;

/// A car-following model usable in closed loop.
#[derive(Debug, Clone)]
pub enum ModelHandle {
    /// Recurrent network (regime-embedded or plain baseline).
    Neural(Arc<HybridModel>),
    Idm(IdmParams),
    Newell(NewellConfig),
    /// Replays the follower's observed accelerations; a test oracle.
    Replay,
}

impl ModelHandle {
    pub fn name(&self) -> &'static str {
        match self {
            ModelHandle::Neural(m) => m.config.kind.name(),
            ModelHandle::Idm(_) => "idm",
            ModelHandle::Newell(_) => "newell",
            ModelHandle::Replay => "replay",
        }
    }

    /// History length required before the first prediction.
    pub fn warmup(&self) -> usize {
        match self {
            ModelHandle::Neural(m) => m.config.window,
            _ => WARMUP,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SimEvent {
    /// Spacing reached zero or below; inputs and series use the floor.
    Collision { step: usize, spacing: f64 },
    /// Commanded acceleration would have reversed the vehicle.
    VelocityClip { step: usize },
}

/// Kinematic series of one vehicle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VehicleSeries {
    pub a: Vec<f64>,
    pub v: Vec<f64>,
    pub x: Vec<f64>,
    /// Spacing to the vehicle ahead.
    pub spacing: Vec<f64>,
    /// Relative speed, leader minus follower.
    pub rel_speed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub vehicle: VehicleId,
    pub model: String,
    pub t: Vec<f64>,
    pub sim: VehicleSeries,
    pub obs: VehicleSeries,
    /// Regimes predicted along the rollout, for regime-embedded models.
    pub regimes: Option<Vec<DrivingRegime>>,
    /// First simulated sample; earlier samples are observed warm-up.
    pub warmup: usize,
    pub mse_a: f64,
    pub mse_v: f64,
    /// Position MSE (the table-facing metric).
    pub mse_x: f64,
    pub mse_spacing: f64,
    pub events: Vec<SimEvent>,
}

impl SimResult {
    pub fn collisions(&self) -> usize {
        self.events.iter().filter(|e| matches!(e, SimEvent::Collision { .. })).count()
    }
}

/// Mean squared error of two equal-length series.
pub fn mse(sim: &[f64], obs: &[f64]) -> Result<f64> {
    if sim.len() != obs.len() {
        return Err(Error::Argument(format!(
            "series length mismatch: simulated {} vs observed {}",
            sim.len(),
            obs.len()
        )));
    }
    if sim.is_empty() {
        return Err(Error::Argument("MSE of an empty series".into()));
    }
    Ok(sim.iter().zip(obs).map(|(s, o)| (s - o) * (s - o)).sum::<f64>() / sim.len() as f64)
}

/// Acceleration, speed and position series of one vehicle.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MopSeries {
    pub a: Vec<f64>,
    pub v: Vec<f64>,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MopMse {
    pub a: f64,
    pub v: f64,
    pub x: f64,
}

/// Mean over vehicles of the per-vehicle mean squared error, per quantity.
pub fn evaluate_mse(sim: &[MopSeries], obs: &[MopSeries]) -> Result<MopMse> {
    if sim.len() != obs.len() {
        return Err(Error::Argument(format!("{} simulated vs {} observed vehicles", sim.len(), obs.len())));
    }
    if sim.is_empty() {
        return Err(Error::Argument("no vehicles to evaluate".into()));
    }
    let mut out = MopMse::default();
    for (s, o) in sim.iter().zip(obs) {
        out.a += mse(&s.a, &o.a)?;
        out.v += mse(&s.v, &o.v)?;
        out.x += mse(&s.x, &o.x)?;
    }
    let n = sim.len() as f64;
    Ok(MopMse { a: out.a / n, v: out.v / n, x: out.x / n })
}

/// Aggregate of simulation results: mean of per-vehicle MSEs.
pub fn aggregate(results: &[SimResult]) -> MopMse {
    if results.is_empty() {
        return MopMse::default();
    }
    let n = results.len() as f64;
    MopMse {
        a: results.iter().map(|r| r.mse_a).sum::<f64>() / n,
        v: results.iter().map(|r| r.mse_v).sum::<f64>() / n,
        x: results.iter().map(|r| r.mse_x).sum::<f64>() / n,
    }
}

/// Predicts the regime of the latest step of `scaled` from the window ending
/// there. Each window step carries the regime of the step before it, so
/// `lagged` must hold one regime per earlier step; step 0 uses `initial`.
/// Returns the argmax regime and the weights fed to the embedding (the
/// one-hot, or the class probabilities for soft-regime models).
pub fn regime_step(
    model: &HybridModel,
    scaled: &[[f64; KIN_FEATURES]],
    lagged: &[DrivingRegime],
    initial: DrivingRegime,
) -> Result<(DrivingRegime, [f64; NUM_REGIMES])> {
    let gru = model
        .regime
        .as_ref()
        .ok_or_else(|| Error::Argument("model has no regime predictor".into()))?;
    let t = scaled.len() - 1;
    debug_assert_eq!(lagged.len(), t);
    let lo = (t + 1).saturating_sub(model.config.window);
    let window: Vec<Vec<f64>> = (lo..=t)
        .map(|j| regime_input(scaled[j], if j == 0 { initial } else { lagged[j - 1] }))
        .collect();
    let p = gru.forward(&window)?.probs;
    let r = DrivingRegime::from_index(argmax(&p)).expect("six classes");
    let w = if model.config.soft_regime {
        std::array::from_fn(|k| p[k])
    } else {
        r.one_hot()
    };
    Ok((r, w))
}

/// Runs the regime predictor autoregressively over a whole scaled sequence.
pub fn track_regimes(
    model: &HybridModel,
    scaled: &[[f64; KIN_FEATURES]],
    initial: DrivingRegime,
) -> Result<(Vec<DrivingRegime>, Vec<[f64; NUM_REGIMES]>)> {
    let mut regimes = Vec::with_capacity(scaled.len());
    let mut weights = Vec::with_capacity(scaled.len());
    for t in 0..scaled.len() {
        let (r, w) = regime_step(model, &scaled[..=t], &regimes, initial)?;
        regimes.push(r);
        weights.push(w);
    }
    Ok((regimes, weights))
}

/// Kinematic-network window ending at step `t`. `weights` is empty for
/// regime-blind models.
pub fn kin_window(
    model: &HybridModel,
    scaled: &[[f64; KIN_FEATURES]],
    weights: &[[f64; NUM_REGIMES]],
    t: usize,
) -> Vec<KinFrame> {
    let lo = (t + 1).saturating_sub(model.config.window);
    (lo..=t)
        .map(|j| match weights.get(j) {
            Some(w) if model.kin.uses_regime() => KinFrame { x: scaled[j], dr: *w },
            _ => KinFrame::blind(scaled[j]),
        })
        .collect()
}

/// Regime assumed before the first observed step.
pub fn initial_regime(a0: f64, v0: f64) -> DrivingRegime {
    regime_of_accel(a0, v0, &ClassifierConfig::default())
}

/// Per-model state carried along a rollout.
enum Stepper<'a> {
    Neural {
        model: &'a HybridModel,
        scaled: Vec<[f64; KIN_FEATURES]>,
        regimes: Vec<DrivingRegime>,
        weights: Vec<[f64; NUM_REGIMES]>,
    },
    Idm(&'a IdmParams),
    Newell(&'a NewellConfig),
    Replay(&'a [f64]),
}

/// Leader and follower state visible to a model at step `t`.
struct Ctx<'a> {
    lx: &'a [f64],
    lv: &'a [f64],
    x: &'a [f64],
    v: &'a [f64],
    spacing: &'a [f64],
}

impl Stepper<'_> {
    /// Records the state at step `t` (after it has been appended to `ctx`).
    fn observe(&mut self, t: usize, ctx: &Ctx, initial_regime: DrivingRegime) -> Result<()> {
        if let Stepper::Neural { model, scaled, regimes, weights } = self {
            let raw = [ctx.spacing[t], ctx.lv[t] - ctx.v[t], ctx.v[t]];
            scaled.push(model.scaler.apply(raw));
            if model.regime.is_some() {
                let (r, w) = regime_step(model, scaled, regimes, initial_regime)?;
                regimes.push(r);
                weights.push(w);
            }
        }
        Ok(())
    }

    /// Acceleration command for step `t + 1` given history through `t`.
    fn accel(&self, t: usize, ctx: &Ctx) -> Result<f64> {
        match self {
            Stepper::Neural { model, scaled, weights, .. } => {
                let frames = kin_window(model, scaled, weights, t);
                Ok(model.kin.forward(&frames)?.y)
            }
            Stepper::Idm(p) => idm_accel(ctx.v[t], ctx.v[t] - ctx.lv[t], ctx.spacing[t], p),
            Stepper::Newell(c) => {
                let m = c.delay_steps();
                if t + 1 < m {
                    return Ok(0.0);
                }
                let k = t + 1 - m;
                let target = c.target(ctx.x[k], ctx.lx[k]).max(ctx.x[t]);
                Ok(2.0 * (target - ctx.x[t] - ctx.v[t] * DT) / (DT * DT))
            }
            Stepper::Replay(a) => Ok(a[t + 1]),
        }
    }
}

/// Core rollout: `leader` gives `(x, v)` per step; `observed` is the
/// follower's recorded trajectory over the same steps.
fn rollout(lx: &[f64], lv: &[f64], observed: &Trajectory, model: &ModelHandle) -> Result<SimResult> {
    let n = observed.len();
    if lx.len() != n || lv.len() != n {
        return Err(Error::Argument("leader and follower series differ in length".into()));
    }
    let warm = model.warmup().min(n);
    if n < warm + 1 || warm == 0 {
        return Err(Error::Argument(format!("pair of {n} samples is too short for a {warm}-step warm-up")));
    }
    let obs_a = observed.accels();
    let obs_v = observed.speeds();
    let obs_x = observed.positions();
    let mut stepper = match model {
        ModelHandle::Neural(m) => Stepper::Neural {
            model: m.as_ref(),
            scaled: Vec::with_capacity(n),
            regimes: Vec::with_capacity(n),
            weights: Vec::with_capacity(n),
        },
        ModelHandle::Idm(p) => {
            p.validate()?;
            Stepper::Idm(p)
        }
        ModelHandle::Newell(c) => {
            c.validate()?;
            Stepper::Newell(c)
        }
        ModelHandle::Replay => Stepper::Replay(&obs_a),
    };
    let dr0 = initial_regime(obs_a[0], obs_v[0]);

    let mut a = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    let mut x = Vec::with_capacity(n);
    let mut spacing = Vec::with_capacity(n);
    let mut events = Vec::new();
    for t in 0..n {
        if t < warm {
            a.push(obs_a[t]);
            v.push(obs_v[t]);
            x.push(obs_x[t]);
        } else {
            let ctx = Ctx { lx, lv, x: &x, v: &v, spacing: &spacing };
            let cmd = stepper.accel(t - 1, &ctx)?;
            if !cmd.is_finite() {
                return Err(Error::Numeric(format!("{} produced a non-finite acceleration", model.name())));
            }
            let st = propagate(x[t - 1], v[t - 1], cmd, DT);
            if st.clipped {
                events.push(SimEvent::VelocityClip { step: t });
            }
            a.push(st.a);
            v.push(st.v);
            x.push(st.x);
        }
        let raw = lx[t] - x[t];
        if raw <= 0.0 && t >= warm {
            events.push(SimEvent::Collision { step: t, spacing: raw });
        }
        spacing.push(if raw <= 0.0 { SPACING_FLOOR } else { raw });
        let ctx = Ctx { lx, lv, x: &x, v: &v, spacing: &spacing };
        stepper.observe(t, &ctx, dr0)?;
    }

    let regimes = match stepper {
        Stepper::Neural { model, regimes, .. } if model.regime.is_some() => Some(regimes),
        _ => None,
    };
    let obs_spacing: Vec<f64> = lx.iter().zip(&obs_x).map(|(l, f)| l - f).collect();
    let rel = |vf: &[f64]| -> Vec<f64> { lv.iter().zip(vf).map(|(l, f)| l - f).collect() };
    let sim = VehicleSeries { rel_speed: rel(&v), a, v, x, spacing };
    let obs = VehicleSeries {
        rel_speed: rel(&obs_v),
        a: obs_a,
        v: obs_v,
        x: obs_x,
        spacing: obs_spacing,
    };
    let h = warm..n;
    Ok(SimResult {
        vehicle: observed.id,
        model: model.name().to_string(),
        t: observed.times(),
        mse_a: mse(&sim.a[h.clone()], &obs.a[h.clone()])?,
        mse_v: mse(&sim.v[h.clone()], &obs.v[h.clone()])?,
        mse_x: mse(&sim.x[h.clone()], &obs.x[h.clone()])?,
        mse_spacing: mse(&sim.spacing[h.clone()], &obs.spacing[h])?,
        sim,
        obs,
        regimes,
        warmup: warm,
        events,
    })
}

/// Simulates the follower of `pair` behind its recorded leader.
pub fn closed_loop_simulate(pair: &LeaderFollowerPair, model: &ModelHandle) -> Result<SimResult> {
    let lx = pair.leader.positions();
    let lv = pair.leader.speeds();
    rollout(&lx, &lv, &pair.follower, model)
}

/// One platoon position: its model and its observed trajectory, which seeds
/// the warm-up and serves as the error reference.
#[derive(Debug, Clone)]
pub struct PlatoonMember {
    pub model: ModelHandle,
    pub observed: Trajectory,
}

/// Simulates a platoon where vehicle `n` follows simulated vehicle `n - 1`
/// and the first follower follows the recorded `lead`. Results are in
/// platoon order.
pub fn platoon_simulate(lead: &Trajectory, followers: &[PlatoonMember]) -> Result<Vec<SimResult>> {
    let mut lx = lead.positions();
    let mut lv = lead.speeds();
    let mut out = Vec::with_capacity(followers.len());
    for (k, member) in followers.iter().enumerate() {
        if member.observed.len() != lx.len() {
            return Err(Error::Argument(format!(
                "platoon member {k} covers {} samples, leader {}",
                member.observed.len(),
                lx.len()
            )));
        }
        if !(lx[0] - member.observed.points[0].x > 0.0) {
            return Err(Error::Argument(format!("platoon member {k} must start behind its leader")));
        }
        let r = rollout(&lx, &lv, &member.observed, &member.model)?;
        lx = r.sim.x.clone();
        lv = r.sim.v.clone();
        out.push(r);
    }
    Ok(out)
}

pub const PHASE_HEADER: &str = "vehicle,t,dv_obs,dd_obs,v_obs,dv_sim,dd_sim,v_sim";

/// Writes `(t, dv, dd, v)` rows per vehicle, observed and simulated side by side.
pub fn export_phase_data<W: Write>(results: &[SimResult], mut w: W) -> Result<()> {
    writeln!(w, "{PHASE_HEADER}")?;
    for r in results {
        for k in 0..r.t.len() {
            writeln!(
                w,
                "{},{:.1},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.vehicle,
                r.t[k],
                r.obs.rel_speed[k],
                r.obs.spacing[k],
                r.obs.v[k],
                r.sim.rel_speed[k],
                r.sim.spacing[k],
                r.sim.v[k]
            )?;
        }
    }
    Ok(())
}

pub const TRAJECTORY_HEADER: &str = "t,vehicle,x,v,a,error_x";

/// Simulated trajectories for space-time plots, with position error.
pub fn export_trajectories<W: Write>(results: &[SimResult], mut w: W) -> Result<()> {
    writeln!(w, "{TRAJECTORY_HEADER}")?;
    for r in results {
        for k in 0..r.t.len() {
            writeln!(
                w,
                "{:.1},{},{:.6},{:.6},{:.6},{:.6}",
                r.t[k],
                r.vehicle,
                r.sim.x[k],
                r.sim.v[k],
                r.sim.a[k],
                r.sim.x[k] - r.obs.x[k]
            )?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleMetrics {
    pub vehicle: VehicleId,
    pub mse_a: f64,
    pub mse_v: f64,
    pub mse_x: f64,
    pub mse_spacing: f64,
    pub collisions: usize,
}

impl From<&SimResult> for VehicleMetrics {
    fn from(r: &SimResult) -> Self {
        VehicleMetrics {
            vehicle: r.vehicle,
            mse_a: r.mse_a,
            mse_v: r.mse_v,
            mse_x: r.mse_x,
            mse_spacing: r.mse_spacing,
            collisions: r.collisions(),
        }
    }
}

/// Metrics of one model over a set of vehicles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResults {
    pub config_hash: String,
    pub model: String,
    pub vehicles: Vec<VehicleMetrics>,
    pub aggregate: MopMse,
}

impl ModelResults {
    pub fn new(model: &str, config_hash: &str, results: &[SimResult]) -> Self {
        ModelResults {
            config_hash: config_hash.to_string(),
            model: model.to_string(),
            vehicles: results.iter().map(VehicleMetrics::from).collect(),
            aggregate: aggregate(results),
        }
    }
}

/// One row of the model comparison table. Improvements are the relative
/// error reduction of the reference model over this row's model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub mse_a: f64,
    pub improvement_a: Option<f64>,
    pub mse_v: f64,
    pub improvement_v: Option<f64>,
    pub mse_x: f64,
    pub improvement_x: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub config_hash: String,
    pub reference: String,
    pub rows: Vec<TableRow>,
}

/// Builds the comparison table; refuses inputs produced under different
/// configuration hashes.
pub fn comparison_table(models: &[ModelResults], reference: &str) -> Result<ComparisonTable> {
    let first = models.first().ok_or_else(|| Error::Argument("no model results to compare".into()))?;
    if let Some(m) = models.iter().find(|m| m.config_hash != first.config_hash) {
        return Err(Error::Data(format!(
            "config hash mismatch: {} has {}, {} has {}",
            first.model, first.config_hash, m.model, m.config_hash
        )));
    }
    let ref_agg = models
        .iter()
        .find(|m| m.model == reference)
        .ok_or_else(|| Error::Argument(format!("reference model {reference} not among results")))?
        .aggregate;
    let improv = |base: f64, r: f64| if base > 0.0 { Some(100.0 * (base - r) / base) } else { None };
    let rows = models
        .iter()
        .map(|m| {
            let is_ref = m.model == reference;
            TableRow {
                model: m.model.clone(),
                mse_a: m.aggregate.a,
                improvement_a: if is_ref { None } else { improv(m.aggregate.a, ref_agg.a) },
                mse_v: m.aggregate.v,
                improvement_v: if is_ref { None } else { improv(m.aggregate.v, ref_agg.v) },
                mse_x: m.aggregate.x,
                improvement_x: if is_ref { None } else { improv(m.aggregate.x, ref_agg.x) },
            }
        })
        .collect();
    Ok(ComparisonTable { config_hash: first.config_hash.clone(), reference: reference.to_string(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::idm_follow;

    fn leader(speeds: &[f64], x0: f64) -> Trajectory {
        let mut x = vec![x0];
        let mut a = vec![0.0];
        for k in 1..speeds.len() {
            let acc = (speeds[k] - speeds[k - 1]) / DT;
            let st = propagate(x[k - 1], speeds[k - 1], acc, DT);
            x.push(st.x);
            a.push(acc);
        }
        Trajectory::from_series(1, 0, &x, speeds, &a, 1, None)
    }

    #[test]
    fn replay_oracle_is_exact() {
        let speeds: Vec<f64> = (0..200).map(|k| 12.0 + 3.0 * (k as f64 * 0.05).sin()).collect();
        let l = leader(&speeds, 100.0);
        let f = idm_follow(&l, &IdmParams::default(), 70.0, 12.0, None).unwrap();
        let pair = LeaderFollowerPair::new(l, f).unwrap();
        let r = closed_loop_simulate(&pair, &ModelHandle::Replay).unwrap();
        assert!(r.mse_a < 1e-12 && r.mse_v < 1e-12 && r.mse_x < 1e-12);
    }

    #[test]
    fn idm_self_consistency() {
        let speeds: Vec<f64> = (0..300).map(|k| 15.0 + 4.0 * (k as f64 * 0.03).sin()).collect();
        let l = leader(&speeds, 100.0);
        let p = IdmParams::default();
        let f = idm_follow(&l, &p, 60.0, 15.0, None).unwrap();
        let pair = LeaderFollowerPair::new(l, f).unwrap();
        let r = closed_loop_simulate(&pair, &ModelHandle::Idm(p)).unwrap();
        assert!(r.mse_x < 0.01, "mse_x {}", r.mse_x);
    }

    #[test]
    fn newell_constant_speed_steady_state() {
        let cfg = NewellConfig { tau_n: 1.2, d_n: 8.0, v0: 30.0 };
        let l = leader(&[15.0; 400], 100.0);
        let f = idm_follow(&l, &IdmParams::default(), 60.0, 15.0, None).unwrap();
        let pair = LeaderFollowerPair::new(l, f).unwrap();
        let r = closed_loop_simulate(&pair, &ModelHandle::Newell(cfg)).unwrap();
        let s = *r.sim.spacing.last().unwrap();
        assert!((s - (cfg.d_n + 15.0 * 1.2)).abs() < 0.1, "spacing {s}");
    }

    #[test]
    fn mse_formula() {
        let obs = MopSeries { a: vec![0.0; 5], v: vec![1.0; 5], x: vec![2.0; 5] };
        let sim = MopSeries {
            a: vec![2.0; 5],
            v: vec![3.0; 5],
            x: vec![4.0; 5],
        };
        let m = evaluate_mse(&[sim], std::slice::from_ref(&obs)).unwrap();
        assert_eq!(m, MopMse { a: 4.0, v: 4.0, x: 4.0 });
        assert_eq!(evaluate_mse(std::slice::from_ref(&obs), std::slice::from_ref(&obs)).unwrap(), MopMse::default());
    }

    #[test]
    fn empty_platoon() {
        let l = leader(&[10.0; 50], 0.0);
        assert!(platoon_simulate(&l, &[]).unwrap().is_empty());
    }
}
