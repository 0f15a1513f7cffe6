//! Physics-driven synthetic leader/follower scenarios with ground-truth
//! regimes.
//!
//! The leader integrates a piecewise-constant acceleration schedule; each
//! follower reacts to the vehicle directly ahead of it through one of the
//! physics laws. Regime labels are known by construction:
//!
//! * leader: from the schedule (the applied acceleration of each step);
//! * Newell followers: the leader's labels delayed by `k * tau_n` for the
//!   `k`-th follower, since the congested branch replays the leader;
//! * other laws: from the follower's own applied acceleration.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::propagate;
use crate::physics::{idm_accel, IdmParams, NewellConfig, SPACING_FLOOR};
use crate::regime::{ClassifierConfig, DrivingRegime};
use crate::traj::{Trajectory, TrajectorySet, VehicleId};
use crate::DT;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub duration_s: f64,
    pub accel_mps2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderSpec {
    pub initial_speed: f64,
    #[serde(default)]
    pub initial_position: f64,
    pub schedule: Vec<ScheduleStep>,
}

impl LeaderSpec {
    /// Cruise, brake to a standstill, wait, accelerate back, cruise.
    pub fn stop_and_go(speed: f64, decel: f64, accel: f64, cruise_s: f64, hold_s: f64) -> Self {
        LeaderSpec {
            initial_speed: speed,
            initial_position: 0.0,
            schedule: vec![
                ScheduleStep { duration_s: cruise_s, accel_mps2: 0.0 },
                ScheduleStep { duration_s: speed / decel, accel_mps2: -decel },
                ScheduleStep { duration_s: hold_s, accel_mps2: 0.0 },
                ScheduleStep { duration_s: speed / accel, accel_mps2: accel },
                ScheduleStep { duration_s: cruise_s, accel_mps2: 0.0 },
            ],
        }
    }

    /// Random cruise, brake and accelerate phases of 2-6 s covering at least
    /// `duration_s`. Speed stays within 2-20 m/s.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, duration_s: f64) -> Self {
        let v0: f64 = rng.random_range(8.0..16.0);
        let mut v = v0;
        let mut t = 0.0;
        let mut schedule = Vec::new();
        while t < duration_s {
            let d: f64 = (rng.random_range(2.0..6.0_f64) * 10.0).round() / 10.0;
            let mut a: f64 = match rng.random_range(0..3) {
                0 => 0.0,
                1 => rng.random_range(-2.0..-0.8),
                _ => rng.random_range(0.8..2.0),
            };
            if v + a * d < 2.0 || v + a * d > 20.0 {
                a = 0.0;
            }
            v += a * d;
            t += d;
            schedule.push(ScheduleStep { duration_s: d, accel_mps2: a });
        }
        LeaderSpec { initial_speed: v0, initial_position: 0.0, schedule }
    }

    pub fn duration(&self) -> f64 {
        self.schedule.iter().map(|s| s.duration_s).sum()
    }

    /// Number of steps in the schedule.
    pub fn steps(&self) -> usize {
        self.schedule.iter().map(|s| (s.duration_s / DT).round() as usize).sum()
    }
}

/// Per-regime linear response gains, `a = k_v * dv + k_s * (s - s0 - T * v)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub k_v: f64,
    pub k_s: f64,
}

/// Follower whose response gains switch with its current regime. The regime
/// is a hysteretic mode driven by the relative speed `dv = v_leader - v`:
/// following switches to accelerating above `enter_dv` and to decelerating
/// below `-enter_dv`; accelerating returns to following once `dv < exit_dv`,
/// decelerating once `dv > -exit_dv`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeGainLaw {
    pub s0: f64,
    pub t_hw: f64,
    pub enter_dv: f64,
    pub exit_dv: f64,
    pub following: Gains,
    pub accelerating: Gains,
    pub decelerating: Gains,
    /// Bound on |a|, m/s².
    pub a_limit: f64,
}

impl RegimeGainLaw {
    pub fn gains(&self, regime: DrivingRegime) -> Gains {
        match regime {
            DrivingRegime::A | DrivingRegime::Fa => self.accelerating,
            DrivingRegime::D => self.decelerating,
            _ => self.following,
        }
    }

    pub fn next_regime(&self, current: DrivingRegime, dv: f64) -> DrivingRegime {
        use DrivingRegime::*;
        match current {
            A if dv >= self.exit_dv => A,
            D if dv <= -self.exit_dv => D,
            _ if dv > self.enter_dv => A,
            _ if dv < -self.enter_dv => D,
            _ => F,
        }
    }

    pub fn accel(&self, regime: DrivingRegime, v: f64, dv: f64, s: f64) -> f64 {
        let g = self.gains(regime);
        (g.k_v * dv + g.k_s * (s - self.s0 - self.t_hw * v)).clamp(-self.a_limit, self.a_limit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FollowerLaw {
    Idm(IdmParams),
    Newell(NewellConfig),
    RegimeGain(RegimeGainLaw),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub leader: LeaderSpec,
    pub follower_count: usize,
    pub law: FollowerLaw,
    /// Initial spacing behind the vehicle ahead, per follower. A single value
    /// applies to all followers.
    pub initial_spacings: Vec<f64>,
    /// Initial follower speed; defaults to the leader's initial speed.
    #[serde(default)]
    pub initial_follower_speed: Option<f64>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lane")]
    pub lane: i32,
    #[serde(default = "default_leader_id")]
    pub leader_id: VehicleId,
}

fn default_lane() -> i32 {
    1
}

fn default_leader_id() -> VehicleId {
    1
}

impl ScenarioConfig {
    pub fn spacing(&self, k: usize) -> f64 {
        if self.initial_spacings.len() == 1 {
            self.initial_spacings[0]
        } else {
            self.initial_spacings[k]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.leader.schedule.is_empty() {
            return Err(Error::Config("leader schedule is empty".into()));
        }
        if self.leader.schedule.iter().any(|s| !(s.duration_s > 0.0) || !s.accel_mps2.is_finite()) {
            return Err(Error::Config("schedule steps need positive durations and finite accelerations".into()));
        }
        if self.leader.initial_speed < 0.0 {
            return Err(Error::Config("leader initial speed must be non-negative".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise sigma must be non-negative".into()));
        }
        if self.follower_count > 0
            && self.initial_spacings.len() != 1
            && self.initial_spacings.len() != self.follower_count
        {
            return Err(Error::Config("need one initial spacing or one per follower".into()));
        }
        for k in 0..self.follower_count {
            if !(self.spacing(k) > 0.0) {
                return Err(Error::Config(format!(
                    "follower {k} starts with non-positive spacing {}",
                    self.spacing(k)
                )));
            }
        }
        match &self.law {
            FollowerLaw::Idm(p) => p.validate(),
            FollowerLaw::Newell(c) => c.validate(),
            FollowerLaw::RegimeGain(law) => {
                if law.enter_dv > law.exit_dv && law.a_limit > 0.0 {
                    Ok(())
                } else {
                    Err(Error::Config("regime-gain law needs enter_dv > exit_dv and a positive a_limit".into()))
                }
            }
        }
    }
}

/// Generated trajectories plus ground-truth regimes per vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub set: TrajectorySet,
    pub labels: BTreeMap<VehicleId, Vec<DrivingRegime>>,
}

/// Regime of a step with applied acceleration `a` ending at speed `v`.
pub fn regime_of_accel(a: f64, v: f64, cfg: &ClassifierConfig) -> DrivingRegime {
    if a.abs() <= cfg.omega0 {
        if v < cfg.v_stop {
            DrivingRegime::S
        } else {
            DrivingRegime::F
        }
    } else if a > 0.0 {
        DrivingRegime::A
    } else {
        DrivingRegime::D
    }
}

/// Sample `k` takes the regime of the step that leaves it (`a[k+1]`), the last
/// sample that of the step that reached it.
fn labels_from_accels(traj: &Trajectory) -> Vec<DrivingRegime> {
    let cfg = ClassifierConfig::default();
    let n = traj.len();
    (0..n)
        .map(|k| {
            let j = if k + 1 < n { k + 1 } else { k };
            let p = &traj.points[j];
            regime_of_accel(p.a, traj.points[k].v.max(p.v), &cfg)
        })
        .collect()
}

fn integrate_leader(spec: &LeaderSpec, id: VehicleId, lane: i32) -> Trajectory {
    let mut x = vec![spec.initial_position];
    let mut v = vec![spec.initial_speed];
    let mut a = vec![0.0];
    for step in &spec.schedule {
        for _ in 0..(step.duration_s / DT).round() as usize {
            let k = x.len() - 1;
            let s = propagate(x[k], v[k], step.accel_mps2, DT);
            x.push(s.x);
            v.push(s.v);
            a.push(s.a);
        }
    }
    Trajectory::from_series(id, 0, &x, &v, &a, lane, None)
}

pub fn generate_synthetic(cfg: &ScenarioConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let leader = integrate_leader(&cfg.leader, cfg.leader_id, cfg.lane);
    let leader_labels = labels_from_accels(&leader);
    let n = leader.len();

    let mut labels = BTreeMap::new();
    labels.insert(leader.id, leader_labels.clone());
    let mut vehicles = vec![leader];
    let v_init = cfg.initial_follower_speed.unwrap_or(cfg.leader.initial_speed);

    for k in 0..cfg.follower_count {
        let ahead = &vehicles[k];
        let id = ahead.id + 1;
        let x0 = ahead.points[0].x - cfg.spacing(k);
        let noise: Vec<f64> = (0..n).map(|_| cfg.noise_sigma * normal.sample(&mut rng)).collect();
        let (traj, truth) = match &cfg.law {
            FollowerLaw::Idm(p) => {
                let t = follow_idm(ahead, p, x0, v_init, &noise, id)?;
                let l = labels_from_accels(&t);
                (t, l)
            }
            FollowerLaw::Newell(c) => {
                let t = follow_newell(ahead, c, x0, v_init, &noise, id);
                let shift = (k + 1) * c.delay_steps();
                let l = (0..n)
                    .map(|i| if i >= shift { leader_labels[i - shift] } else { leader_labels[0] })
                    .collect();
                (t, l)
            }
            FollowerLaw::RegimeGain(law) => follow_regime_gain(ahead, law, x0, v_init, &noise, id),
        };
        labels.insert(id, truth);
        vehicles.push(traj);
    }
    Ok(SyntheticData { set: TrajectorySet::new(vehicles), labels })
}

fn follow_idm(ahead: &Trajectory, p: &IdmParams, x0: f64, v0: f64, noise: &[f64], id: VehicleId) -> Result<Trajectory> {
    let n = ahead.len();
    let (mut x, mut v, mut a) = (vec![x0], vec![v0], vec![0.0]);
    for k in 0..n - 1 {
        let l = &ahead.points[k];
        let s = (l.x - x[k]).max(SPACING_FLOOR);
        let acc = idm_accel(v[k], v[k] - l.v, s, p)? + noise[k];
        let st = propagate(x[k], v[k], acc, DT);
        x.push(st.x);
        v.push(st.v);
        a.push(st.a);
    }
    Ok(Trajectory::from_series(id, 0, &x, &v, &a, ahead.points[0].lane, Some(ahead.id)))
}

/// Returns the trajectory and the mode at every sample; the mode at sample
/// `k` sets the acceleration applied from `k` to `k + 1`.
fn follow_regime_gain(
    ahead: &Trajectory,
    law: &RegimeGainLaw,
    x0: f64,
    v0: f64,
    noise: &[f64],
    id: VehicleId,
) -> (Trajectory, Vec<DrivingRegime>) {
    let n = ahead.len();
    let (mut x, mut v, mut a) = (vec![x0], vec![v0], vec![0.0]);
    let mut mode = DrivingRegime::F;
    let mut modes = Vec::with_capacity(n);
    for k in 0..n {
        let l = &ahead.points[k];
        mode = law.next_regime(mode, l.v - v[k]);
        modes.push(mode);
        if k + 1 == n {
            break;
        }
        let s = (l.x - x[k]).max(SPACING_FLOOR);
        let acc = law.accel(mode, v[k], l.v - v[k], s) + noise[k];
        let st = propagate(x[k], v[k], acc, DT);
        x.push(st.x);
        v.push(st.v);
        a.push(st.a);
    }
    (Trajectory::from_series(id, 0, &x, &v, &a, ahead.points[0].lane, Some(ahead.id)), modes)
}

/// Newell follower on the grid with optional positional jitter on the
/// delayed target (`noise[k] * DT` metres).
fn follow_newell(ahead: &Trajectory, c: &NewellConfig, x0: f64, v0: f64, noise: &[f64], id: VehicleId) -> Trajectory {
    let n = ahead.len();
    let m = c.delay_steps();
    let v_init = c.v0.min(v0);
    let mut x: Vec<f64> = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let xk = if k < m {
            x0 + v_init * k as f64 * DT
        } else {
            let xl = if k - m < n { ahead.points[k - m].x } else { f64::INFINITY };
            let jitter = if k - 1 < n { noise[k - 1] * DT } else { 0.0 };
            (c.target(x[k - m], xl) + jitter).max(x[k - 1])
        };
        x.push(xk);
    }
    let v: Vec<f64> = (0..n).map(|k| (x[k + 1] - x[k]) / DT).collect();
    let a: Vec<f64> = (0..n).map(|k| if k == 0 { 0.0 } else { (v[k] - v[k - 1]) / DT }).collect();
    x.truncate(n);
    Trajectory::from_series(id, 0, &x, &v, &a, ahead.points[0].lane, Some(ahead.id))
}
