//! Physics car-following laws: Newell's shifted-trajectory model and the
//! Intelligent Driver Model, plus genetic-algorithm IDM calibration.

mod ga;

pub use ga::{calibrate_idm, spacing_fitness, Calibration, GaSettings, IdmBounds};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::propagate;
use crate::traj::Trajectory;
use crate::DT;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewellConfig {
    /// Time delay, seconds. Rounded to the nearest multiple of DT.
    pub tau_n: f64,
    /// Minimum spacing, metres.
    pub d_n: f64,
    /// Desired free-flow speed, m/s.
    pub v0: f64,
}

impl NewellConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.tau_n, self.d_n, self.v0].iter().all(|p| p.is_finite() && *p > 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("Newell parameters must be positive: {self:?}")))
        }
    }

    /// Delay in whole steps (at least one).
    pub fn delay_steps(&self) -> usize {
        ((self.tau_n / DT).round() as usize).max(1)
    }

    /// Position the follower is allowed to reach `m` steps after a leader
    /// sample at `x_leader`, given its own position `x_self` at that time.
    pub fn target(&self, x_self: f64, x_leader: f64) -> f64 {
        let m = self.delay_steps() as f64;
        (x_self + self.v0 * m * DT).min(x_leader - self.d_n)
    }
}

/// Runs Newell's model on the DT grid behind `leader`.
///
/// The follower starts at `x0` and, until the first delayed leader sample is
/// available, travels at `min(v0, v_leader(0))`. Speeds are forward
/// differences of positions, so `x[k+1] = x[k] + v[k] * DT` exactly.
pub fn newell_simulate(leader: &Trajectory, cfg: &NewellConfig, x0: f64, horizon: f64) -> Result<Trajectory> {
    cfg.validate()?;
    let n = (horizon / DT).round() as usize + 1;
    if leader.len() < n {
        return Err(Error::Argument(format!(
            "horizon {horizon} s exceeds leader data ({} s)",
            leader.duration()
        )));
    }
    let lp = &leader.points;
    if x0 >= lp[0].x {
        return Err(Error::Argument("follower must start behind the leader".into()));
    }
    let m = cfg.delay_steps();
    let v_init = cfg.v0.min(lp[0].v);
    let mut x = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let xk = if k < m {
            x0 + v_init * k as f64 * DT
        } else {
            let xl = if k - m < lp.len() { lp[k - m].x } else { f64::INFINITY };
            cfg.target(x[k - m], xl).max(x[k - 1])
        };
        x.push(xk);
    }
    let v: Vec<f64> = (0..n).map(|k| (x[k + 1] - x[k]) / DT).collect();
    let a: Vec<f64> = (0..n).map(|k| if k == 0 { 0.0 } else { (v[k] - v[k - 1]) / DT }).collect();
    x.truncate(n);
    Ok(Trajectory::from_series(
        leader.id + 1,
        lp[0].frame,
        &x,
        &v,
        &a,
        lp[0].lane,
        Some(leader.id),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmParams {
    /// Desired speed, m/s.
    pub v0: f64,
    /// Desired time headway, s.
    pub t_hw: f64,
    /// Maximum acceleration, m/s².
    pub a_max: f64,
    /// Comfortable deceleration, m/s².
    pub b: f64,
    /// Jam spacing, m.
    pub s0: f64,
    /// Acceleration exponent.
    pub delta: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            v0: 30.0,
            t_hw: 1.5,
            a_max: 1.0,
            b: 2.0,
            s0: 2.0,
            delta: 4.0,
        }
    }
}

impl IdmParams {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.v0, self.t_hw, self.a_max, self.b, self.s0]
            .iter()
            .all(|p| p.is_finite() && *p > 0.0)
            && self.delta >= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid IDM parameters: {self:?}")))
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.v0, self.t_hw, self.a_max, self.b, self.s0, self.delta]
    }

    pub fn from_array(p: [f64; 6]) -> Self {
        IdmParams {
            v0: p[0],
            t_hw: p[1],
            a_max: p[2],
            b: p[3],
            s0: p[4],
            delta: p[5],
        }
    }

    /// Desired dynamic gap s*.
    pub fn desired_gap(&self, v: f64, dv: f64) -> f64 {
        self.s0 + (v * self.t_hw + v * dv / (2.0 * (self.a_max * self.b).sqrt())).max(0.0)
    }

    /// Equilibrium spacing at speed `v` (zero approach rate, zero acceleration).
    pub fn equilibrium_spacing(&self, v: f64) -> f64 {
        let free = 1.0 - (v / self.v0).powf(self.delta);
        (self.s0 + v * self.t_hw) / free.sqrt()
    }
}

/// IDM acceleration for speed `v`, approach rate `dv = v - v_leader` and
/// spacing `s`.
pub fn idm_accel(v: f64, dv: f64, s: f64, p: &IdmParams) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::Domain(format!("IDM spacing must be positive, got {s}")));
    }
    let s_star = p.desired_gap(v, dv);
    Ok(p.a_max * (1.0 - (v / p.v0).powf(p.delta) - (s_star / s).powi(2)))
}

/// Spacing floor applied when a simulated vehicle would touch its leader.
pub const SPACING_FLOOR: f64 = 0.1;

/// Open-loop IDM follower behind a recorded leader, starting from `(x0, v0)`.
/// `noise` holds optional additive acceleration perturbations per step.
pub fn idm_follow(
    leader: &Trajectory,
    p: &IdmParams,
    x0: f64,
    v0: f64,
    noise: Option<&[f64]>,
) -> Result<Trajectory> {
    p.validate()?;
    let n = leader.len();
    let mut x = vec![x0];
    let mut v = vec![v0];
    let mut a = vec![0.0];
    for k in 0..n - 1 {
        let l = &leader.points[k];
        let s = (l.x - x[k]).max(SPACING_FLOOR);
        let mut acc = idm_accel(v[k], v[k] - l.v, s, p)?;
        if let Some(eps) = noise {
            acc += eps[k];
        }
        let step = propagate(x[k], v[k], acc, DT);
        x.push(step.x);
        v.push(step.v);
        a.push(step.a);
    }
    let lp = &leader.points[0];
    Ok(Trajectory::from_series(leader.id + 1, lp.frame, &x, &v, &a, lp.lane, Some(leader.id)))
}
