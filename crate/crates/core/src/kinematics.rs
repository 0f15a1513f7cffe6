//! Discrete kinematic update shared by every closed-loop simulator.
//!
//! One step advances speed and position from a commanded acceleration:
//!
//! ```text
//! v[t+1] = v[t] + a[t+1] * dt
//! x[t+1] = x[t] + v[t] * dt + 0.5 * a[t+1] * dt^2
//! ```
//!
//! Speeds never go negative. When the command would reverse the vehicle the
//! acceleration is raised to exactly `-v[t] / dt`, so the update identity still
//! holds for the acceleration that was actually applied.

/// Result of one kinematic step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub x: f64,
    pub v: f64,
    /// Acceleration actually applied (after the no-reversing clip).
    pub a: f64,
    pub clipped: bool,
}

pub fn propagate(x: f64, v: f64, a_cmd: f64, dt: f64) -> Step {
    let floor = -v / dt;
    let (a, clipped) = if a_cmd < floor { (floor, true) } else { (a_cmd, false) };
    let v_next = if clipped { 0.0 } else { v + a * dt };
    Step {
        x: x + v * dt + 0.5 * a * dt * dt,
        v: v_next,
        a,
        clipped,
    }
}

/// Residual of the update identity, zero for any output of [`propagate`] up
/// to rounding.
pub fn identity_residual(x: f64, v: f64, x_next: f64, a_next: f64, dt: f64) -> f64 {
    x_next - x - v * dt - 0.5 * a_next * dt * dt
}
