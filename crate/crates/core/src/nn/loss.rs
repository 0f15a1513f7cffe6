//! Classification and regression losses with their gradients.

use crate::error::{Error, Result};

/// Probabilities are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Label-smoothed targets: `1 - eps` for the true class, `eps / (C - 1)` elsewhere.
pub fn smoothed_targets(label: usize, classes: usize, eps: f64) -> Vec<f64> {
    assert!(classes >= 2 && label < classes, "label {label} out of {classes} classes");
    let other = eps / (classes - 1) as f64;
    (0..classes).map(|c| if c == label { 1.0 - eps } else { other }).collect()
}

/// Per-class binary cross-entropy against smoothed targets:
/// `-sum_c q_c ln p_c + (1 - q_c) ln(1 - p_c)`.
pub fn loss_cls(probs: &[f64], label: usize, eps: f64) -> f64 {
    loss_cls_grad(probs, label, eps).0
}

/// Loss and its gradient with respect to `probs`. The gradient is zero for
/// coordinates where the clamp is active.
pub fn loss_cls_grad(probs: &[f64], label: usize, eps: f64) -> (f64, Vec<f64>) {
    let q = smoothed_targets(label, probs.len(), eps);
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for (c, (&p_raw, &qc)) in probs.iter().zip(&q).enumerate() {
        let p = p_raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= qc * p.ln() + (1.0 - qc) * (1.0 - p).ln();
        if p == p_raw {
            grad[c] = -qc / p + (1.0 - qc) / (1.0 - p);
        }
    }
    (loss, grad)
}

/// Backpropagates a gradient on softmax outputs to the logits.
pub fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let s: f64 = probs.iter().zip(dprobs).map(|(p, d)| p * d).sum();
    probs.iter().zip(dprobs).map(|(p, d)| p * (d - s)).collect()
}

/// Acceleration, speed and spacing series of one vehicle.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegSeries {
    pub a: Vec<f64>,
    pub v: Vec<f64>,
    pub dx: Vec<f64>,
}

impl RegSeries {
    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    fn check(&self) -> Result<()> {
        if self.v.len() != self.a.len() || self.dx.len() != self.a.len() {
            return Err(Error::Argument("series a, v and dx must have equal lengths".into()));
        }
        Ok(())
    }
}

/// Relative weights of the three regression terms.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegWeights {
    pub a: f64,
    pub v: f64,
    pub dx: f64,
}

impl Default for RegWeights {
    fn default() -> Self {
        RegWeights { a: 1.0, v: 1.0, dx: 1.0 }
    }
}

/// Sum of the per-quantity mean squared errors.
pub fn loss_reg(sim: &RegSeries, obs: &RegSeries) -> Result<f64> {
    Ok(loss_reg_grad(sim, obs, &RegWeights::default())?.0)
}

/// Weighted regression loss and its gradient with respect to `sim`.
pub fn loss_reg_grad(sim: &RegSeries, obs: &RegSeries, w: &RegWeights) -> Result<(f64, RegSeries)> {
    sim.check()?;
    obs.check()?;
    if sim.len() != obs.len() {
        return Err(Error::Argument(format!(
            "simulated length {} differs from observed length {}",
            sim.len(),
            obs.len()
        )));
    }
    if sim.is_empty() {
        return Err(Error::Argument("regression loss over an empty series".into()));
    }
    let n = sim.len() as f64;
    let term = |s: &[f64], o: &[f64], k: f64| -> (f64, Vec<f64>) {
        let loss = s.iter().zip(o).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() * k / n;
        let grad = s.iter().zip(o).map(|(a, b)| 2.0 * k * (a - b) / n).collect();
        (loss, grad)
    };
    let (la, ga) = term(&sim.a, &obs.a, w.a);
    let (lv, gv) = term(&sim.v, &obs.v, w.v);
    let (lx, gx) = term(&sim.dx, &obs.dx, w.dx);
    Ok((la + lv + lx, RegSeries { a: ga, v: gv, dx: gx }))
}
