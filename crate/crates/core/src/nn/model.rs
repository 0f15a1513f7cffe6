//! Regime predictor, kinematic network and the model container that ties
//! them to a feature scaler and a checkpoint format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cell::{CellKind, RecurrentStack, StackTrace};
use super::init::xavier_init;
use super::loss::softmax_backward;
use super::params::Params;
use super::tensor::{dot, softmax, Mat};
use crate::error::{Error, Result};
use crate::regime::{DrivingRegime, NUM_REGIMES};
use crate::util::write_atomic;

/// Kinematic features `[dd, dv, v]`.
pub const KIN_FEATURES: usize = 3;
/// Regime predictor input: kinematics plus a regime one-hot.
pub const REGIME_INPUT: usize = KIN_FEATURES + NUM_REGIMES;
/// Initial PReLU slope.
pub const PRELU_INIT: f64 = 0.25;

#[inline]
pub fn prelu(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        alpha * x
    }
}

/// Standardizes `[dd, dv, v]` with statistics fixed from training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub mean: [f64; KIN_FEATURES],
    pub std: [f64; KIN_FEATURES],
}

impl Default for FeatureScaler {
    fn default() -> Self {
        FeatureScaler { mean: [0.0; KIN_FEATURES], std: [1.0; KIN_FEATURES] }
    }
}

impl FeatureScaler {
    pub fn fit<'a, I: IntoIterator<Item = &'a [f64; KIN_FEATURES]>>(rows: I) -> Self {
        let mut n = 0usize;
        let mut sum = [0.0; KIN_FEATURES];
        let mut sq = [0.0; KIN_FEATURES];
        for r in rows {
            n += 1;
            for k in 0..KIN_FEATURES {
                sum[k] += r[k];
                sq[k] += r[k] * r[k];
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mut out = Self::default();
        for k in 0..KIN_FEATURES {
            let m = sum[k] / n as f64;
            let var = (sq[k] / n as f64 - m * m).max(0.0);
            out.mean[k] = m;
            out.std[k] = if var.sqrt() > 1e-6 { var.sqrt() } else { 1.0 };
        }
        out
    }

    pub fn apply(&self, raw: [f64; KIN_FEATURES]) -> [f64; KIN_FEATURES] {
        std::array::from_fn(|k| (raw[k] - self.mean[k]) / self.std[k])
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite value in {what} input")))
    }
}

/// Drops masked-out steps of a padded window.
pub fn pack<T: Clone>(frames: &[T], mask: &[bool]) -> Vec<T> {
    assert_eq!(frames.len(), mask.len(), "mask length must match window length");
    frames.iter().zip(mask).filter(|(_, &m)| m).map(|(f, _)| f.clone()).collect()
}

/// Regime predictor input vector: scaled kinematics and a regime one-hot.
pub fn regime_input(scaled: [f64; KIN_FEATURES], regime: DrivingRegime) -> Vec<f64> {
    let mut x = scaled.to_vec();
    x.extend_from_slice(&regime.one_hot());
    x
}

/// Stacked GRU with a softmax head over the six regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeNet {
    pub stack: RecurrentStack,
    pub w_g: Mat,
    pub b_g: Vec<f64>,
}

pub struct RegimeForward {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    trace: StackTrace,
}

impl RegimeNet {
    pub fn new<R: Rng + ?Sized>(layers: usize, hidden: usize, rng: &mut R) -> Self {
        let stack = RecurrentStack::new(CellKind::Gru, REGIME_INPUT, hidden, layers, rng);
        RegimeNet { stack, w_g: xavier_init(NUM_REGIMES, hidden, rng), b_g: vec![0.0; NUM_REGIMES] }
    }

    pub fn forward(&self, window: &[Vec<f64>]) -> Result<RegimeForward> {
        if window.is_empty() {
            return Err(Error::Argument("regime window is empty".into()));
        }
        for x in window {
            if x.len() != REGIME_INPUT {
                return Err(Error::Argument(format!("regime input has {} features, expected {REGIME_INPUT}", x.len())));
            }
            check_finite(x, "regime predictor")?;
        }
        let trace = self.stack.forward(window);
        let mut logits = self.b_g.clone();
        self.w_g.matvec_rows_acc(0, NUM_REGIMES, trace.output(), &mut logits);
        let probs = softmax(&logits);
        Ok(RegimeForward { logits, probs, trace })
    }

    pub fn predict(&self, window: &[Vec<f64>]) -> Result<DrivingRegime> {
        let p = self.forward(window)?.probs;
        Ok(DrivingRegime::from_index(argmax(&p)).expect("six classes"))
    }

    /// Accumulates parameter gradients for a loss gradient on the probabilities.
    pub fn backward(&self, fwd: &RegimeForward, dprobs: &[f64], grad: &mut RegimeNet) {
        let dlogits = softmax_backward(&fwd.probs, dprobs);
        let h = fwd.trace.output();
        grad.w_g.outer_rows_acc(0, &dlogits, h);
        for (b, d) in grad.b_g.iter_mut().zip(&dlogits) {
            *b += d;
        }
        let mut dh = vec![0.0; h.len()];
        self.w_g.matvec_t_rows_acc(0, &dlogits, &mut dh);
        self.stack.backward(&fwd.trace, &dh, &mut grad.stack);
    }
}

impl Params for RegimeNet {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.stack.tensors();
        t.push(&self.w_g.data);
        t.push(&self.b_g);
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.stack.tensors_mut();
        t.push(&mut self.w_g.data);
        t.push(&mut self.b_g);
        t
    }

    fn names(&self) -> Vec<String> {
        let mut n = self.stack.names("gru");
        n.push("gru.head.w".into());
        n.push("gru.head.b".into());
        n
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// One step of kinematic network input: scaled `[dd, dv, v]` and regime
/// weights (a one-hot, or class probabilities for the soft variant).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KinFrame {
    pub x: [f64; KIN_FEATURES],
    pub dr: [f64; NUM_REGIMES],
}

impl KinFrame {
    pub fn new(x: [f64; KIN_FEATURES], regime: DrivingRegime) -> Self {
        KinFrame { x, dr: regime.one_hot() }
    }

    pub fn blind(x: [f64; KIN_FEATURES]) -> Self {
        KinFrame { x, dr: [0.0; NUM_REGIMES] }
    }
}

/// Recurrent stack with an optional regime embedding at its input and a
/// PReLU / affine / scale head: `y = alpha_out * (w_o . PReLU(h) + b_o)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicNet {
    pub stack: RecurrentStack,
    /// Regime embedding weights, 6 entries, or empty for regime-blind nets.
    pub w_e: Vec<f64>,
    pub b_e: Vec<f64>,
    pub w_o: Vec<f64>,
    pub b_o: Vec<f64>,
    pub alpha_out: Vec<f64>,
    pub alpha_prelu: Vec<f64>,
}

pub struct KinForward {
    pub y: f64,
    pre: f64,
    trace: StackTrace,
}

impl KinematicNet {
    pub fn new<R: Rng + ?Sized>(kind: CellKind, with_regime: bool, layers: usize, hidden: usize, rng: &mut R) -> Self {
        let input = KIN_FEATURES + usize::from(with_regime);
        let stack = RecurrentStack::new(kind, input, hidden, layers, rng);
        let (w_e, b_e) = if with_regime {
            (xavier_init(1, NUM_REGIMES, rng).data, vec![0.0])
        } else {
            (Vec::new(), Vec::new())
        };
        KinematicNet {
            stack,
            w_e,
            b_e,
            w_o: xavier_init(1, hidden, rng).data,
            b_o: vec![0.0],
            alpha_out: vec![1.0],
            alpha_prelu: vec![PRELU_INIT],
        }
    }

    pub fn uses_regime(&self) -> bool {
        !self.w_e.is_empty()
    }

    /// Regime embedding `E_d = w_e . dr + b_e`.
    pub fn embed(&self, dr: &[f64; NUM_REGIMES]) -> f64 {
        dot(&self.w_e, dr) + self.b_e[0]
    }

    fn fused(&self, f: &KinFrame) -> Vec<f64> {
        let mut x = f.x.to_vec();
        if self.uses_regime() {
            x.push(self.embed(&f.dr));
        }
        x
    }

    pub fn forward(&self, window: &[KinFrame]) -> Result<KinForward> {
        if window.is_empty() {
            return Err(Error::Argument("kinematic window is empty".into()));
        }
        for f in window {
            check_finite(&f.x, "kinematic")?;
            check_finite(&f.dr, "kinematic")?;
        }
        let inputs: Vec<Vec<f64>> = window.iter().map(|f| self.fused(f)).collect();
        let trace = self.stack.forward(&inputs);
        let a = self.alpha_prelu[0];
        let pre = trace.output().iter().zip(&self.w_o).map(|(&h, w)| w * prelu(h, a)).sum::<f64>() + self.b_o[0];
        let y = self.alpha_out[0] * pre;
        if !y.is_finite() {
            return Err(Error::Numeric("kinematic network produced a non-finite output".into()));
        }
        Ok(KinForward { y, pre, trace })
    }

    /// Accumulates parameter gradients for `dL/dy` and returns `dL/dx` for
    /// the scaled kinematic features of every window step.
    pub fn backward(&self, fwd: &KinForward, window: &[KinFrame], dy: f64, grad: &mut KinematicNet) -> Vec<[f64; KIN_FEATURES]> {
        let alpha = self.alpha_prelu[0];
        let h = fwd.trace.output();
        grad.alpha_out[0] += dy * fwd.pre;
        let dpre = dy * self.alpha_out[0];
        grad.b_o[0] += dpre;
        let mut dh = vec![0.0; h.len()];
        for k in 0..h.len() {
            grad.w_o[k] += dpre * prelu(h[k], alpha);
            let dact = dpre * self.w_o[k];
            if h[k] > 0.0 {
                dh[k] = dact;
            } else {
                dh[k] = dact * alpha;
                grad.alpha_prelu[0] += dact * h[k];
            }
        }
        let dxs = self.stack.backward(&fwd.trace, &dh, &mut grad.stack);
        let with_regime = self.uses_regime();
        dxs.iter()
            .zip(window)
            .map(|(dx, f)| {
                if with_regime {
                    let de = dx[KIN_FEATURES];
                    for (g, w) in grad.w_e.iter_mut().zip(&f.dr) {
                        *g += de * w;
                    }
                    grad.b_e[0] += de;
                }
                [dx[0], dx[1], dx[2]]
            })
            .collect()
    }
}

impl Params for KinematicNet {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t = self.stack.tensors();
        t.extend([
            self.w_e.as_slice(),
            self.b_e.as_slice(),
            self.w_o.as_slice(),
            self.b_o.as_slice(),
            self.alpha_out.as_slice(),
            self.alpha_prelu.as_slice(),
        ]);
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t = self.stack.tensors_mut();
        t.extend([
            self.w_e.as_mut_slice(),
            self.b_e.as_mut_slice(),
            self.w_o.as_mut_slice(),
            self.b_o.as_mut_slice(),
            self.alpha_out.as_mut_slice(),
            self.alpha_prelu.as_mut_slice(),
        ]);
        t
    }

    fn names(&self) -> Vec<String> {
        let mut n = self.stack.names(self.stack.kind().name());
        n.extend(["embed.w", "embed.b", "head.w", "head.b", "head.alpha_out", "head.alpha_prelu"].map(String::from));
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    LstmDr,
    LstmPlain,
    GruPlain,
    RnnPlain,
}

impl ModelKind {
    pub fn cell(self) -> CellKind {
        match self {
            ModelKind::LstmDr | ModelKind::LstmPlain => CellKind::Lstm,
            ModelKind::GruPlain => CellKind::Gru,
            ModelKind::RnnPlain => CellKind::Rnn,
        }
    }

    pub fn uses_regime(self) -> bool {
        self == ModelKind::LstmDr
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::LstmDr => "lstm_dr",
            ModelKind::LstmPlain => "lstm_plain",
            ModelKind::GruPlain => "gru_plain",
            ModelKind::RnnPlain => "rnn_plain",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub layers: usize,
    pub hidden: usize,
    /// History window length in steps.
    pub window: usize,
    pub seed: u64,
    /// Feed regime probabilities instead of the argmax one-hot to the
    /// embedding. Gradients do not flow back into the regime predictor.
    #[serde(default)]
    pub soft_regime: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { kind: ModelKind::LstmDr, layers: 6, hidden: 16, window: 10, seed: 0, soft_regime: false }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 || self.window == 0 {
            return Err(Error::Config("model layers, hidden size and window must be positive".into()));
        }
        Ok(())
    }
}

/// A trained or trainable car-following network. The regime predictor is
/// present only for [`ModelKind::LstmDr`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridModel {
    pub config: ModelConfig,
    pub scaler: FeatureScaler,
    pub regime: Option<RegimeNet>,
    pub kin: KinematicNet,
}

impl HybridModel {
    pub fn new(config: ModelConfig, scaler: FeatureScaler) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let regime = config
            .kind
            .uses_regime()
            .then(|| RegimeNet::new(config.layers, config.hidden, &mut rng));
        let kin = KinematicNet::new(config.kind.cell(), config.kind.uses_regime(), config.layers, config.hidden, &mut rng);
        Ok(HybridModel { config, scaler, regime, kin })
    }

    pub fn num_params(&self) -> usize {
        self.kin.num_params() + self.regime.as_ref().map_or(0, |r| r.num_params())
    }

    /// Verifies that every tensor has the shape implied by `config`.
    pub fn check_dims(&self) -> Result<()> {
        let fresh = HybridModel::new(self.config, self.scaler)?;
        let shapes = |m: &HybridModel| -> Vec<usize> {
            let mut s: Vec<usize> = m.kin.tensors().iter().map(|t| t.len()).collect();
            if let Some(r) = &m.regime {
                s.push(usize::MAX);
                s.extend(r.tensors().iter().map(|t| t.len()));
            }
            s
        };
        let layer_dims = |st: &RecurrentStack| -> Vec<(CellKind, usize, usize, usize, usize)> {
            st.layers.iter().map(|l| (l.kind, l.input, l.hidden, l.w.cols, l.u.cols)).collect()
        };
        let same_layers = layer_dims(&self.kin.stack) == layer_dims(&fresh.kin.stack)
            && match (&self.regime, &fresh.regime) {
                (Some(a), Some(b)) => layer_dims(&a.stack) == layer_dims(&b.stack),
                (None, None) => true,
                _ => false,
            };
        if !same_layers || shapes(self) != shapes(&fresh) {
            return Err(Error::Schema(format!(
                "model tensors do not match architecture {} ({} layers, hidden {})",
                self.config.kind.name(),
                self.config.layers,
                self.config.hidden
            )));
        }
        if !self.kin.all_finite() || !self.regime.as_ref().is_none_or(|r| r.all_finite()) {
            return Err(Error::Numeric("model contains non-finite weights".into()));
        }
        Ok(())
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model with optimizer state and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub stage: String,
    pub model: HybridModel,
    #[serde(default)]
    pub optim_regime: Option<super::adam::OptimState>,
    #[serde(default)]
    pub optim_kin: Option<super::adam::OptimState>,
}

impl Checkpoint {
    pub fn new(model: HybridModel, stage: &str, config_hash: Option<String>) -> Self {
        let hash = config_hash.unwrap_or_else(|| crate::util::config_hash(&model.config));
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config_hash: hash,
            seed: model.config.seed,
            stage: stage.to_string(),
            model,
            optim_regime: None,
            optim_kin: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        write_atomic(path, &bytes)?;
        Ok(())
    }

    /// Loads a checkpoint, rejecting unknown versions and tensors whose
    /// shapes disagree with the stored architecture. When `expected` is given
    /// the architecture must also match it.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let text = std::fs::read(path)?;
        let ck: Checkpoint = serde_json::from_slice(&text)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Schema(format!("unsupported checkpoint version {}", ck.version)));
        }
        ck.model.check_dims()?;
        if let Some(cfg) = expected {
            let m = &ck.model.config;
            if m.kind != cfg.kind || m.layers != cfg.layers || m.hidden != cfg.hidden || m.window != cfg.window {
                return Err(Error::Schema(format!(
                    "checkpoint architecture {} {}x{} (window {}) does not match requested {} {}x{} (window {})",
                    m.kind.name(),
                    m.layers,
                    m.hidden,
                    m.window,
                    cfg.kind.name(),
                    cfg.layers,
                    cfg.hidden,
                    cfg.window
                )));
            }
        }
        Ok(ck)
    }
}
