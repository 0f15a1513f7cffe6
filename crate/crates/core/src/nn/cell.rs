//! Stacked recurrent layers (Elman RNN, GRU, LSTM) with full backpropagation
//! through time.
//!
//! Gate layouts inside the stacked weight matrices:
//!
//! * RNN: `h' = tanh(W x + U h + b)`
//! * GRU, blocks `[z, r, n]`:
//!   `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
//!   `n = tanh(W_n x + U_n (r ⊙ h) + b_n)`, `h' = z ⊙ h + (1 - z) ⊙ n`
//! * LSTM, blocks `[i, f, g, o]`:
//!   `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')`

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::xavier_gates;
use super::tensor::{sigmoid, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Rnn,
    Gru,
    Lstm,
}

impl CellKind {
    pub fn gates(self) -> usize {
        match self {
            CellKind::Rnn => 1,
            CellKind::Gru => 3,
            CellKind::Lstm => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Rnn => "rnn",
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentLayer {
    pub kind: CellKind,
    pub input: usize,
    pub hidden: usize,
    /// `gates * hidden x input`.
    pub w: Mat,
    /// `gates * hidden x hidden`.
    pub u: Mat,
    pub b: Vec<f64>,
}

impl RecurrentLayer {
    pub fn new<R: Rng + ?Sized>(kind: CellKind, input: usize, hidden: usize, rng: &mut R) -> Self {
        let g = kind.gates();
        RecurrentLayer {
            kind,
            input,
            hidden,
            w: xavier_gates(g, hidden, input, rng),
            u: xavier_gates(g, hidden, hidden, rng),
            b: vec![0.0; g * hidden],
        }
    }

    pub fn num_params(&self) -> usize {
        self.w.data.len() + self.u.data.len() + self.b.len()
    }
}

/// Per-step forward cache of one layer.
#[derive(Debug, Clone)]
struct StepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Post-activation gate values, `gates * hidden`.
    gates: Vec<f64>,
    /// LSTM: tanh(c'); unused otherwise.
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    steps: Vec<StepCache>,
}

#[derive(Debug, Clone)]
pub struct StackTrace {
    layers: Vec<LayerTrace>,
}

impl StackTrace {
    /// Top-layer hidden state after the last step.
    pub fn output(&self) -> &[f64] {
        let top = self.layers.last().expect("non-empty stack");
        &top.steps.last().expect("non-empty sequence").h
    }
}

impl RecurrentLayer {
    fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> StepCache {
        let h = self.hidden;
        let g = self.kind.gates();
        let mut pre = self.b.clone();
        self.w.matvec_rows_acc(0, g * h, x, &mut pre);
        let (gates, tanh_c, h_new, c_new);
        match self.kind {
            CellKind::Rnn => {
                self.u.matvec_rows_acc(0, h, h_prev, &mut pre);
                let act: Vec<f64> = pre.iter().map(|a| a.tanh()).collect();
                h_new = act.clone();
                gates = act;
                tanh_c = Vec::new();
                c_new = Vec::new();
            }
            CellKind::Gru => {
                self.u.matvec_rows_acc(0, 2 * h, h_prev, &mut pre[..2 * h]);
                let mut act = vec![0.0; 3 * h];
                for k in 0..2 * h {
                    act[k] = sigmoid(pre[k]);
                }
                let rh: Vec<f64> = (0..h).map(|k| act[h + k] * h_prev[k]).collect();
                self.u.matvec_rows_acc(2 * h, 3 * h, &rh, &mut pre[2 * h..]);
                for k in 0..h {
                    act[2 * h + k] = pre[2 * h + k].tanh();
                }
                h_new = (0..h).map(|k| act[k] * h_prev[k] + (1.0 - act[k]) * act[2 * h + k]).collect();
                gates = act;
                tanh_c = Vec::new();
                c_new = Vec::new();
            }
            CellKind::Lstm => {
                self.u.matvec_rows_acc(0, 4 * h, h_prev, &mut pre);
                let mut act = vec![0.0; 4 * h];
                for k in 0..h {
                    act[k] = sigmoid(pre[k]);
                    act[h + k] = sigmoid(pre[h + k]);
                    act[2 * h + k] = pre[2 * h + k].tanh();
                    act[3 * h + k] = sigmoid(pre[3 * h + k]);
                }
                let c: Vec<f64> = (0..h).map(|k| act[h + k] * c_prev[k] + act[k] * act[2 * h + k]).collect();
                let tc: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
                h_new = (0..h).map(|k| act[3 * h + k] * tc[k]).collect();
                gates = act;
                tanh_c = tc;
                c_new = c;
            }
        }
        let _ = c_new;
        StepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            gates,
            tanh_c,
            h: h_new,
        }
    }

    fn cell_state(&self, s: &StepCache) -> Vec<f64> {
        let h = self.hidden;
        (0..h)
            .map(|k| s.gates[h + k] * s.c_prev[k] + s.gates[k] * s.gates[2 * h + k])
            .collect()
    }

    fn forward(&self, xs: &[Vec<f64>]) -> LayerTrace {
        let h = self.hidden;
        let mut h_prev = vec![0.0; h];
        let mut c_prev = if self.kind == CellKind::Lstm { vec![0.0; h] } else { Vec::new() };
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            let s = self.step(x, &h_prev, &c_prev);
            h_prev = s.h.clone();
            if self.kind == CellKind::Lstm {
                c_prev = self.cell_state(&s);
            }
            steps.push(s);
        }
        LayerTrace { steps }
    }

    /// BPTT through one layer. `dh_ext[t]` is the loss gradient arriving at
    /// this layer's output at step `t`. Returns the gradient w.r.t. each input.
    fn backward(&self, trace: &LayerTrace, dh_ext: &[Vec<f64>], grad: &mut RecurrentLayer) -> Vec<Vec<f64>> {
        let h = self.hidden;
        let n = trace.steps.len();
        let mut dxs = vec![vec![0.0; self.input]; n];
        let mut dh_next = vec![0.0; h];
        let mut dc_next = vec![0.0; h];
        for t in (0..n).rev() {
            let s = &trace.steps[t];
            let dh: Vec<f64> = (0..h).map(|k| dh_ext[t][k] + dh_next[k]).collect();
            let mut dh_prev = vec![0.0; h];
            let dx = &mut dxs[t];
            match self.kind {
                CellKind::Rnn => {
                    let da: Vec<f64> = (0..h).map(|k| dh[k] * (1.0 - s.gates[k] * s.gates[k])).collect();
                    grad.w.outer_rows_acc(0, &da, &s.x);
                    grad.u.outer_rows_acc(0, &da, &s.h_prev);
                    for k in 0..h {
                        grad.b[k] += da[k];
                    }
                    self.w.matvec_t_rows_acc(0, &da, dx);
                    self.u.matvec_t_rows_acc(0, &da, &mut dh_prev);
                }
                CellKind::Gru => {
                    let (z, r, nn) = (&s.gates[..h], &s.gates[h..2 * h], &s.gates[2 * h..]);
                    let mut da = vec![0.0; 3 * h];
                    for k in 0..h {
                        let dz = dh[k] * (s.h_prev[k] - nn[k]);
                        let dn = dh[k] * (1.0 - z[k]);
                        dh_prev[k] += dh[k] * z[k];
                        da[k] = dz * z[k] * (1.0 - z[k]);
                        da[2 * h + k] = dn * (1.0 - nn[k] * nn[k]);
                    }
                    let rh: Vec<f64> = (0..h).map(|k| r[k] * s.h_prev[k]).collect();
                    let mut drh = vec![0.0; h];
                    self.u.matvec_t_rows_acc(2 * h, &da[2 * h..], &mut drh);
                    for k in 0..h {
                        let dr = drh[k] * s.h_prev[k];
                        dh_prev[k] += drh[k] * r[k];
                        da[h + k] = dr * r[k] * (1.0 - r[k]);
                    }
                    grad.w.outer_rows_acc(0, &da, &s.x);
                    grad.u.outer_rows_acc(0, &da[..2 * h], &s.h_prev);
                    grad.u.outer_rows_acc(2 * h, &da[2 * h..], &rh);
                    for k in 0..3 * h {
                        grad.b[k] += da[k];
                    }
                    self.w.matvec_t_rows_acc(0, &da, dx);
                    self.u.matvec_t_rows_acc(0, &da[..2 * h], &mut dh_prev);
                }
                CellKind::Lstm => {
                    let (ig, fg, gg, og) = (&s.gates[..h], &s.gates[h..2 * h], &s.gates[2 * h..3 * h], &s.gates[3 * h..]);
                    let mut da = vec![0.0; 4 * h];
                    let mut dc_prev = vec![0.0; h];
                    for k in 0..h {
                        let do_ = dh[k] * s.tanh_c[k];
                        let dc = dc_next[k] + dh[k] * og[k] * (1.0 - s.tanh_c[k] * s.tanh_c[k]);
                        let di = dc * gg[k];
                        let df = dc * s.c_prev[k];
                        let dg = dc * ig[k];
                        dc_prev[k] = dc * fg[k];
                        da[k] = di * ig[k] * (1.0 - ig[k]);
                        da[h + k] = df * fg[k] * (1.0 - fg[k]);
                        da[2 * h + k] = dg * (1.0 - gg[k] * gg[k]);
                        da[3 * h + k] = do_ * og[k] * (1.0 - og[k]);
                    }
                    grad.w.outer_rows_acc(0, &da, &s.x);
                    grad.u.outer_rows_acc(0, &da, &s.h_prev);
                    for k in 0..4 * h {
                        grad.b[k] += da[k];
                    }
                    self.w.matvec_t_rows_acc(0, &da, dx);
                    self.u.matvec_t_rows_acc(0, &da, &mut dh_prev);
                    dc_next = dc_prev;
                }
            }
            dh_next = dh_prev;
        }
        dxs
    }
}

/// Stack of recurrent layers; layer `l + 1` consumes the hidden states of `l`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentStack {
    pub layers: Vec<RecurrentLayer>,
}

impl RecurrentStack {
    pub fn new<R: Rng + ?Sized>(kind: CellKind, input: usize, hidden: usize, depth: usize, rng: &mut R) -> Self {
        let layers = (0..depth)
            .map(|l| RecurrentLayer::new(kind, if l == 0 { input } else { hidden }, hidden, rng))
            .collect();
        RecurrentStack { layers }
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden
    }

    pub fn input(&self) -> usize {
        self.layers[0].input
    }

    pub fn kind(&self) -> CellKind {
        self.layers[0].kind
    }

    pub fn forward(&self, xs: &[Vec<f64>]) -> StackTrace {
        assert!(!xs.is_empty(), "recurrent forward needs at least one step");
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut inputs: Vec<Vec<f64>> = xs.to_vec();
        for layer in &self.layers {
            let tr = layer.forward(&inputs);
            inputs = tr.steps.iter().map(|s| s.h.clone()).collect();
            layers.push(tr);
        }
        StackTrace { layers }
    }

    /// Backpropagates a gradient on the final top-layer hidden state.
    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// w.r.t. each input vector.
    pub fn backward(&self, trace: &StackTrace, d_out: &[f64], grad: &mut RecurrentStack) -> Vec<Vec<f64>> {
        let n = trace.layers[0].steps.len();
        let hdim = self.hidden();
        let mut dh_ext = vec![vec![0.0; hdim]; n];
        dh_ext[n - 1].copy_from_slice(d_out);
        for l in (0..self.layers.len()).rev() {
            dh_ext = self.layers[l].backward(&trace.layers[l], &dh_ext, &mut grad.layers[l]);
        }
        dh_ext
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.data.as_slice(), l.u.data.as_slice(), l.b.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.data.as_mut_slice(), l.u.data.as_mut_slice(), l.b.as_mut_slice()])
            .collect()
    }

    pub fn names(&self, prefix: &str) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|l| ["w", "u", "b"].map(|t| format!("{prefix}.layer{l}.{t}")))
            .collect()
    }
}
