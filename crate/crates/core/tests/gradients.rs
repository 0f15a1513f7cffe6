//! Finite-difference checks of every hand-written backward pass.

use drcf::nn::cell::CellKind;
use drcf::nn::gradcheck::{grad_check, GradCheckOptions};
use drcf::nn::init::xavier_init;
use drcf::nn::loss::{loss_cls_grad, softmax_backward};
use drcf::nn::model::{regime_input, KinFrame, KinematicNet, RegimeNet};
use drcf::nn::params::Params;
use drcf::nn::tensor::{softmax, Mat};
use drcf::regime::DrivingRegime;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions { samples: 60, seed, ..GradCheckOptions::default() }
}

#[derive(Clone)]
struct Linear {
    w: Mat,
    b: Vec<f64>,
}

impl Params for Linear {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![&self.w.data, &self.b]
    }
    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![&mut self.w.data, &mut self.b]
    }
    fn names(&self) -> Vec<String> {
        vec!["w".into(), "b".into()]
    }
}

#[test]
fn linear_layer_softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lin = Linear { w: xavier_init(6, 5, &mut rng), b: (0..6).map(|_| rng.random_range(-0.5..0.5)).collect() };
    let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |p: &Linear| {
        let mut z = p.b.clone();
        p.w.matvec_rows_acc(0, 6, &x, &mut z);
        loss_cls_grad(&softmax(&z), 3, 0.1).0
    };
    let mut z = lin.b.clone();
    lin.w.matvec_rows_acc(0, 6, &x, &mut z);
    let probs = softmax(&z);
    let dz = softmax_backward(&probs, &loss_cls_grad(&probs, 3, 0.1).1);
    let mut g = lin.zeros_like();
    g.w.outer_rows_acc(0, &dz, &x);
    g.b.copy_from_slice(&dz);
    let r = grad_check(loss, &lin, &g, &GradCheckOptions { samples: usize::MAX, ..opts(0) });
    assert!(r.max_rel_error < 1e-6, "{r:?}");
}

fn gru_window(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let r = DrivingRegime::from_index(rng.random_range(0..6)).unwrap();
            regime_input([rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)], r)
        })
        .collect()
}

#[test]
fn regime_classifier_end_to_end() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut net = RegimeNet::new(6, 16, &mut rng);
    // Non-zero biases so every gate path is exercised.
    for t in net.tensors_mut() {
        for w in t.iter_mut() {
            *w += rng.random_range(-0.1..0.1);
        }
    }
    let window = gru_window(&mut rng, 10);
    let loss = |p: &RegimeNet| loss_cls_grad(&p.forward(&window).unwrap().probs, 4, 0.1).0;
    let fwd = net.forward(&window).unwrap();
    let mut g = net.zeros_like();
    net.backward(&fwd, &loss_cls_grad(&fwd.probs, 4, 0.1).1, &mut g);
    let r = grad_check(loss, &net, &g, &opts(3));
    assert!(r.passed(), "{r:?}");
}

fn kin_window(rng: &mut ChaCha8Rng, n: usize) -> Vec<KinFrame> {
    (0..n)
        .map(|_| {
            let r = DrivingRegime::from_index(rng.random_range(0..6)).unwrap();
            KinFrame::new([rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)], r)
        })
        .collect()
}

fn check_kinematic(kind: CellKind, with_regime: bool, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = KinematicNet::new(kind, with_regime, 6, 16, &mut rng);
    for t in net.tensors_mut() {
        for w in t.iter_mut() {
            *w += rng.random_range(-0.1..0.1);
        }
    }
    let window = kin_window(&mut rng, 10);
    let target = 0.7;
    let loss = |p: &KinematicNet| (p.forward(&window).unwrap().y - target).powi(2);
    let fwd = net.forward(&window).unwrap();
    let mut g = net.zeros_like();
    net.backward(&fwd, &window, 2.0 * (fwd.y - target), &mut g);
    let r = grad_check(loss, &net, &g, &opts(seed));
    assert!(r.passed(), "{kind:?}: {r:?}");
    // The head scalars are always checked.
    let n = net.num_params();
    let head = GradCheckOptions { samples: usize::MAX, ..opts(seed) };
    let tail: Vec<usize> = (n - 19..n).collect();
    for &i in &tail {
        let mut up = net.clone();
        *up.coord_mut(i) += head.h;
        let mut down = net.clone();
        *down.coord_mut(i) -= head.h;
        let numeric = (loss(&up) - loss(&down)) / (2.0 * head.h);
        let a = g.coord(i);
        assert!((a - numeric).abs() / a.abs().max(1.0) <= head.tolerance, "coord {i}: {a} vs {numeric}");
    }
}

#[test]
fn lstm_with_embedding_and_heads() {
    check_kinematic(CellKind::Lstm, true, 4);
}

#[test]
fn plain_lstm_gru_rnn() {
    check_kinematic(CellKind::Lstm, false, 5);
    check_kinematic(CellKind::Gru, false, 6);
    check_kinematic(CellKind::Rnn, false, 7);
}

#[test]
fn embedding_gradient_is_the_one_hot() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = KinematicNet::new(CellKind::Lstm, true, 2, 4, &mut rng);
    let window = vec![KinFrame::new([0.1, 0.2, 0.3], DrivingRegime::D)];
    let fwd = net.forward(&window).unwrap();
    let mut g = net.zeros_like();
    net.backward(&fwd, &window, 1.0, &mut g);
    // dy/dW_e = (dy/dE) * onehot: only the D entry is non-zero and equals dy/db_e.
    for (k, &gw) in g.w_e.iter().enumerate() {
        if k == DrivingRegime::D.index() {
            assert!((gw - g.b_e[0]).abs() < 1e-15);
        } else {
            assert_eq!(gw, 0.0);
        }
    }
}

#[test]
fn kinematic_input_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = KinematicNet::new(CellKind::Lstm, true, 3, 8, &mut rng);
    let window = kin_window(&mut rng, 6);
    let fwd = net.forward(&window).unwrap();
    let mut g = net.zeros_like();
    let dx = net.backward(&fwd, &window, 1.0, &mut g);
    let h = 1e-5;
    for j in 0..window.len() {
        for f in 0..3 {
            let mut up = window.clone();
            up[j].x[f] += h;
            let mut down = window.clone();
            down[j].x[f] -= h;
            let numeric = (net.forward(&up).unwrap().y - net.forward(&down).unwrap().y) / (2.0 * h);
            assert!((dx[j][f] - numeric).abs() / dx[j][f].abs().max(1.0) < 1e-6, "step {j} feature {f}");
        }
    }
}
