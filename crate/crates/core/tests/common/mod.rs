#![allow(dead_code)]

use drcf::physics::IdmParams;
use drcf::regime::DrivingRegime;
use drcf::synth::{generate_synthetic, FollowerLaw, Gains, LeaderSpec, RegimeGainLaw, ScenarioConfig};
use drcf::traj::{extract_pairs, LeaderFollowerPair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn regime_gain_law() -> RegimeGainLaw {
    RegimeGainLaw {
        s0: 2.0,
        t_hw: 1.2,
        enter_dv: 1.0,
        exit_dv: 0.0,
        following: Gains { k_v: 0.3, k_s: 0.05 },
        accelerating: Gains { k_v: 1.2, k_s: 0.25 },
        decelerating: Gains { k_v: 1.5, k_s: 0.3 },
        a_limit: 3.0,
    }
}

pub fn random_leader(rng: &mut ChaCha8Rng, duration_s: f64) -> LeaderSpec {
    LeaderSpec::random(rng, duration_s)
}

fn corpus(law: FollowerLaw, n: usize, duration_s: f64, noise: f64, seed: u64) -> (Vec<LeaderFollowerPair>, Vec<Vec<DrivingRegime>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let leader = random_leader(&mut rng, duration_s);
        let v0 = leader.initial_speed;
        let cfg = ScenarioConfig {
            leader,
            follower_count: 1,
            law,
            initial_spacings: vec![2.0 + 1.2 * v0 + rng.random_range(0.0..3.0)],
            initial_follower_speed: None,
            noise_sigma: noise,
            seed: seed.wrapping_mul(1000) + i as u64,
            lane: 1,
            leader_id: 1,
        };
        let data = generate_synthetic(&cfg).unwrap();
        let found = extract_pairs(&data.set, 3.0).unwrap();
        assert_eq!(found.len(), 1, "scenario {i} produced a collision");
        let pair = found.into_iter().next().unwrap();
        labels.push(data.labels[&pair.follower.id].clone());
        pairs.push(pair);
    }
    (pairs, labels)
}

pub fn idm_corpus(n: usize, duration_s: f64, seed: u64) -> (Vec<LeaderFollowerPair>, Vec<Vec<DrivingRegime>>) {
    corpus(FollowerLaw::Idm(IdmParams::default()), n, duration_s, 0.0, seed)
}

pub fn regime_gain_corpus(n: usize, duration_s: f64, seed: u64) -> (Vec<LeaderFollowerPair>, Vec<Vec<DrivingRegime>>) {
    corpus(FollowerLaw::RegimeGain(regime_gain_law()), n, duration_s, 0.0, seed)
}

/// Minimum DTW cost by enumerating every monotone path.
pub fn brute_force_dtw(a: &[f64], b: &[f64]) -> f64 {
    fn walk(a: &[f64], b: &[f64], i: usize, j: usize, acc: f64, best: &mut f64) {
        let acc = acc + (a[i] - b[j]).abs();
        if i + 1 == a.len() && j + 1 == b.len() {
            *best = best.min(acc);
            return;
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(a, b, i + 1, j + 1, acc, best);
        }
        if i + 1 < a.len() {
            walk(a, b, i + 1, j, acc, best);
        }
        if j + 1 < b.len() {
            walk(a, b, i, j + 1, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    walk(a, b, 0, 0, 0.0, &mut best);
    best
}

/// Minimum total residual over tilings of `profile` into `k` segments that
/// share boundary samples, by exhaustive dynamic programming.
pub fn dp_optimum(profile: &[f64], k: usize) -> f64 {
    let n = profile.len();
    // cost[i][j]: residual of the line fit over samples i..=j.
    let mut cost = vec![vec![f64::INFINITY; n]; n];
    for i in 0..n {
        let (mut sx, mut sy, mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for j in i..n {
            let x = (j - i) as f64;
            let y = profile[j] - profile[i];
            sx += x;
            sy += y;
            sxx += x * x;
            sxy += x * y;
            syy += y * y;
            let m = (j - i + 1) as f64;
            let vxx = sxx - sx * sx / m;
            let vxy = sxy - sx * sy / m;
            let vyy = syy - sy * sy / m;
            cost[i][j] = if vxx > 0.0 { (vyy - vxy * vxy / vxx).max(0.0) } else { 0.0 };
        }
    }
    // best[s][j]: s segments covering samples 0..=j.
    let mut best = vec![vec![f64::INFINITY; n]; k + 1];
    for j in 1..n {
        best[1][j] = cost[0][j];
    }
    for s in 2..=k {
        for j in 1..n {
            for i in 1..j {
                let c = best[s - 1][i] + cost[i][j];
                if c < best[s][j] {
                    best[s][j] = c;
                }
            }
        }
    }
    best[k][n - 1]
}
