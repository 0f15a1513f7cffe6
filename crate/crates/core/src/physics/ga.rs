//! Real-coded genetic algorithm for IDM calibration.
//!
//! Fitness is the mean per-pair spacing MSE of a closed-loop IDM simulation
//! (lower is better). Individual 0 of the initial population is the centre of
//! the search box; one elite survives each generation, so the best fitness per
//! generation never increases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::IdmParams;
use crate::error::{Error, Result};
use crate::sim::{closed_loop_simulate, ModelHandle};
use crate::traj::LeaderFollowerPair;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaSettings {
    pub population: usize,
    pub generations: usize,
    pub tournament: usize,
    pub crossover_prob: f64,
    /// Mutation standard deviation as a fraction of each parameter's range.
    pub mutation_sigma: f64,
    /// Per-gene mutation probability.
    pub mutation_prob: f64,
    pub elitism: usize,
    pub seed: u64,
}

impl Default for GaSettings {
    fn default() -> Self {
        GaSettings {
            population: 50,
            generations: 100,
            tournament: 3,
            crossover_prob: 0.9,
            mutation_sigma: 0.05,
            mutation_prob: 0.2,
            elitism: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IdmBounds {
    pub lower: IdmParams,
    pub upper: IdmParams,
}

impl Default for IdmBounds {
    fn default() -> Self {
        IdmBounds {
            lower: IdmParams { v0: 10.0, t_hw: 0.5, a_max: 0.3, b: 0.5, s0: 0.5, delta: 4.0 },
            upper: IdmParams { v0: 40.0, t_hw: 3.0, a_max: 3.0, b: 4.0, s0: 5.0, delta: 4.0 },
        }
    }
}

impl IdmBounds {
    pub fn center(&self) -> IdmParams {
        let lo = self.lower.to_array();
        let hi = self.upper.to_array();
        IdmParams::from_array(std::array::from_fn(|i| 0.5 * (lo[i] + hi[i])))
    }

    fn validate(&self) -> Result<()> {
        let lo = self.lower.to_array();
        let hi = self.upper.to_array();
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h)) {
            return Err(Error::Config("IDM bounds: lower must not exceed upper".into()));
        }
        self.lower.validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Calibration {
    pub params: IdmParams,
    pub fitness: f64,
    /// Best fitness after each generation (non-increasing).
    pub trace: Vec<f64>,
    pub bounds: IdmBounds,
    pub settings: GaSettings,
}

/// Mean spacing MSE of closed-loop IDM runs over `pairs`.
pub fn spacing_fitness(pairs: &[LeaderFollowerPair], p: &IdmParams) -> f64 {
    let handle = ModelHandle::Idm(*p);
    let total: f64 = pairs
        .iter()
        .map(|pair| match closed_loop_simulate(pair, &handle) {
            Ok(r) => r.mse_spacing,
            Err(_) => f64::INFINITY,
        })
        .sum();
    total / pairs.len() as f64
}

pub fn calibrate_idm(pairs: &[LeaderFollowerPair], bounds: &IdmBounds, ga: &GaSettings) -> Result<Calibration> {
    if pairs.is_empty() {
        return Err(Error::Argument("IDM calibration needs at least one pair".into()));
    }
    if ga.population == 0 || ga.generations == 0 {
        return Err(Error::Config("GA population and generations must be positive".into()));
    }
    if ga.tournament == 0 || ga.elitism > ga.population {
        return Err(Error::Config("GA tournament size must be positive and elitism <= population".into()));
    }
    bounds.validate()?;
    let lo = bounds.lower.to_array();
    let hi = bounds.upper.to_array();
    let mut rng = ChaCha8Rng::seed_from_u64(ga.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut pop: Vec<[f64; 6]> = Vec::with_capacity(ga.population);
    pop.push(bounds.center().to_array());
    while pop.len() < ga.population {
        pop.push(std::array::from_fn(|i| {
            if hi[i] > lo[i] {
                rng.random_range(lo[i]..=hi[i])
            } else {
                lo[i]
            }
        }));
    }
    let evaluate = |pop: &[[f64; 6]]| -> Vec<f64> {
        pop.par_iter()
            .map(|g| spacing_fitness(pairs, &IdmParams::from_array(*g)))
            .collect()
    };
    let mut fit = evaluate(&pop);
    let mut trace = Vec::with_capacity(ga.generations);

    for gen in 0..ga.generations {
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| fit[a].total_cmp(&fit[b]).then(a.cmp(&b)));
        trace.push(fit[order[0]]);
        log::debug!("GA generation {gen}: best spacing MSE {:.6}", fit[order[0]]);
        if gen + 1 == ga.generations {
            let best = order[0];
            return Ok(Calibration {
                params: IdmParams::from_array(pop[best]),
                fitness: fit[best],
                trace,
                bounds: *bounds,
                settings: ga.clone(),
            });
        }

        let tournament = |rng: &mut ChaCha8Rng| -> usize {
            (0..ga.tournament)
                .map(|_| rng.random_range(0..pop.len()))
                .min_by(|&a, &b| fit[a].total_cmp(&fit[b]).then(a.cmp(&b)))
                .expect("tournament size > 0")
        };
        let mut next: Vec<[f64; 6]> = order.iter().take(ga.elitism).map(|&i| pop[i]).collect();
        let mut next_fit: Vec<f64> = order.iter().take(ga.elitism).map(|&i| fit[i]).collect();
        let mut children = Vec::new();
        while next.len() + children.len() < ga.population {
            let pa = pop[tournament(&mut rng)];
            let pb = pop[tournament(&mut rng)];
            let cross = rng.random::<f64>() < ga.crossover_prob;
            let mut child: [f64; 6] =
                std::array::from_fn(|i| if cross && rng.random::<bool>() { pb[i] } else { pa[i] });
            for i in 0..6 {
                if hi[i] > lo[i] && rng.random::<f64>() < ga.mutation_prob {
                    let sigma = ga.mutation_sigma * (hi[i] - lo[i]);
                    child[i] = (child[i] + sigma * std_normal.sample(&mut rng)).clamp(lo[i], hi[i]);
                }
            }
            children.push(child);
        }
        next_fit.extend(evaluate(&children));
        next.extend(children);
        pop = next;
        fit = next_fit;
    }
    unreachable!("loop returns on the final generation")
}
