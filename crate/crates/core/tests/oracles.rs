//! Worked examples checked against independent reference computations.

mod common;

use drcf::dtw::{extract_newell_params, SectionLabel};
use drcf::kinematics::propagate;
use drcf::physics::{IdmParams, NewellConfig};
use drcf::regime::{label_corpus, LabelConfig};
use drcf::segment::{refine_segments, segment_and_refine, SegConfig, Segment};
use drcf::sim::{export_phase_data, export_trajectories, platoon_simulate, ModelHandle, PlatoonMember, SimResult};
use drcf::synth::{generate_synthetic, FollowerLaw, LeaderSpec, ScenarioConfig, ScheduleStep};
use drcf::traj::{extract_pairs, read_trajectories, write_trajectories, LeaderFollowerPair, Trajectory, TrajectoryFormat, Units};
use drcf::DT;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn platoon_scenario(law: FollowerLaw, followers: usize, spacing: f64, noise: f64, seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        leader: LeaderSpec {
            initial_speed: 14.0,
            initial_position: 0.0,
            schedule: vec![
                ScheduleStep { duration_s: 20.0, accel_mps2: 0.0 },
                ScheduleStep { duration_s: 7.0, accel_mps2: -2.0 },
                ScheduleStep { duration_s: 6.0, accel_mps2: 0.0 },
                ScheduleStep { duration_s: 14.0, accel_mps2: 1.0 },
                ScheduleStep { duration_s: 120.0, accel_mps2: 0.0 },
            ],
        },
        follower_count: followers,
        law,
        initial_spacings: vec![spacing],
        initial_follower_speed: None,
        noise_sigma: noise,
        seed,
        lane: 1,
        leader_id: 1,
    }
}

fn run_platoon(cfg: &ScenarioConfig, model: ModelHandle) -> (Trajectory, Vec<SimResult>) {
    let data = generate_synthetic(cfg).unwrap();
    let lead = data.set.get(1).unwrap().clone();
    let members: Vec<PlatoonMember> = (2..=cfg.follower_count as u32 + 1)
        .map(|id| PlatoonMember { model: model.clone(), observed: data.set.get(id).unwrap().clone() })
        .collect();
    let results = platoon_simulate(&lead, &members).unwrap();
    (lead, results)
}

#[test]
fn synthetic_file_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ScenarioConfig {
        leader: common::random_leader(&mut rng, 20.0),
        follower_count: 2,
        law: FollowerLaw::Idm(IdmParams::default()),
        initial_spacings: vec![30.0],
        initial_follower_speed: None,
        noise_sigma: 0.2,
        seed: 3,
        lane: 2,
        leader_id: 7,
    };
    let set = generate_synthetic(&cfg).unwrap().set;
    let mut buf = Vec::new();
    write_trajectories(&set, &mut buf).unwrap();
    let back = read_trajectories(buf.as_slice(), TrajectoryFormat::NgsimCsv, Units::Si).unwrap();
    assert_eq!(back, set);
}

#[test]
fn triangle_profile_splits_at_the_apex() {
    // +1 m/s² for 5 s, then -1 m/s² for 5 s.
    let mut p = vec![10.0];
    for i in 1..=100 {
        let a = if i <= 50 { 1.0 } else { -1.0 };
        p.push(p[i - 1] + a * DT);
    }
    // Exhaustive search over every single interior breakpoint.
    let best = (1..p.len() - 1)
        .min_by(|&a, &b| {
            let cost = |k: usize| Segment::fit(&p, 0.0, 0, k).residual + Segment::fit(&p, 0.0, k, p.len() - 1).residual;
            cost(a).total_cmp(&cost(b))
        })
        .unwrap();
    assert_eq!(best, 50);
    let segs = segment_and_refine(&p, 0.0, &SegConfig::default()).unwrap().segments;
    assert_eq!(segs.len(), 2);
    assert!((segs[0].t_end - best as f64 * DT).abs() <= 0.2);
    assert!((segs[0].theta - 1.0).abs() < 1e-9 && (segs[1].theta + 1.0).abs() < 1e-9);
}

/// Least-squares slope of `y` against the sample grid.
fn slope(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let tm = (n - 1.0) * DT / 2.0;
    let ym = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let t = i as f64 * DT - tm;
        sxy += t * (v - ym);
        sxx += t * t;
    }
    sxy / sxx
}

#[test]
fn refinement_chain_matches_fixed_point_iteration() {
    let slopes = [0.300, 0.308, 0.316];
    let mut p = vec![10.0];
    for s in slopes {
        for _ in 0..20 {
            let last = p[p.len() - 1];
            p.push(last + s * DT);
        }
    }
    let cfg = SegConfig::default();
    let segs: Vec<Segment> = (0..3).map(|k| Segment::fit(&p, 0.0, 20 * k, 20 * (k + 1))).collect();
    let ours: Vec<(usize, usize)> = refine_segments(&segs, &p, 0.0, &cfg).unwrap().iter().map(|s| (s.start, s.end)).collect();

    let mut bounds: Vec<(usize, usize)> = segs.iter().map(|s| (s.start, s.end)).collect();
    loop {
        let theta: Vec<f64> = bounds.iter().map(|&(a, b)| slope(&p[a..=b])).collect();
        match (0..bounds.len() - 1).find(|&i| (theta[i] - theta[i + 1]).abs() < cfg.epsilon_merge) {
            Some(i) => {
                bounds[i].1 = bounds[i + 1].1;
                bounds.remove(i + 1);
            }
            None => break,
        }
    }
    assert_eq!(ours, bounds);
    assert_eq!(ours[0], (0, 40), "first pair merges");
}

#[test]
fn one_second_shift_recovers_delay_and_spacing() {
    // Leader speed oscillates; the follower repeats it 1 s later, starting 20 m behind.
    let shift = 10;
    let n = 400;
    let (mut x, mut v, mut a) = (vec![0.0], vec![12.0], vec![0.0]);
    for k in 1..n + shift {
        let target = 12.0 + 2.5 * (0.35 * k as f64 * DT).sin();
        let st = propagate(x[k - 1], v[k - 1], (target - v[k - 1]) / DT, DT);
        x.push(st.x);
        v.push(st.v);
        a.push(st.a);
    }
    let full = Trajectory::from_series(1, -(shift as i64), &x, &v, &a, 1, None);
    let leader = full.slice_frames(0, n as i64 - 1);
    let x0 = leader.points[0].x - 20.0;
    let fx: Vec<f64> = x[..n].iter().map(|xi| xi - x[0] + x0).collect();
    let follower = Trajectory::from_series(2, 0, &fx, &v[..n], &a[..n], 1, Some(1));
    let displacement = leader.points[0].x - x[0];
    let pair = LeaderFollowerPair::new(leader, follower).unwrap();
    let p = extract_newell_params(&pair).unwrap();
    assert!((p.median_tau - 1.0).abs() <= DT + 1e-9, "tau {}", p.median_tau);
    assert!((p.median_d - 20.0).abs() <= displacement + 1e-6, "d {}", p.median_d);
    assert!((p.median_d - (20.0 - displacement)).abs() <= 15.0 * DT, "d {}", p.median_d);
}

#[test]
fn identical_speed_series_have_zero_delay() {
    let n = 200;
    let (mut x, mut v, mut a) = (vec![0.0], vec![10.0], vec![0.0]);
    for k in 1..n {
        let st = propagate(x[k - 1], v[k - 1], (0.3 * k as f64 * DT).sin(), DT);
        x.push(st.x);
        v.push(st.v);
        a.push(st.a);
    }
    let lx: Vec<f64> = x.iter().map(|xi| xi + 15.0).collect();
    let pair = LeaderFollowerPair::new(
        Trajectory::from_series(1, 0, &lx, &v, &a, 1, None),
        Trajectory::from_series(2, 0, &x, &v, &a, 1, Some(1)),
    )
    .unwrap();
    let p = extract_newell_params(&pair).unwrap();
    assert!(p.tau.iter().all(|&t| t == 0.0));
}

#[test]
fn free_cruisers_are_labeled_free_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(233);
    let mut pairs = Vec::new();
    let mut cruiser = Vec::new();
    for i in 0..30 {
        // Every eighth vehicle trails at a long delay, the way a free-flowing
        // vehicle far behind appears to the alignment.
        let free = i % 8 == 3;
        let (tau_n, d_n) = if free { (4.0, 40.0) } else { (1.2, 8.0) };
        let leader = common::random_leader(&mut rng, 60.0);
        let spacing = d_n + leader.initial_speed * tau_n;
        let cfg = ScenarioConfig {
            leader,
            follower_count: 1,
            law: FollowerLaw::Newell(NewellConfig { tau_n, d_n, v0: 30.0 }),
            initial_spacings: vec![spacing],
            initial_follower_speed: None,
            noise_sigma: 0.0,
            seed: i,
            lane: 1,
            leader_id: 1,
        };
        pairs.push(extract_pairs(&generate_synthetic(&cfg).unwrap().set, 3.0).unwrap().remove(0));
        cruiser.push(free);
    }
    let (labels, _) = label_corpus(&pairs, &LabelConfig::default()).unwrap();
    let (mut free_total, mut free_ff) = (0, 0);
    for (l, &free) in labels.iter().zip(&cruiser) {
        if free {
            free_total += 1;
            let ff = l.sections.iter().filter(|&&s| s == SectionLabel::FF).count();
            if ff * 2 > l.sections.len() {
                free_ff += 1;
            }
        }
    }
    assert!(free_ff as f64 >= 0.9 * free_total as f64, "{free_ff}/{free_total} cruisers labeled FF");
}

#[test]
fn newell_platoon_is_a_translated_leader() {
    let c = NewellConfig { tau_n: 1.0, d_n: 7.0, v0: 30.0 };
    let cfg = platoon_scenario(FollowerLaw::Newell(c), 4, c.d_n + 14.0 * c.tau_n, 0.0, 1);
    let (lead, results) = run_platoon(&cfg, ModelHandle::Newell(c));
    let lx = lead.positions();
    let m = c.delay_steps();
    for (k, r) in results.iter().enumerate() {
        let k1 = k + 1;
        for i in k1 * m + r.warmup..lx.len() {
            let expect = lx[i - k1 * m] - k1 as f64 * c.d_n;
            assert!((r.sim.x[i] - expect).abs() <= 14.0 * DT, "vehicle {k1} step {i}: {} vs {expect}", r.sim.x[i]);
        }
    }
}

#[test]
fn idm_position_error_grows_along_the_platoon() {
    // Observed drivers follow the regime-gain law; the IDM baseline is simulated behind them.
    let idm = IdmParams::default();
    let law = FollowerLaw::RegimeGain(common::regime_gain_law());
    let mut per_position = vec![0.0; 6];
    for seed in 0..4 {
        let cfg = platoon_scenario(law, 6, 2.0 + 1.2 * 14.0, 0.1, seed);
        let (_, results) = run_platoon(&cfg, ModelHandle::Idm(idm));
        for (acc, r) in per_position.iter_mut().zip(&results) {
            *acc += r.mse_x / 4.0;
        }
    }
    assert!(per_position.windows(2).all(|w| w[0] <= w[1]), "{per_position:?}");
}

#[test]
fn export_headers_are_fixed() {
    let idm = IdmParams::default();
    let cfg = platoon_scenario(FollowerLaw::Idm(idm), 2, idm.equilibrium_spacing(14.0), 0.0, 0);
    let (_, results) = run_platoon(&cfg, ModelHandle::Idm(idm));
    let (mut phase, mut traj) = (Vec::new(), Vec::new());
    export_phase_data(&results, &mut phase).unwrap();
    export_trajectories(&results, &mut traj).unwrap();
    let (phase, traj) = (String::from_utf8(phase).unwrap(), String::from_utf8(traj).unwrap());
    assert_eq!(phase.lines().next(), Some("vehicle,t,dv_obs,dd_obs,v_obs,dv_sim,dd_sim,v_sim"));
    assert_eq!(traj.lines().next(), Some("t,vehicle,x,v,a,error_x"));
    assert!(phase.lines().all(|l| l.split(',').count() == 8));
    assert!(traj.lines().all(|l| l.split(',').count() == 6));
    assert_eq!(phase.lines().count(), 1 + 2 * results[0].t.len());
}

fn phase_trace(results: &[SimResult]) -> Vec<Vec<(f64, f64)>> {
    let mut csv = Vec::new();
    export_phase_data(results, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut traces = vec![Vec::new(); results.len()];
    for line in text.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        let k = results.iter().position(|r| r.vehicle as f64 == f[0]).unwrap();
        traces[k].push((f[5], f[6]));
    }
    traces
}

#[test]
fn equilibrium_phase_trace_is_a_point() {
    let idm = IdmParams::default();
    let mut cfg = platoon_scenario(FollowerLaw::Idm(idm), 3, idm.equilibrium_spacing(14.0), 0.0, 0);
    cfg.leader.schedule = vec![ScheduleStep { duration_s: 60.0, accel_mps2: 0.0 }];
    let (_, results) = run_platoon(&cfg, ModelHandle::Idm(idm));
    for tr in phase_trace(&results) {
        let spread = |f: fn(&(f64, f64)) -> f64| {
            tr.iter().map(f).fold(f64::MIN, f64::max) - tr.iter().map(f).fold(f64::MAX, f64::min)
        };
        assert!(spread(|p| p.0) <= 1e-5 && spread(|p| p.1) <= 1e-5);
    }
}

#[test]
fn stop_and_go_phase_trace_closes() {
    let idm = IdmParams::default();
    let cfg = platoon_scenario(FollowerLaw::Idm(idm), 8, idm.equilibrium_spacing(14.0), 0.0, 9);
    let (_, results) = run_platoon(&cfg, ModelHandle::Idm(idm));
    for tr in phase_trace(&results) {
        // Per axis, relative to the trace's range.
        let range = |f: fn(&(f64, f64)) -> f64| {
            tr.iter().map(f).fold(f64::MIN, f64::max) - tr.iter().map(f).fold(f64::MAX, f64::min)
        };
        let (rx, ry) = (range(|p| p.0), range(|p| p.1));
        let (s, e) = (tr[0], tr[tr.len() - 1]);
        assert!((s.0 - e.0).abs() <= 0.05 * rx && (s.1 - e.1).abs() <= 0.05 * ry);
        let far = tr.iter().any(|p| (p.0 - s.0).abs() > 0.2 * rx || (p.1 - s.1).abs() > 0.2 * ry);
        assert!(far);
    }
}
