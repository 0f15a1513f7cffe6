//! One function per subcommand. Each reads its inputs from earlier stage
//! directories and writes its own.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::sync::Arc;

use anyhow::Context;
use drcf::dtw::{extract_newell_params_banded, label_by_threshold};
use drcf::nn::model::{Checkpoint, HybridModel, ModelConfig, ModelKind};
use drcf::physics::{calibrate_idm, Calibration};
use drcf::regime::{label_regimes, section_threshold, DrivingRegime, PairAnalysis, RegimeLabels};
use drcf::segment::{absorb_short, segment_and_refine, Segment};
use drcf::sim::{
    closed_loop_simulate, comparison_table, export_phase_data, export_trajectories, platoon_simulate, ComparisonTable,
    ModelHandle, ModelResults, PlatoonMember, SimResult,
};
use drcf::synth::{generate_synthetic, LeaderSpec, ScenarioConfig};
use drcf::traj::{
    extract_pairs, load_trajectories, split_by_follower, write_trajectories, DatasetSplit, LeaderFollowerPair,
    TrajectoryFormat, TrajectorySet, VehicleId,
};
use drcf::train::{fit_scaler, prepare, CurriculumConfig, TrainLog, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::Run;
use crate::CliError;

const SYNTH: &str = "synthetic";
const INGEST: &str = "ingest";
const SEGMENT: &str = "segment";
const ALIGN: &str = "align";
const CLASSIFY: &str = "classify";
const CALIBRATE: &str = "calibrate-idm";
const TRAIN: &str = "train";
const SIMULATE: &str = "simulate";
const PLATOON: &str = "platoon";
const EVALUATE: &str = "evaluate";
const REPORT: &str = "report";

pub fn gen_synthetic(run: &Run) -> anyhow::Result<()> {
    let syn = &run.config.synthetic;
    let mut rng = ChaCha8Rng::seed_from_u64(run.config.seed);
    let mut scenarios = Vec::with_capacity(syn.scenarios + syn.extra.len());
    for _ in 0..syn.scenarios {
        let leader = LeaderSpec::random(&mut rng, syn.duration_s);
        let spacing = syn.gap_m + syn.headway_s * leader.initial_speed + rng.random_range(0.0..=syn.jitter_m);
        scenarios.push(ScenarioConfig {
            leader,
            follower_count: syn.followers,
            law: syn.law,
            initial_spacings: vec![spacing],
            initial_follower_speed: None,
            noise_sigma: syn.noise_sigma,
            seed: rng.random(),
            lane: 1,
            leader_id: 1,
        });
    }
    scenarios.extend(syn.extra.iter().cloned());

    let mut trajectories = Vec::new();
    let mut labels: BTreeMap<VehicleId, Vec<DrivingRegime>> = BTreeMap::new();
    let mut next_id: VehicleId = 1;
    for (i, mut sc) in scenarios.into_iter().enumerate() {
        sc.leader_id = next_id;
        next_id += sc.follower_count as VehicleId + 1;
        let data = generate_synthetic(&sc).with_context(|| format!("synthetic scenario {i}"))?;
        trajectories.extend(data.set.trajectories);
        labels.extend(data.labels);
    }
    let set = TrajectorySet::new(trajectories);
    run.begin(SYNTH)?;
    run.write_csv(SYNTH, "trajectories.csv", |buf| write_trajectories(&set, buf))?;
    run.write_json(SYNTH, "labels.json", &labels)?;
    log::info!("generated {} vehicles in {}", set.len(), run.root.join(SYNTH).display());
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct Pairs {
    train: Vec<LeaderFollowerPair>,
    val: Vec<LeaderFollowerPair>,
    test: Vec<LeaderFollowerPair>,
}

impl Pairs {
    fn all(&self) -> impl Iterator<Item = &LeaderFollowerPair> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

pub fn ingest(run: &Run) -> anyhow::Result<()> {
    let data = &run.config.data;
    let path = match &data.path {
        Some(p) => p.clone(),
        None => {
            let p = run.path(SYNTH, "trajectories.csv");
            if !p.exists() {
                return Err(CliError::Missing { path: p, producer: "gen-synthetic".into() }.into());
            }
            p
        }
    };
    let set = load_trajectories(&path, TrajectoryFormat::NgsimCsv, data.units)
        .with_context(|| format!("loading {}", path.display()))?;
    for t in &set.trajectories {
        t.validate()?;
    }
    let pairs = extract_pairs(&set, data.min_overlap_s)?;
    if pairs.is_empty() {
        return Err(CliError::Data(format!("{}: no leader-follower pairs of at least {} s", path.display(), data.min_overlap_s)).into());
    }
    let DatasetSplit { train, val, test } =
        split_by_follower(pairs, run.config.split.train_frac, run.config.split.test_frac, run.config.seed)?;
    log::info!("{} vehicles, pairs: {} train, {} val, {} test", set.len(), train.len(), val.len(), test.len());
    run.begin(INGEST)?;
    run.write_json(INGEST, "pairs.json", &Pairs { train, val, test })
}

fn load_pairs(run: &Run) -> anyhow::Result<Pairs> {
    Ok(run.read_json::<Pairs>(INGEST, "pairs.json", "ingest")?.data)
}

pub fn segment(run: &Run) -> anyhow::Result<()> {
    let pairs = load_pairs(run)?;
    let label = &run.config.labeling;
    let all: Vec<&LeaderFollowerPair> = pairs.all().collect();
    let segs = all
        .par_iter()
        .map(|p| {
            let profile = p.follower.speeds();
            let seg = segment_and_refine(&profile, p.overlap.0, &label.seg)?;
            Ok(absorb_short(seg.segments, &profile, p.overlap.0, label.min_segment_s))
        })
        .collect::<drcf::Result<Vec<Vec<Segment>>>>()?;
    run.begin(SEGMENT)?;
    run.write_json(SEGMENT, "segments.json", &segs)?;
    run.write_csv(SEGMENT, "segments.csv", |buf| {
        writeln!(buf, "follower,leader,t_start,t_end,theta,residual")?;
        for (p, ss) in all.iter().zip(&segs) {
            for s in ss {
                writeln!(buf, "{},{},{},{},{},{}", p.follower.id, p.leader.id, s.t_start, s.t_end, s.theta, s.residual)?;
            }
        }
        Ok(())
    })?;
    log::info!("{} segments over {} pairs", segs.iter().map(Vec::len).sum::<usize>(), segs.len());
    Ok(())
}

fn load_segments(run: &Run) -> anyhow::Result<Vec<Vec<Segment>>> {
    Ok(run.read_json(SEGMENT, "segments.json", "segment")?.data)
}

#[derive(Serialize, Deserialize)]
struct AlignedPair {
    follower: VehicleId,
    leader: VehicleId,
    median_tau: f64,
    median_d: f64,
    low_confidence: bool,
    negative_d: usize,
    segment_tau: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Alignment {
    /// Delay threshold separating car-following from free-flow segments, s.
    threshold: f64,
    pairs: Vec<AlignedPair>,
}

pub fn align(run: &Run) -> anyhow::Result<()> {
    let pairs = load_pairs(run)?;
    let segs = load_segments(run)?;
    let all: Vec<&LeaderFollowerPair> = pairs.all().collect();
    if segs.len() != all.len() {
        return Err(CliError::Data("segments do not match the ingested pairs; re-run `drcf segment`".into()).into());
    }
    let band = run.config.labeling.dtw_band;
    let analyses = all
        .par_iter()
        .zip(&segs)
        .map(|(p, ss)| {
            let newell = extract_newell_params_banded(p, band)?;
            let last = ss.len() - 1;
            let segment_tau = ss
                .iter()
                .enumerate()
                .map(|(k, s)| newell.segment_tau(s, k == last).unwrap_or(newell.median_tau))
                .collect();
            Ok(PairAnalysis { segments: ss.clone(), newell, segment_tau })
        })
        .collect::<drcf::Result<Vec<_>>>()?;
    let threshold = section_threshold(&analyses, run.config.labeling.percentile)?;
    let out = Alignment {
        threshold,
        pairs: all
            .iter()
            .zip(analyses)
            .map(|(p, a)| AlignedPair {
                follower: p.follower.id,
                leader: p.leader.id,
                median_tau: a.newell.median_tau,
                median_d: a.newell.median_d,
                low_confidence: a.newell.low_confidence,
                negative_d: a.newell.negative_d,
                segment_tau: a.segment_tau,
            })
            .collect(),
    };
    run.begin(ALIGN)?;
    run.write_json(ALIGN, "alignment.json", &out)?;
    run.write_csv(ALIGN, "alignment.csv", |buf| {
        writeln!(buf, "follower,leader,median_tau,median_d,low_confidence,negative_d")?;
        for a in &out.pairs {
            writeln!(buf, "{},{},{},{},{},{}", a.follower, a.leader, a.median_tau, a.median_d, a.low_confidence, a.negative_d)?;
        }
        Ok(())
    })?;
    log::info!("CF/FF delay threshold {threshold:.2} s");
    Ok(())
}

pub fn classify(run: &Run) -> anyhow::Result<()> {
    let pairs = load_pairs(run)?;
    let segs = load_segments(run)?;
    let alignment: Alignment = run.read_json(ALIGN, "alignment.json", "align")?.data;
    let all: Vec<&LeaderFollowerPair> = pairs.all().collect();
    if segs.len() != all.len() || alignment.pairs.len() != all.len() {
        return Err(CliError::Data("upstream artifacts disagree on the pair count; re-run `drcf segment` and `drcf align`".into()).into());
    }
    let cls = &run.config.labeling.classifier;
    let labels = all
        .iter()
        .zip(&segs)
        .zip(&alignment.pairs)
        .map(|((p, ss), a)| label_regimes(p, ss, &label_by_threshold(&a.segment_tau, alignment.threshold), cls))
        .collect::<drcf::Result<Vec<RegimeLabels>>>()?;
    run.begin(CLASSIFY)?;
    run.write_json(CLASSIFY, "labels.json", &labels)?;
    run.write_csv(CLASSIFY, "labels.csv", |buf| {
        writeln!(buf, "follower,leader,t,regime_id,regime_name,section")?;
        for (p, l) in all.iter().zip(&labels) {
            for ((pt, r), s) in p.follower.points.iter().zip(&l.regimes).zip(&l.sections) {
                writeln!(buf, "{},{},{},{},{},{}", p.follower.id, p.leader.id, pt.t, r.index(), r.name(), s.as_str())?;
            }
        }
        Ok(())
    })?;
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in labels.iter().flat_map(|l| &l.regimes) {
        *counts.entry(r.name()).or_default() += 1;
    }
    log::info!("regime counts {counts:?}");
    Ok(())
}

pub fn calibrate(run: &Run) -> anyhow::Result<()> {
    let pairs = load_pairs(run)?;
    let idm = &run.config.idm;
    let fit: Vec<LeaderFollowerPair> = pairs.train.iter().take(idm.max_pairs).cloned().collect();
    if fit.is_empty() {
        return Err(CliError::Data("no training pairs to calibrate on".into()).into());
    }
    let cal = calibrate_idm(&fit, &idm.bounds, &idm.ga)?;
    log::info!("IDM fitness {:.4} with {:?}", cal.fitness, cal.params);
    run.begin(CALIBRATE)?;
    run.write_json(CALIBRATE, "idm.json", &cal)
}

type Regimes = Vec<Vec<DrivingRegime>>;

/// Train and validation regimes; labels are stored train, val, test.
fn split_labels(pairs: &Pairs, labels: Vec<RegimeLabels>) -> anyhow::Result<(Regimes, Regimes)> {
    if labels.len() != pairs.train.len() + pairs.val.len() + pairs.test.len() {
        return Err(CliError::Data("regime labels do not match the ingested pairs; re-run `drcf classify`".into()).into());
    }
    let mut it = labels.into_iter().map(|l| l.regimes);
    let train = it.by_ref().take(pairs.train.len()).collect();
    let val = it.take(pairs.val.len()).collect();
    Ok((train, val))
}

pub fn train(run: &Run) -> anyhow::Result<()> {
    let pairs = load_pairs(run)?;
    let labels: Vec<RegimeLabels> = run.read_json(CLASSIFY, "labels.json", "classify")?.data;
    let (train_labels, val_labels) = split_labels(&pairs, labels)?;
    if pairs.train.is_empty() {
        return Err(CliError::Data("training split is empty".into()).into());
    }
    let scaler = fit_scaler(&pairs.train);
    let train = prepare(&pairs.train, &train_labels, &scaler)?;
    let val = if pairs.val.is_empty() {
        log::warn!("validation split is empty; validating on the training pairs");
        train.clone()
    } else {
        prepare(&pairs.val, &val_labels, &scaler)?
    };
    let m = &run.config.models;
    run.begin(TRAIN)?;
    for &kind in &m.kinds {
        let dir = run.root.join(TRAIN).join(kind.name());
        std::fs::create_dir_all(&dir)?;
        let model = HybridModel::new(
            ModelConfig { kind, layers: m.layers, hidden: m.hidden, window: m.window, seed: run.config.seed, soft_regime: m.soft_regime },
            scaler,
        )?;
        let cfg = CurriculumConfig { checkpoint_dir: Some(dir.join("stages")), ..run.config.curriculum.clone() };
        let mut trainer = Trainer::new(model, cfg)?;
        let mut log_file = TrainLog::to_file(&dir.join("log.jsonl"))?;
        log::info!("training {}", kind.name());
        trainer.run(&train, &val, Some(&mut log_file))?;
        Checkpoint::new(trainer.model, "final", Some(run.hash.clone())).save(&dir.join("model.json"))?;
    }
    Ok(())
}

fn load_model(run: &Run, kind: ModelKind) -> anyhow::Result<HybridModel> {
    let path = run.root.join(TRAIN).join(kind.name()).join("model.json");
    if !path.exists() {
        return Err(CliError::Missing { path, producer: "train".into() }.into());
    }
    let ck = Checkpoint::load(&path, None)?;
    if ck.config_hash != run.hash {
        log::warn!("{} was trained under config {}; re-run `drcf train` to refresh it", path.display(), ck.config_hash);
    }
    Ok(ck.model)
}

/// Models compared by `simulate`, `platoon` and `evaluate`, in table order.
fn model_handles(run: &Run) -> anyhow::Result<Vec<(String, ModelHandle)>> {
    let mut out = Vec::new();
    for &kind in &run.config.models.kinds {
        out.push((kind.name().to_string(), ModelHandle::Neural(Arc::new(load_model(run, kind)?))));
    }
    if run.config.simulate.idm {
        let cal: Calibration = run.read_json(CALIBRATE, "idm.json", "calibrate-idm")?.data;
        out.push(("idm".to_string(), ModelHandle::Idm(cal.params)));
    }
    Ok(out)
}

fn model_names(run: &Run) -> Vec<String> {
    let mut names: Vec<String> = run.config.models.kinds.iter().map(|k| k.name().to_string()).collect();
    if run.config.simulate.idm {
        names.push("idm".into());
    }
    names
}

pub fn simulate(run: &Run) -> anyhow::Result<()> {
    let pairs = load_pairs(run)?;
    if pairs.test.is_empty() {
        return Err(CliError::Data("test split is empty".into()).into());
    }
    let models = model_handles(run)?;
    run.begin(SIMULATE)?;
    for (name, handle) in &models {
        let results = pairs
            .test
            .par_iter()
            .map(|p| closed_loop_simulate(p, handle))
            .collect::<drcf::Result<Vec<SimResult>>>()?;
        let collisions: usize = results.iter().map(SimResult::collisions).sum();
        if collisions > 0 {
            log::warn!("{name}: {collisions} collision steps over {} test pairs", results.len());
        }
        run.write_json(SIMULATE, &format!("{name}.json"), &results)?;
        run.write_csv(SIMULATE, &format!("{name}_trajectories.csv"), |buf| export_trajectories(&results, buf))?;
    }
    Ok(())
}

pub fn platoon(run: &Run) -> anyhow::Result<()> {
    let sc = &run.config.platoon.scenario;
    let data = generate_synthetic(sc)?;
    let lead = data.set.get(sc.leader_id).expect("scenario leader").clone();
    let observed: Vec<_> = (1..=sc.follower_count as VehicleId)
        .map(|k| data.set.get(sc.leader_id + k).expect("scenario follower").clone())
        .collect();
    let models = model_handles(run)?;
    run.begin(PLATOON)?;
    for (name, handle) in &models {
        let members: Vec<PlatoonMember> =
            observed.iter().map(|o| PlatoonMember { model: handle.clone(), observed: o.clone() }).collect();
        let results = platoon_simulate(&lead, &members)?;
        run.write_json(PLATOON, &format!("{name}.json"), &ModelResults::new(name, &run.hash, &results))?;
        run.write_csv(PLATOON, &format!("{name}_phase.csv"), |buf| export_phase_data(&results, buf))?;
        run.write_csv(PLATOON, &format!("{name}_trajectories.csv"), |buf| export_trajectories(&results, buf))?;
    }
    Ok(())
}

pub fn evaluate(run: &Run) -> anyhow::Result<()> {
    let mut metrics = Vec::new();
    for name in model_names(run) {
        let results: Vec<SimResult> = run.read_json(SIMULATE, &format!("{name}.json"), "simulate")?.data;
        metrics.push(ModelResults::new(&name, &run.hash, &results));
    }
    run.begin(EVALUATE)?;
    run.write_json(EVALUATE, "metrics.json", &metrics)
}

#[derive(Serialize)]
struct Report {
    test: ComparisonTable,
    platoon: Option<ComparisonTable>,
}

pub fn report(run: &Run) -> anyhow::Result<()> {
    let env = run.read_json::<Vec<ModelResults>>(EVALUATE, "metrics.json", "evaluate")?;
    let mut sources = vec![(run.path(EVALUATE, "metrics.json"), env.config_hash.clone())];
    sources.extend(env.data.iter().map(|m| (run.path(EVALUATE, "metrics.json"), m.config_hash.clone())));
    let mut platoon = Vec::new();
    for name in model_names(run) {
        let path = run.path(PLATOON, &format!("{name}.json"));
        if path.exists() {
            let e = run.read_json::<ModelResults>(PLATOON, &format!("{name}.json"), "platoon")?;
            sources.push((path.clone(), e.config_hash.clone()));
            sources.push((path, e.data.config_hash.clone()));
            platoon.push(e.data);
        }
    }
    if let Some((path, hash)) = sources.iter().find(|(_, h)| *h != run.hash) {
        return Err(CliError::Data(format!(
            "{} carries config hash {hash}, expected {}; re-run the pipeline under one configuration",
            path.display(),
            run.hash
        ))
        .into());
    }
    let reference = |ms: &[ModelResults]| {
        ms.iter().find(|m| m.model == ModelKind::LstmDr.name()).unwrap_or(&ms[0]).model.clone()
    };
    let test = comparison_table(&env.data, &reference(&env.data))?;
    let platoon = if platoon.is_empty() { None } else { Some(comparison_table(&platoon, &reference(&platoon))?) };
    let mut md = String::new();
    table_markdown(&mut md, "Closed-loop test pairs", &test);
    if let Some(p) = &platoon {
        table_markdown(&mut md, "Platoon", p);
    }
    run.begin(REPORT)?;
    run.write_json(REPORT, "report.json", &Report { test, platoon })?;
    drcf::util::write_atomic(&run.path(REPORT, "report.md"), md.as_bytes())?;
    print!("{md}");
    std::io::stdout().flush()?;
    Ok(())
}

fn table_markdown(out: &mut String, title: &str, t: &ComparisonTable) {
    let pct = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:+.1}%"));
    let _ = writeln!(out, "## {title}\n\nconfig `{}`, improvement of `{}` over each row\n", t.config_hash, t.reference);
    let _ = writeln!(out, "| model | MSE_a | impr. | MSE_v | impr. | MSE_x | impr. |");
    let _ = writeln!(out, "|---|---|---|---|---|---|---|");
    for r in &t.rows {
        let _ = writeln!(
            out,
            "| {} | {:.4} | {} | {:.4} | {} | {:.4} | {} |",
            r.model,
            r.mse_a,
            pct(r.improvement_a),
            r.mse_v,
            pct(r.improvement_v),
            r.mse_x,
            pct(r.improvement_x)
        );
    }
    out.push('\n');
}
