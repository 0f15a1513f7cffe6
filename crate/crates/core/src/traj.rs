//! Trajectory data model, NGSIM-style CSV ingestion and leader-follower pairing.
//!
//! Internally everything is SI and sampled on the global [`DT`] grid. A point's
//! `frame` is its integer grid index (`t = frame * DT`), which keeps timestep
//! matching between vehicles exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::DT;

pub type VehicleId = u32;

/// Tolerance on the kinematic consistency check, in metres.
pub const TOL_KIN: f64 = 0.05;

/// Column header of the trajectory CSV format.
pub const CSV_HEADER: [&str; 8] = [
    "vehicle_id",
    "frame",
    "time_s",
    "pos_m",
    "speed_mps",
    "accel_mps2",
    "lane",
    "leader_id",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub frame: i64,
    pub t: f64,
    pub x: f64,
    pub v: f64,
    pub a: f64,
    pub lane: i32,
    pub leader_id: Option<VehicleId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: VehicleId,
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    /// Builds a trajectory from SI series starting at `frame0`. `a[k]` is the
    /// acceleration that produced `v[k]` from `v[k-1]`.
    pub fn from_series(
        id: VehicleId,
        frame0: i64,
        x: &[f64],
        v: &[f64],
        a: &[f64],
        lane: i32,
        leader_id: Option<VehicleId>,
    ) -> Self {
        let points = (0..x.len())
            .map(|k| {
                let frame = frame0 + k as i64;
                TrajectoryPoint {
                    frame,
                    t: frame as f64 * DT,
                    x: x[k],
                    v: v[k],
                    a: a[k],
                    lane,
                    leader_id,
                }
            })
            .collect();
        Trajectory { id, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first_frame(&self) -> Option<i64> {
        self.points.first().map(|p| p.frame)
    }

    pub fn last_frame(&self) -> Option<i64> {
        self.points.last().map(|p| p.frame)
    }

    pub fn duration(&self) -> f64 {
        self.points.len().saturating_sub(1) as f64 * DT
    }

    pub fn at_frame(&self, frame: i64) -> Option<&TrajectoryPoint> {
        let first = self.first_frame()?;
        let idx = frame.checked_sub(first)?;
        if idx < 0 {
            return None;
        }
        self.points.get(idx as usize)
    }

    /// Points with `start <= frame <= end`.
    pub fn slice_frames(&self, start: i64, end: i64) -> Trajectory {
        Trajectory {
            id: self.id,
            points: self
                .points
                .iter()
                .filter(|p| p.frame >= start && p.frame <= end)
                .copied()
                .collect(),
        }
    }

    pub fn positions(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.x).collect()
    }

    pub fn speeds(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.v).collect()
    }

    pub fn accels(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.a).collect()
    }

    pub fn times(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.t).collect()
    }

    /// Checks grid spacing, non-negative speed and kinematic consistency.
    pub fn validate(&self) -> Result<()> {
        let a_max = self.points.iter().map(|p| p.a.abs()).fold(0.0, f64::max);
        let bound = 0.5 * a_max * DT * DT + TOL_KIN;
        for (k, p) in self.points.iter().enumerate() {
            if !(p.v >= 0.0) {
                return Err(Error::Data(format!(
                    "vehicle {}: negative or NaN speed {} at t={}",
                    self.id, p.v, p.t
                )));
            }
            if k > 0 {
                let prev = &self.points[k - 1];
                if p.frame != prev.frame + 1 {
                    return Err(Error::Data(format!(
                        "vehicle {}: frames {} -> {} are not consecutive",
                        self.id, prev.frame, p.frame
                    )));
                }
                let resid = (p.x - prev.x - prev.v * DT).abs();
                if resid > bound {
                    return Err(Error::Data(format!(
                        "vehicle {}: kinematic residual {:.4} m exceeds {:.4} m at t={}",
                        self.id, resid, bound, p.t
                    )));
                }
            }
        }
        Ok(())
    }
}

/// All trajectories of one recording, sorted by vehicle id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub trajectories: Vec<Trajectory>,
}

impl TrajectorySet {
    pub fn new(mut trajectories: Vec<Trajectory>) -> Self {
        trajectories.sort_by_key(|t| t.id);
        TrajectorySet { trajectories }
    }

    pub fn get(&self, id: VehicleId) -> Option<&Trajectory> {
        self.trajectories
            .binary_search_by_key(&id, |t| t.id)
            .ok()
            .map(|i| &self.trajectories[i])
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// Unit system of an input file. Values are converted to SI once, at load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    #[default]
    Si,
    /// Feet, feet/s, feet/s² (raw NGSIM convention).
    Imperial,
}

impl Units {
    fn length_scale(self) -> f64 {
        match self {
            Units::Si => 1.0,
            Units::Imperial => 0.3048,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryFormat {
    NgsimCsv,
}

struct Columns {
    vehicle_id: usize,
    frame: usize,
    time_s: usize,
    pos: usize,
    speed: usize,
    accel: usize,
    lane: usize,
    leader_id: usize,
}

impl Columns {
    fn from_header(header: &csv::StringRecord) -> Result<Self> {
        let find = |name: &str| {
            header
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::Schema(format!("missing required column `{name}`")))
        };
        Ok(Columns {
            vehicle_id: find("vehicle_id")?,
            frame: find("frame")?,
            time_s: find("time_s")?,
            pos: find("pos_m")?,
            speed: find("speed_mps")?,
            accel: find("accel_mps2")?,
            lane: find("lane")?,
            leader_id: find("leader_id")?,
        })
    }
}

struct RawRow {
    t: f64,
    x: f64,
    v: f64,
    a: f64,
    lane: i32,
    leader_id: Option<VehicleId>,
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, idx: usize, name: &str, line: usize) -> Result<T> {
    let raw = rec.get(idx).ok_or_else(|| Error::Parse {
        line,
        msg: format!("missing field `{name}`"),
    })?;
    raw.trim().parse::<T>().map_err(|_| Error::Parse {
        line,
        msg: format!("cannot parse `{name}` from {raw:?}"),
    })
}

/// Loads a trajectory file. See [`read_trajectories`].
pub fn load_trajectories(path: &Path, format: TrajectoryFormat, units: Units) -> Result<TrajectorySet> {
    let file = std::fs::File::open(path)?;
    read_trajectories(file, format, units)
}

/// Parses trajectory CSV from any reader.
///
/// Rows may come in any order; each vehicle is sorted by time. Vehicles whose
/// sampling interval differs from [`DT`] are linearly resampled onto the grid.
/// Lines starting with `#` are skipped.
pub fn read_trajectories<R: Read>(reader: R, format: TrajectoryFormat, units: Units) -> Result<TrajectorySet> {
    let TrajectoryFormat::NgsimCsv = format;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).from_reader(reader);
    let cols = Columns::from_header(rdr.headers()?)?;
    let scale = units.length_scale();

    let mut by_vehicle: BTreeMap<VehicleId, Vec<RawRow>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let id: VehicleId = field(&rec, cols.vehicle_id, "vehicle_id", line)?;
        let _frame: i64 = field(&rec, cols.frame, "frame", line)?;
        let t: f64 = field(&rec, cols.time_s, "time_s", line)?;
        let x: f64 = field(&rec, cols.pos, "pos_m", line)?;
        let v: f64 = field(&rec, cols.speed, "speed_mps", line)?;
        let a: f64 = field(&rec, cols.accel, "accel_mps2", line)?;
        let lane: i32 = field(&rec, cols.lane, "lane", line)?;
        let leader_raw = rec.get(cols.leader_id).unwrap_or("").trim();
        let leader_id = if leader_raw.is_empty() {
            None
        } else {
            Some(leader_raw.parse::<VehicleId>().map_err(|_| Error::Parse {
                line,
                msg: format!("cannot parse `leader_id` from {leader_raw:?}"),
            })?)
        };
        if ![t, x, v, a].iter().all(|f| f.is_finite()) {
            return Err(Error::Parse {
                line,
                msg: "non-finite numeric field".into(),
            });
        }
        by_vehicle.entry(id).or_default().push(RawRow {
            t,
            x: x * scale,
            v: v * scale,
            a: a * scale,
            lane,
            leader_id,
        });
    }

    let mut trajectories = Vec::with_capacity(by_vehicle.len());
    for (id, mut rows) in by_vehicle {
        rows.sort_by(|a, b| a.t.total_cmp(&b.t));
        for w in rows.windows(2) {
            if w[1].t <= w[0].t {
                return Err(Error::Data(format!(
                    "vehicle {id}: non-monotone time at t={} (duplicate or out-of-order sample)",
                    w[1].t
                )));
            }
        }
        let on_grid = rows.windows(2).all(|w| ((w[1].t - w[0].t) - DT).abs() < 1e-6)
            && ((rows[0].t / DT).round() * DT - rows[0].t).abs() < 1e-6;
        let traj = if on_grid {
            let points = rows
                .iter()
                .map(|r| {
                    let frame = (r.t / DT).round() as i64;
                    TrajectoryPoint {
                        frame,
                        t: frame as f64 * DT,
                        x: r.x,
                        v: r.v,
                        a: r.a,
                        lane: r.lane,
                        leader_id: r.leader_id,
                    }
                })
                .collect();
            Trajectory { id, points }
        } else {
            resample(id, &rows)
        };
        trajectories.push(traj);
    }
    Ok(TrajectorySet::new(trajectories))
}

/// Linear resampling onto the DT grid; lane and leader carry over from the
/// latest sample at or before each grid time.
fn resample(id: VehicleId, rows: &[RawRow]) -> Trajectory {
    let first = (rows[0].t / DT - 1e-9).ceil() as i64;
    let last = (rows[rows.len() - 1].t / DT + 1e-9).floor() as i64;
    let mut points = Vec::new();
    let mut j = 0;
    for frame in first..=last {
        let t = frame as f64 * DT;
        while j + 1 < rows.len() && rows[j + 1].t <= t {
            j += 1;
        }
        let r0 = &rows[j];
        let (x, v, a) = if j + 1 < rows.len() {
            let r1 = &rows[j + 1];
            let w = ((t - r0.t) / (r1.t - r0.t)).clamp(0.0, 1.0);
            let lerp = |p: f64, q: f64| p + (q - p) * w;
            (lerp(r0.x, r1.x), lerp(r0.v, r1.v), lerp(r0.a, r1.a))
        } else {
            (r0.x, r0.v, r0.a)
        };
        points.push(TrajectoryPoint {
            frame,
            t,
            x,
            v,
            a,
            lane: r0.lane,
            leader_id: r0.leader_id,
        });
    }
    Trajectory { id, points }
}

/// Writes trajectories in the CSV format accepted by [`read_trajectories`].
pub fn write_trajectories<W: Write>(set: &TrajectorySet, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(CSV_HEADER)?;
    for traj in &set.trajectories {
        for p in &traj.points {
            w.write_record([
                traj.id.to_string(),
                p.frame.to_string(),
                p.t.to_string(),
                p.x.to_string(),
                p.v.to_string(),
                p.a.to_string(),
                p.lane.to_string(),
                p.leader_id.map(|l| l.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_trajectories(set: &TrajectorySet, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_trajectories(set, &mut buf)?;
    crate::util::write_atomic(path, &buf)?;
    Ok(())
}

/// Synchronized leader and follower over a common interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderFollowerPair {
    pub leader: Trajectory,
    pub follower: Trajectory,
    /// `(t_start, t_end)` in seconds.
    pub overlap: (f64, f64),
    /// `x_leader - x_follower` per timestep.
    pub spacing: Vec<f64>,
    /// `v_leader - v_follower` per timestep.
    pub rel_speed: Vec<f64>,
}

impl LeaderFollowerPair {
    /// Pairs two trajectories covering identical frames with positive spacing.
    pub fn new(leader: Trajectory, follower: Trajectory) -> Result<Self> {
        if leader.len() != follower.len() || leader.is_empty() {
            return Err(Error::Argument("leader and follower must cover the same non-empty frames".into()));
        }
        let mut spacing = Vec::with_capacity(leader.len());
        let mut rel_speed = Vec::with_capacity(leader.len());
        for (l, f) in leader.points.iter().zip(&follower.points) {
            if l.frame != f.frame {
                return Err(Error::Argument(format!("frame mismatch {} vs {}", l.frame, f.frame)));
            }
            let s = l.x - f.x;
            if !(s > 0.0) {
                return Err(Error::Data(format!("non-positive spacing {s} at t={}", f.t)));
            }
            spacing.push(s);
            rel_speed.push(l.v - f.v);
        }
        let overlap = (follower.points[0].t, follower.points[follower.len() - 1].t);
        Ok(LeaderFollowerPair {
            leader,
            follower,
            overlap,
            spacing,
            rel_speed,
        })
    }

    pub fn len(&self) -> usize {
        self.follower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.follower.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.overlap.1 - self.overlap.0
    }
}

/// Minimum admissible pair duration, seconds.
pub const MIN_PAIR_OVERLAP: f64 = 3.0;

/// Splits every follower into maximal intervals with a constant, present
/// leader and positive spacing. Intervals shorter than `min_overlap` are
/// dropped. Brief leader occlusions are never stitched.
pub fn extract_pairs(set: &TrajectorySet, min_overlap: f64) -> Result<Vec<LeaderFollowerPair>> {
    if min_overlap < MIN_PAIR_OVERLAP {
        return Err(Error::Argument(format!(
            "min_overlap must be at least {MIN_PAIR_OVERLAP} s, got {min_overlap}"
        )));
    }
    let mut pairs = Vec::new();
    for follower in &set.trajectories {
        // (leader id, start index) of the run being built
        let mut run: Option<(VehicleId, usize)> = None;
        let close = |run: &mut Option<(VehicleId, usize)>, end: usize, pairs: &mut Vec<LeaderFollowerPair>| {
            if let Some((lid, start)) = run.take() {
                let f0 = follower.points[start].frame;
                let f1 = follower.points[end - 1].frame;
                if (f1 - f0) as f64 * DT + 1e-9 >= min_overlap {
                    let leader = set.get(lid).expect("leader checked during scan");
                    let pair = LeaderFollowerPair::new(leader.slice_frames(f0, f1), follower.slice_frames(f0, f1))
                        .expect("run only contains valid steps");
                    pairs.push(pair);
                }
            }
        };
        for (k, p) in follower.points.iter().enumerate() {
            let valid = p.leader_id.filter(|&lid| {
                set.get(lid)
                    .and_then(|l| l.at_frame(p.frame))
                    .is_some_and(|lp| lp.x - p.x > 0.0)
            });
            match (valid, run) {
                (Some(lid), Some((cur, _))) if lid == cur => {}
                (Some(lid), _) => {
                    close(&mut run, k, &mut pairs);
                    run = Some((lid, k));
                }
                (None, _) => close(&mut run, k, &mut pairs),
            }
        }
        close(&mut run, follower.points.len(), &mut pairs);
    }
    Ok(pairs)
}

/// Train/validation/test partition, disjoint by follower id.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<LeaderFollowerPair>,
    pub val: Vec<LeaderFollowerPair>,
    pub test: Vec<LeaderFollowerPair>,
}

/// Shuffles follower ids with `seed` and assigns `test_frac` of them to test;
/// the rest is divided `train_frac : (1 - train_frac)` between train and val.
pub fn split_by_follower(
    pairs: Vec<LeaderFollowerPair>,
    train_frac: f64,
    test_frac: f64,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&train_frac) || !(0.0..1.0).contains(&test_frac) {
        return Err(Error::Config("split fractions must lie in [0, 1]".into()));
    }
    let mut ids: Vec<VehicleId> = pairs.iter().map(|p| p.follower.id).collect();
    ids.sort_unstable();
    ids.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let n_test = (ids.len() as f64 * test_frac).round() as usize;
    let n_rest = ids.len() - n_test;
    let n_train = ((n_rest as f64) * train_frac).round() as usize;
    let mut role = BTreeMap::new();
    for (k, id) in ids.iter().enumerate() {
        let r = if k < n_test {
            2
        } else if k < n_test + n_train {
            0
        } else {
            1
        };
        role.insert(*id, r);
    }
    let mut split = DatasetSplit::default();
    for p in pairs {
        match role[&p.follower.id] {
            0 => split.train.push(p),
            1 => split.val.push(p),
            _ => split.test.push(p),
        }
    }
    Ok(split)
}
