//! Scenario runner: mapping at one rate, map sharing and per-pair
//! alignment at another, and scoring against ground truth.
//!
//! Scenario files are TOML; see `scenarios/*.toml` for the schema. Any
//! field can be overridden with `section.key=value` strings, where the value
//! is parsed as a TOML literal (bare words fall back to strings).

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clipper::ClipperParams;
use crate::filter::{FilterError, FilterParams, KalmanModel, Mode, TcaffFilter};
use crate::geometry::{gt_alignment, normalize_angle, Pose2};
use crate::object_map::{MapParams, ObjectLandmark, ObjectMap};
use crate::registration::{mno_clipper, MnoParams};
use crate::sim::{self, DriftConfig, RobotTruth, SensorConfig, Waypoint, WorldConfig};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown scenario `{0}` (not a file, and not one of: {1})")]
    UnknownScenario(String, String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("invalid override `{0}`: {1}")]
    Override(String, String),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Scenarios bundled with the library, addressable by name.
pub const BUILTIN_SCENARIOS: &[(&str, &str)] = &[
    ("overlap", include_str!("../scenarios/overlap.toml")),
    ("non-overlap", include_str!("../scenarios/non-overlap.toml")),
    ("indoor-return", include_str!("../scenarios/indoor-return.toml")),
    ("parallel-paths", include_str!("../scenarios/parallel-paths.toml")),
    ("opposite-paths", include_str!("../scenarios/opposite-paths.toml")),
    ("aliased-room", include_str!("../scenarios/aliased-room.toml")),
    ("four-robots", include_str!("../scenarios/four-robots.toml")),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanConfig {
    /// Process noise per sharing step: m², m², rad².
    pub q_diag: [f64; 3],
    /// Measurement noise: m², m², rad².
    pub r_diag: [f64; 3],
}

impl Default for KalmanConfig {
    fn default() -> Self {
        let m = KalmanModel::default();
        Self {
            q_diag: [m.q[(0, 0)], m.q[(1, 1)], m.q[(2, 2)]],
            r_diag: [m.r[(0, 0)], m.r[(1, 1)], m.r[(2, 2)]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotSpec {
    pub id: String,
    /// `[t_s, x_m, y_m, heading_deg]` in the world frame.
    pub waypoints: Vec<Waypoint>,
    /// Per-robot drift; the scenario-wide drift applies when absent.
    #[serde(default)]
    pub drift: Option<DriftConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "default_map_rate")]
    pub map_rate_hz: f64,
    #[serde(default = "default_share_rate")]
    pub share_rate_hz: f64,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub drift: DriftConfig,
    #[serde(default)]
    pub sensor: SensorConfig,
    #[serde(default)]
    pub map: MapParams,
    #[serde(default)]
    pub clipper: ClipperParams,
    #[serde(default)]
    pub mno: MnoParams,
    #[serde(default)]
    pub filter: FilterParams,
    #[serde(default)]
    pub kalman: KalmanConfig,
    pub robots: Vec<RobotSpec>,
}

fn default_map_rate() -> f64 {
    10.0
}

fn default_share_rate() -> f64 {
    1.0
}

impl Scenario {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Scenario> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| HarnessError::Scenario(e.to_string()))?;
        for raw in overrides {
            apply_override(&mut table, raw)?;
        }
        let scenario: Scenario = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Scenario(e.to_string()))?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Loads a scenario from a file path or a built-in name.
    pub fn load(spec: &str, overrides: &[String]) -> Result<Scenario> {
        let path = Path::new(spec);
        if path.is_file() {
            return Scenario::parse(&fs::read_to_string(path)?, overrides);
        }
        match BUILTIN_SCENARIOS.iter().find(|(name, _)| *name == spec) {
            Some((_, text)) => Scenario::parse(text, overrides),
            None => Err(HarnessError::UnknownScenario(
                spec.to_string(),
                BUILTIN_SCENARIOS
                    .iter()
                    .map(|(n, _)| *n)
                    .collect::<Vec<_>>()
                    .join(", "),
            )),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Scenario {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Scenario(m.to_string()));
        if !(self.duration_s > 0.0) || !(self.map_rate_hz > 0.0) || !(self.share_rate_hz > 0.0) {
            return bad("duration and rates must be positive");
        }
        if self.share_rate_hz > self.map_rate_hz {
            return bad("share rate cannot exceed the mapping rate");
        }
        if self.robots.iter().any(|r| r.waypoints.is_empty()) {
            return bad("every robot needs at least one waypoint");
        }
        let ids: HashSet<&str> = self.robots.iter().map(|r| r.id.as_str()).collect();
        if ids.len() != self.robots.len() {
            return bad("robot ids must be unique");
        }
        if !(self.map.kappa > 0.0) {
            return bad("map.kappa must be positive");
        }
        if self.mno.n == 0 || self.mno.min_associations < 2 {
            return bad("mno.n must be >= 1 and mno.min_associations >= 2");
        }
        if !(self.clipper.epsilon > 0.0 && self.clipper.sigma > 0.0 && self.clipper.wh_tol > 0.0) {
            return bad("clipper epsilon, sigma and wh_tol must be positive");
        }
        self.filter.validate()?;
        self.kalman_model()?;
        Ok(())
    }

    pub fn kalman_model(&self) -> Result<KalmanModel> {
        Ok(KalmanModel::from_diagonals(self.kalman.q_diag, self.kalman.r_diag)?)
    }

    /// Number of mapping ticks between map exchanges.
    pub fn share_every(&self) -> usize {
        ((self.map_rate_hz / self.share_rate_hz).round() as usize).max(1)
    }

    pub fn map_ticks(&self) -> usize {
        (self.duration_s * self.map_rate_hz).floor() as usize + 1
    }
}

fn apply_override(table: &mut toml::Table, raw: &str) -> Result<()> {
    let err = |m: &str| HarnessError::Override(raw.to_string(), m.to_string());
    let (key, value) = raw.split_once('=').ok_or_else(|| err("expected key=value"))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(err("empty key segment"));
    }
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));

    let mut cursor = table;
    for seg in &path[..path.len() - 1] {
        cursor = cursor
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| err("path runs through a non-table value"))?;
    }
    cursor.insert(path[path.len() - 1].to_string(), parsed);
    Ok(())
}

/// Deterministic per-purpose seed derived from the scenario seed.
fn derive_seed(seed: u64, key: &[u64]) -> u64 {
    use rand::RngCore;
    sim::keyed_rng(seed, key).next_u64()
}

/// Maps and truth for one map exchange.
pub struct ShareTick<'a> {
    pub step: usize,
    pub map_tick: usize,
    pub time: f64,
    /// Recent view of every robot's map, in robot order.
    pub views: &'a [ObjectMap],
    pub truths: &'a [RobotTruth],
}

impl ShareTick<'_> {
    pub fn gt_alignment(&self, i: usize, j: usize) -> Pose2 {
        let k = self.map_tick;
        let (a, b) = (&self.truths[i], &self.truths[j]);
        gt_alignment(&a.odom_poses[k], &a.world_poses[k], &b.odom_poses[k], &b.world_poses[k])
    }

    /// Whether the two recent maps contain any common world object.
    pub fn overlap(&self, i: usize, j: usize) -> bool {
        let ids: HashSet<u64> = self.views[i].objects.iter().map(|o| o.id).collect();
        self.views[j].objects.iter().any(|o| ids.contains(&o.id))
    }
}

/// World, trajectories and per-robot maps for one seeded scenario run.
pub struct Simulation {
    pub scenario: Scenario,
    pub world: Vec<ObjectLandmark>,
    pub truths: Vec<RobotTruth>,
    maps: Vec<ObjectMap>,
    seed: u64,
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Simulation {
        let seed = scenario.seed;
        let mut world_cfg = scenario.world.clone();
        world_cfg.seed = derive_seed(seed, &[0]);
        let world = sim::generate_world(&world_cfg);
        let dt = 1.0 / scenario.map_rate_hz;
        let ticks = scenario.map_ticks();
        let truths = scenario
            .robots
            .iter()
            .enumerate()
            .map(|(r, spec)| {
                let poses: Vec<Pose2> = (0..ticks)
                    .map(|k| sim::interpolate_waypoints(&spec.waypoints, k as f64 * dt))
                    .collect();
                let drift = spec.drift.unwrap_or(scenario.drift);
                sim::simulate_odometry(&poses, &drift, derive_seed(seed, &[1, r as u64]))
            })
            .collect();
        let maps = scenario.robots.iter().map(|r| ObjectMap::new(r.id.clone())).collect();
        Simulation {
            scenario: scenario.clone(),
            world,
            truths,
            maps,
            seed,
        }
    }

    /// Robot index pairs `(i, j)` with `i < j`.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.scenario.robots.len();
        (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect()
    }

    pub fn pair_label(&self, i: usize, j: usize) -> String {
        format!("{}-{}", self.scenario.robots[i].id, self.scenario.robots[j].id)
    }

    fn map_tick(&mut self, k: usize, now: f64) {
        for (r, map) in self.maps.iter_mut().enumerate() {
            let truth = &self.truths[r];
            let seen = sim::observe(
                &self.world,
                &truth.world_poses[k],
                &truth.odom_poses[k],
                &self.scenario.sensor,
                now,
                derive_seed(self.seed, &[2, r as u64]),
                k as u64,
            );
            for obs in seen {
                map.upsert(obs);
            }
        }
    }

    /// Runs every mapping tick and calls `on_share` at each map exchange.
    /// Returns the wall time of each mapping tick in milliseconds.
    pub fn run<F>(&mut self, mut on_share: F) -> Result<Vec<f64>>
    where
        F: FnMut(&ShareTick) -> Result<()>,
    {
        let dt = 1.0 / self.scenario.map_rate_hz;
        let every = self.scenario.share_every();
        let mut map_ms = Vec::with_capacity(self.scenario.map_ticks());
        let mut step = 0;
        for k in 0..self.scenario.map_ticks() {
            let now = k as f64 * dt;
            let start = Instant::now();
            self.map_tick(k, now);
            map_ms.push(start.elapsed().as_secs_f64() * 1e3);
            if k % every == 0 {
                let views: Vec<ObjectMap> = self
                    .maps
                    .iter()
                    .map(|m| m.recent_view(now, &self.scenario.map))
                    .collect();
                on_share(&ShareTick {
                    step,
                    map_tick: k,
                    time: now,
                    views: &views,
                    truths: &self.truths,
                })?;
                step += 1;
            }
        }
        Ok(map_ms)
    }
}

/// One row of `run.csv`. Column order is fixed by field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub step: usize,
    pub time_s: f64,
    pub pair: String,
    pub gt_x: f64,
    pub gt_y: f64,
    pub gt_theta: f64,
    pub est_x: Option<f64>,
    pub est_y: Option<f64>,
    pub est_theta: Option<f64>,
    pub mode: Mode,
    pub n_meas: usize,
    pub trans_err_m: Option<f64>,
    pub head_err_deg: Option<f64>,
    /// Recent maps of the pair share at least one world object.
    pub overlap: bool,
}

impl RunRecord {
    pub fn new(
        step: usize,
        time_s: f64,
        pair: String,
        gt: Pose2,
        estimate: Option<Pose2>,
        mode: Mode,
        n_meas: usize,
        overlap: bool,
    ) -> RunRecord {
        let errors = estimate.map(|e| {
            let trans = (e.translation() - gt.translation()).norm();
            let head = normalize_angle(e.theta - gt.theta).abs().to_degrees();
            (trans, head)
        });
        RunRecord {
            step,
            time_s,
            pair,
            gt_x: gt.x,
            gt_y: gt.y,
            gt_theta: gt.theta,
            est_x: estimate.map(|e| e.x),
            est_y: estimate.map(|e| e.y),
            est_theta: estimate.map(|e| e.theta),
            mode,
            n_meas,
            trans_err_m: errors.map(|e| e.0),
            head_err_deg: errors.map(|e| e.1),
            overlap,
        }
    }

    pub fn estimate(&self) -> Option<Pose2> {
        match (self.est_x, self.est_y, self.est_theta) {
            (Some(x), Some(y), Some(t)) => Some(Pose2::new(x, y, t)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub ticks: usize,
    pub estimate_ticks: usize,
    pub availability: f64,
    pub mean_trans_err_m: Option<f64>,
    pub std_trans_err_m: Option<f64>,
    pub mean_head_err_deg: Option<f64>,
    pub std_head_err_deg: Option<f64>,
    /// Ticks with an estimate while the pair's recent maps share no object.
    pub false_accepts: usize,
    /// Time from the first record to the first record with an estimate.
    pub time_to_first_lock_s: Option<f64>,
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

/// Error statistics over the records that carry an estimate.
pub fn compute_metrics(records: &[RunRecord]) -> Metrics {
    let with_est: Vec<&RunRecord> = records.iter().filter(|r| r.estimate().is_some()).collect();
    let trans: Vec<f64> = with_est.iter().filter_map(|r| r.trans_err_m).collect();
    let head: Vec<f64> = with_est.iter().filter_map(|r| r.head_err_deg).collect();
    let (mean_t, std_t) = mean_std(&trans);
    let (mean_h, std_h) = mean_std(&head);
    let start = records.first().map(|r| r.time_s);
    Metrics {
        ticks: records.len(),
        estimate_ticks: with_est.len(),
        availability: if records.is_empty() {
            0.0
        } else {
            with_est.len() as f64 / records.len() as f64
        },
        mean_trans_err_m: mean_t,
        std_trans_err_m: std_t,
        mean_head_err_deg: mean_h,
        std_head_err_deg: std_h,
        false_accepts: with_est.iter().filter(|r| !r.overlap).count(),
        time_to_first_lock_s: with_est.first().zip(start).map(|(r, s)| r.time_s - s),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub overall: Metrics,
    pub pairs: BTreeMap<String, Metrics>,
}

impl MetricsReport {
    pub fn from_records(records: &[RunRecord]) -> MetricsReport {
        let mut by_pair: BTreeMap<String, Vec<RunRecord>> = BTreeMap::new();
        for r in records {
            by_pair.entry(r.pair.clone()).or_default().push(r.clone());
        }
        MetricsReport {
            scenario: None,
            seed: None,
            overall: compute_metrics(records),
            pairs: by_pair
                .into_iter()
                .map(|(k, v)| (k, compute_metrics(&v)))
                .collect(),
        }
    }
}

pub struct RunOutput {
    pub records: Vec<RunRecord>,
    pub report: MetricsReport,
    /// Shared maps per exchange step, robot order; filled when requested.
    pub shared_maps: Vec<Vec<ObjectMap>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub keep_maps: bool,
}

struct PairFilter {
    i: usize,
    j: usize,
    label: String,
    filter: TcaffFilter,
}

/// Full pipeline: mapping, association with multiple near optima, and one
/// alignment filter per robot pair.
pub fn run_scenario(scenario: &Scenario, opts: RunOptions) -> Result<RunOutput> {
    let mut sim = Simulation::new(scenario);
    let model = scenario.kalman_model()?;
    let mut pairs = sim
        .pairs()
        .into_iter()
        .map(|(i, j)| {
            Ok(PairFilter {
                i,
                j,
                label: sim.pair_label(i, j),
                filter: TcaffFilter::new(model.clone(), scenario.filter)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    let mut shared_maps = Vec::new();
    sim.run(|tick| {
        if opts.keep_maps {
            shared_maps.push(tick.views.to_vec());
        }
        let rows = pairs
            .par_iter_mut()
            .map(|p| {
                let z = mno_clipper(
                    &tick.views[p.i],
                    &tick.views[p.j],
                    &scenario.clipper,
                    &scenario.mno,
                    tick.time,
                );
                p.filter.step(&z)?;
                Ok(RunRecord::new(
                    tick.step,
                    tick.time,
                    p.label.clone(),
                    tick.gt_alignment(p.i, p.j),
                    p.filter.estimate().map(|g| g.pose()),
                    p.filter.mode(),
                    z.len(),
                    tick.overlap(p.i, p.j),
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        records.extend(rows);
        Ok(())
    })?;

    let mut report = MetricsReport::from_records(&records);
    report.scenario = Some(scenario.name.clone());
    report.seed = Some(scenario.seed);
    Ok(RunOutput {
        records,
        report,
        shared_maps,
    })
}

pub fn write_records_csv<W: io::Write>(records: &[RunRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv<R: io::Read>(input: R) -> Result<Vec<RunRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rd.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

/// Writes `run.csv`, `metrics.json` and, when maps were kept,
/// `maps/<robot_id>/<step>.json`.
pub fn write_run(dir: &Path, output: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_records_csv(&output.records, fs::File::create(dir.join("run.csv"))?)?;
    fs::write(
        dir.join("metrics.json"),
        serde_json::to_string_pretty(&output.report)? + "\n",
    )?;
    for (step, maps) in output.shared_maps.iter().enumerate() {
        for m in maps {
            let robot_dir = dir.join("maps").join(&m.robot_id);
            fs::create_dir_all(&robot_dir)?;
            fs::write(robot_dir.join(format!("{step}.json")), m.serialize())?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "min_assoc", rename_all = "snake_case")]
pub enum Baseline {
    /// Single association solve, accepted when it has at least this many
    /// inliers.
    ClipperThreshold(usize),
    /// Densest multiple-near-optima measurement, always accepted.
    MnoOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub baseline: Baseline,
    pub report: MetricsReport,
}

struct BaselineTick {
    step: usize,
    time: f64,
    pair: String,
    gt: Pose2,
    overlap: bool,
    single: Option<(usize, Pose2)>,
    mno_first: Option<Pose2>,
}

/// Scores single-solution baselines on the same simulated run. The
/// simulation is shared across all requested baselines.
pub fn run_baselines(scenario: &Scenario, baselines: &[Baseline]) -> Result<Vec<BaselineResult>> {
    let mut sim = Simulation::new(scenario);
    let pairs: Vec<(usize, usize, String)> = sim
        .pairs()
        .into_iter()
        .map(|(i, j)| (i, j, sim.pair_label(i, j)))
        .collect();
    let want_mno = baselines.contains(&Baseline::MnoOnly);
    let single = MnoParams {
        n: 1,
        min_associations: 2,
    };
    let mut ticks = Vec::new();
    sim.run(|tick| {
        let rows: Vec<BaselineTick> = pairs
            .par_iter()
            .map(|(i, j, label)| {
                let (vi, vj) = (&tick.views[*i], &tick.views[*j]);
                let first = mno_clipper(vi, vj, &scenario.clipper, &single, tick.time);
                let mno_first = if want_mno {
                    mno_clipper(vi, vj, &scenario.clipper, &scenario.mno, tick.time)
                        .first()
                        .map(|m| m.pose)
                } else {
                    None
                };
                BaselineTick {
                    step: tick.step,
                    time: tick.time,
                    pair: label.clone(),
                    gt: tick.gt_alignment(*i, *j),
                    overlap: tick.overlap(*i, *j),
                    single: first.first().map(|m| (m.num_associations, m.pose)),
                    mno_first,
                }
            })
            .collect();
        ticks.extend(rows);
        Ok(())
    })?;

    Ok(baselines
        .iter()
        .map(|&b| {
            let records: Vec<RunRecord> = ticks
                .iter()
                .map(|t| {
                    let est = match b {
                        Baseline::ClipperThreshold(min) => {
                            t.single.filter(|(n, _)| *n >= min).map(|(_, p)| p)
                        }
                        Baseline::MnoOnly => t.mno_first,
                    };
                    let mode = if est.is_some() { Mode::Locked } else { Mode::Exploring };
                    let n = usize::from(t.single.is_some());
                    RunRecord::new(t.step, t.time, t.pair.clone(), t.gt, est, mode, n, t.overlap)
                })
                .collect();
            let mut report = MetricsReport::from_records(&records);
            report.scenario = Some(scenario.name.clone());
            report.seed = Some(scenario.seed);
            BaselineResult { baseline: b, report }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub name: String,
    pub calls: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub scenario: String,
    pub mean_map_size: f64,
    pub max_map_size: usize,
    pub rows: Vec<TimingRow>,
}

impl TimingReport {
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "scenario {}: mean shared map size {:.1}, max {}\n{:<16} {:>8} {:>12} {:>12}\n",
            self.scenario, self.mean_map_size, self.max_map_size, "stage", "calls", "mean [ms]", "std [ms]"
        );
        for r in &self.rows {
            s += &format!("{:<16} {:>8} {:>12.3} {:>12.3}\n", r.name, r.calls, r.mean_ms, r.std_ms);
        }
        s
    }
}

fn timing_row(name: &str, samples: &[f64]) -> TimingRow {
    let (mean, std) = mean_std(samples);
    TimingRow {
        name: name.to_string(),
        calls: samples.len(),
        mean_ms: mean.unwrap_or(0.0),
        std_ms: std.unwrap_or(0.0),
    }
}

/// Wall time per call of the three pipeline stages, measured sequentially.
pub fn timing_report(scenario: &Scenario) -> Result<TimingReport> {
    let mut sim = Simulation::new(scenario);
    let model = scenario.kalman_model()?;
    let mut filters = sim
        .pairs()
        .into_iter()
        .map(|(i, j)| Ok((i, j, TcaffFilter::new(model.clone(), scenario.filter)?)))
        .collect::<Result<Vec<_>>>()?;
    let (mut mno_ms, mut tcaff_ms, mut sizes) = (Vec::new(), Vec::new(), Vec::new());
    let map_ms = sim.run(|tick| {
        sizes.extend(tick.views.iter().map(|m| m.len()));
        for (i, j, f) in &mut filters {
            let start = Instant::now();
            let z = mno_clipper(
                &tick.views[*i],
                &tick.views[*j],
                &scenario.clipper,
                &scenario.mno,
                tick.time,
            );
            mno_ms.push(start.elapsed().as_secs_f64() * 1e3);
            let start = Instant::now();
            f.step(&z)?;
            tcaff_ms.push(start.elapsed().as_secs_f64() * 1e3);
        }
        Ok(())
    })?;
    Ok(TimingReport {
        scenario: scenario.name.clone(),
        mean_map_size: if sizes.is_empty() {
            0.0
        } else {
            sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
        },
        max_map_size: sizes.iter().copied().max().unwrap_or(0),
        rows: vec![
            timing_row("mapping tick", &map_ms),
            timing_row("mno-clipper", &mno_ms),
            timing_row("tcaff step", &tcaff_ms),
        ],
    })
}
