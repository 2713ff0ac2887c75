//! Multi-seed train/test comparisons of the chance-constrained filter
//! against the same model used at `δ = 0`.

mod report;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::barrier::BarrierSpec;
use crate::control::Desired;
use crate::dynamics::{StateVec, Trajectory};
use crate::episodic::{filtered_rollout, train_episodic, EpisodeConfig};
use crate::error::{Error, Result};
use crate::filter::BackoffSchedule;
use crate::gp::{FitConfig, GPResidualModel};
use crate::system::{StateBox, SystemKind, SystemSetup};

pub use report::{
    count_violation, emit_report, emit_trajectories, summary_stats, CenterStart, ExperimentReport, MethodRun, NamedTrajectory,
    RunReport, RunStatus, SummaryStats, TestRecord,
};

/// Stream of the seeded generator that test points are drawn from; training
/// episodes use streams `0..n_episodes`.
const TEST_STREAM: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemKind,
    pub n_runs: usize,
    pub n_test_points: usize,
    /// Defaults to 5 for the Segway and 10 for the quadrotor.
    pub n_episodes: Option<usize>,
    pub delta_request: f64,
    pub violation_threshold: f64,
    /// Explicit run seeds; otherwise `base_seed .. base_seed + n_runs`.
    pub seeds: Option<Vec<u64>>,
    pub base_seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Replace the true plant by the nominal one.
    pub matched: bool,
    pub dt: Option<f64>,
    pub horizon: Option<f64>,
    pub barrier: Option<BarrierSpec>,
    pub desired: Option<Desired>,
    pub region: Option<StateBox>,
    pub backoff: BackoffSchedule,
    pub label_stride: usize,
    pub max_points: usize,
    pub fit: FitConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: SystemKind::Segway,
            n_runs: 10,
            n_test_points: 10,
            n_episodes: None,
            delta_request: 1.0,
            violation_threshold: -0.05,
            seeds: None,
            base_seed: 0,
            output_dir: None,
            matched: false,
            dt: None,
            horizon: None,
            barrier: None,
            desired: None,
            region: None,
            backoff: BackoffSchedule::default(),
            label_stride: 5,
            max_points: 600,
            fit: FitConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn for_system(system: SystemKind) -> Self {
        Self {
            system,
            ..Self::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn n_episodes(&self) -> usize {
        self.n_episodes.unwrap_or(match self.system {
            SystemKind::Segway => 5,
            SystemKind::Quadrotor => 10,
        })
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        match &self.seeds {
            Some(s) => s.clone(),
            None => (0..self.n_runs as u64).map(|i| self.base_seed + i).collect(),
        }
    }

    /// The benchmark setup with this config's overrides applied.
    pub fn setup(&self) -> Result<SystemSetup> {
        let mut s = SystemSetup::for_kind(self.system);
        if self.matched {
            s = s.matched();
        }
        if let Some(dt) = self.dt {
            s.dt = dt;
        }
        if let Some(h) = self.horizon {
            s.horizon = h;
        }
        if let Some(b) = &self.barrier {
            s.barrier = b.clone();
        }
        if let Some(d) = &self.desired {
            s.desired = d.clone();
        }
        if let Some(r) = &self.region {
            s.region = r.clone();
        }
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_test_points == 0 || self.run_seeds().is_empty() || self.n_episodes() == 0 {
            return Err(Error::Config("runs, test points and episodes must be positive".into()));
        }
        if !(self.delta_request >= 0.0) || !self.violation_threshold.is_finite() {
            return Err(Error::Config("delta must be >= 0 and the threshold finite".into()));
        }
        if self.label_stride == 0 || self.max_points < 2 {
            return Err(Error::Config("label_stride must be >= 1 and max_points >= 2".into()));
        }
        self.setup().map(|_| ())
    }

    pub fn episode_config(&self, setup: &SystemSetup, seed: u64) -> EpisodeConfig {
        EpisodeConfig {
            n_episodes: self.n_episodes(),
            region: setup.region.clone(),
            dt: setup.dt,
            horizon: setup.horizon,
            delta_request: self.delta_request,
            backoff: self.backoff.clone(),
            seed,
            label_stride: self.label_stride,
            max_points: self.max_points,
            fit: FitConfig {
                seed,
                ..self.fit.clone()
            },
        }
    }
}

/// Fresh test initial states for a run, from a stream disjoint from training.
pub fn test_points(region: &StateBox, seed: u64, n: usize) -> Vec<StateVec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TEST_STREAM);
    (0..n).map(|_| region.sample(&mut rng)).collect()
}

/// SHA-256 of a state's little-endian bytes.
pub fn point_hash(x: &StateVec) -> String {
    let mut h = Sha256::new();
    for v in x.iter() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Rollouts of one trained model from each test point at one confidence level.
pub fn evaluate(
    setup: &SystemSetup,
    gp: &GPResidualModel,
    points: &[StateVec],
    delta: f64,
    backoff: &BackoffSchedule,
    threshold: f64,
) -> Result<(MethodRun, Vec<Trajectory>)> {
    let mut tests = Vec::with_capacity(points.len());
    let mut trajs = Vec::with_capacity(points.len());
    for (i, x0) in points.iter().enumerate() {
        let (traj, blew_up, delta_events) = filtered_rollout(setup, Some(gp), x0, delta, backoff, setup.horizon, setup.dt)?;
        tests.push(TestRecord {
            point_index: i,
            point_hash: point_hash(x0),
            min_h: traj.min_h().unwrap_or(f64::NAN),
            violated: blew_up || count_violation(&traj, threshold),
            blew_up,
            delta_events,
        });
        trajs.push(traj);
    }
    Ok((MethodRun::new(delta, tests), trajs))
}

fn run_one(cfg: &ExperimentConfig, setup: &SystemSetup, seed: u64) -> Result<(RunReport, Vec<NamedTrajectory>)> {
    let points = test_points(&setup.region, seed, cfg.n_test_points);
    let hashes: Vec<String> = points.iter().map(point_hash).collect();
    let outcome = match train_episodic(setup, &cfg.episode_config(setup, seed)) {
        Ok(o) => o,
        Err(fail) => {
            return Ok((
                RunReport {
                    seed,
                    status: RunStatus::Excluded {
                        reason: fail.to_string(),
                    },
                    training: fail.logs,
                    dataset_hash: None,
                    point_hashes: hashes,
                    probf: None,
                    mean: None,
                    center: None,
                },
                Vec::new(),
            ))
        }
    };
    let gp = &outcome.model;
    let (probf, probf_trajs) = evaluate(setup, gp, &points, cfg.delta_request, &cfg.backoff, cfg.violation_threshold)?;
    let (mean, mean_trajs) = evaluate(setup, gp, &points, 0.0, &cfg.backoff, cfg.violation_threshold)?;
    let c = [setup.region.center()];
    let (cp, _) = evaluate(setup, gp, &c, cfg.delta_request, &cfg.backoff, cfg.violation_threshold)?;
    let (cm, _) = evaluate(setup, gp, &c, 0.0, &cfg.backoff, cfg.violation_threshold)?;
    let center = CenterStart {
        probf_min_h: cp.tests[0].min_h,
        mean_min_h: cm.tests[0].min_h,
    };

    let mut named = Vec::new();
    for (e, t) in outcome.trajectories.into_iter().enumerate() {
        named.push(NamedTrajectory::new(format!("seed{seed}_train{e}"), t));
    }
    for (i, t) in probf_trajs.into_iter().enumerate() {
        named.push(NamedTrajectory::new(format!("seed{seed}_probf_test{i}"), t));
    }
    for (i, t) in mean_trajs.into_iter().enumerate() {
        named.push(NamedTrajectory::new(format!("seed{seed}_mean_test{i}"), t));
    }
    Ok((
        RunReport {
            seed,
            status: RunStatus::Included,
            training: outcome.logs,
            dataset_hash: Some(gp.dataset().hash()),
            point_hashes: hashes,
            probf: Some(probf),
            mean: Some(mean),
            center: Some(center),
        },
        named,
    ))
}

/// Report plus every trajectory produced along the way.
#[derive(Clone, Debug)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    pub trajectories: Vec<NamedTrajectory>,
}

/// Trains one model per seed, then tests it from the same fresh points at
/// the requested confidence level and at `δ = 0`. Seeds run in parallel;
/// results are ordered by seed position in the config.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let setup = cfg.setup()?;
    let seeds = cfg.run_seeds();
    let results: Vec<Result<(RunReport, Vec<NamedTrajectory>)>> =
        seeds.par_iter().map(|&s| run_one(cfg, &setup, s)).collect();
    let mut runs = Vec::with_capacity(seeds.len());
    let mut trajectories = Vec::new();
    for r in results {
        let (run, trajs) = r?;
        runs.push(run);
        trajectories.extend(trajs);
    }
    Ok(ExperimentRun {
        report: ExperimentReport::new(cfg, runs),
        trajectories,
    })
}
