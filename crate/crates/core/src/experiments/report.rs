use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ExperimentConfig;
use crate::barrier::BarrierShape;
use crate::dynamics::Trajectory;
use crate::episodic::EpisodeLog;
use crate::error::{Error, Result};
use crate::system::SystemKind;

/// Points on the safe-set boundary written to the phase-plot file.
const BOUNDARY_SAMPLES: usize = 256;

/// True when the barrier dips strictly below `threshold` anywhere.
pub fn count_violation(traj: &Trajectory, threshold: f64) -> bool {
    traj.min_h().is_some_and(|h| h < threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestRecord {
    pub point_index: usize,
    pub point_hash: String,
    pub min_h: f64,
    pub violated: bool,
    pub blew_up: bool,
    /// Steps where the requested confidence level was infeasible.
    pub delta_events: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRun {
    pub delta: f64,
    pub violations: usize,
    pub violation_pct: f64,
    /// Test trajectories with at least one infeasible step.
    pub early_warnings: usize,
    pub tests: Vec<TestRecord>,
}

impl MethodRun {
    pub fn new(delta: f64, tests: Vec<TestRecord>) -> Self {
        let violations = tests.iter().filter(|t| t.violated).count();
        let violation_pct = if tests.is_empty() {
            0.0
        } else {
            100.0 * violations as f64 / tests.len() as f64
        };
        Self {
            delta,
            violations,
            violation_pct,
            early_warnings: tests.iter().filter(|t| t.delta_events > 0).count(),
            tests,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunStatus {
    Included,
    Excluded { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    #[serde(flatten)]
    pub status: RunStatus,
    pub training: Vec<EpisodeLog>,
    pub dataset_hash: Option<String>,
    pub point_hashes: Vec<String>,
    pub probf: Option<MethodRun>,
    pub mean: Option<MethodRun>,
    pub center: Option<CenterStart>,
}

/// Lowest barrier value from the center of the initial region, with and
/// without the variance term.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterStart {
    pub probf_min_h: f64,
    pub mean_min_h: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub n: usize,
    pub mean_pct: f64,
    /// Sample standard deviation; zero with fewer than two runs.
    pub std_pct: f64,
}

/// Welford mean and sample standard deviation.
pub fn summary_stats(values: &[f64]) -> SummaryStats {
    let (mut mean, mut m2) = (0.0, 0.0);
    for (k, v) in values.iter().enumerate() {
        let d = v - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (v - mean);
    }
    let n = values.len();
    SummaryStats {
        n,
        mean_pct: mean,
        std_pct: if n > 1 { (m2 / (n - 1) as f64).max(0.0).sqrt() } else { 0.0 },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub system: SystemKind,
    pub delta_request: f64,
    pub violation_threshold: f64,
    pub n_runs: usize,
    pub included: usize,
    pub excluded: usize,
    /// Violation percentage across included runs at `delta_request`.
    pub probf: SummaryStats,
    /// Same at `δ = 0`.
    pub mean: SummaryStats,
    pub runs: Vec<RunReport>,
}

impl ExperimentReport {
    pub fn new(cfg: &ExperimentConfig, runs: Vec<RunReport>) -> Self {
        let pct = |pick: fn(&RunReport) -> Option<&MethodRun>| -> Vec<f64> {
            runs.iter().filter_map(|r| pick(r).map(|m| m.violation_pct)).collect()
        };
        let probf = summary_stats(&pct(|r| r.probf.as_ref()));
        let mean = summary_stats(&pct(|r| r.mean.as_ref()));
        let included = runs.iter().filter(|r| r.status == RunStatus::Included).count();
        Self {
            system: cfg.system,
            delta_request: cfg.delta_request,
            violation_threshold: cfg.violation_threshold,
            n_runs: runs.len(),
            included,
            excluded: runs.len() - included,
            probf,
            mean,
            runs,
        }
    }

    /// `seed,method,delta,status,violations,n_tests,violation_pct,early_warnings`,
    /// two rows per run.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("seed,method,delta,status,violations,n_tests,violation_pct,early_warnings\n");
        for r in &self.runs {
            let status = match &r.status {
                RunStatus::Included => "included",
                RunStatus::Excluded { .. } => "excluded",
            };
            for (name, delta, m) in [
                ("probf", self.delta_request, &r.probf),
                ("mean", 0.0, &r.mean),
            ] {
                match m {
                    Some(m) => writeln!(
                        out,
                        "{},{name},{delta},{status},{},{},{},{}",
                        r.seed,
                        m.violations,
                        m.tests.len(),
                        m.violation_pct,
                        m.early_warnings
                    ),
                    None => writeln!(out, "{},{name},{delta},{status},,,,", r.seed),
                }
                .expect("writing to a String");
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTrajectory {
    pub name: String,
    pub trajectory: Trajectory,
}

impl NamedTrajectory {
    pub fn new(name: impl Into<String>, trajectory: Trajectory) -> Self {
        Self {
            name: name.into(),
            trajectory,
        }
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// `report.json` and `summary.csv`.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("report.json"), &serde_json::to_string_pretty(report)?)?;
    write(&dir.join("summary.csv"), &report.summary_csv())
}

/// One CSV per trajectory under `trajectories/`, and `phase.csv` holding the
/// phase-plane pairs of every trajectory plus the sampled safe-set boundary
/// (series `boundary`).
pub fn emit_trajectories(trajs: &[NamedTrajectory], shape: &BarrierShape, dir: &Path) -> Result<()> {
    let tdir = dir.join("trajectories");
    std::fs::create_dir_all(&tdir).map_err(|e| Error::io(&tdir, e))?;
    for t in trajs {
        t.trajectory.write_csv(&tdir.join(format!("{}.csv", t.name)))?;
    }
    let Some((i, j)) = shape.phase_coordinates() else {
        return Ok(());
    };
    let mut out = String::from("series,t,a,b\n");
    for p in shape.boundary(BOUNDARY_SAMPLES) {
        writeln!(out, "boundary,,{},{}", p[0], p[1]).expect("writing to a String");
    }
    for t in trajs {
        for (time, x) in t.trajectory.times.iter().zip(&t.trajectory.states) {
            writeln!(out, "{},{time},{},{}", t.name, x[i], x[j]).expect("writing to a String");
        }
    }
    write(&dir.join("phase.csv"), &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::segway_barrier;
    use crate::dynamics::{make_segway, rollout, Feedback, StateVec};
    use nalgebra::DVector;

    fn traj_with_min(h: f64) -> Trajectory {
        let mut c = Feedback(|_t: f64, _x: &StateVec| DVector::from_element(1, 0.0));
        let mut t = rollout(&make_segway(), &mut c, &DVector::from_element(4, 0.1383), 0.02, 0.01, None).unwrap();
        t.h_values = vec![0.1, h, 0.05];
        t
    }

    #[test]
    fn violation_rule_is_strict() {
        assert!(count_violation(&traj_with_min(-0.06), -0.05));
        assert!(!count_violation(&traj_with_min(-0.04), -0.05));
        assert!(!count_violation(&traj_with_min(-0.05), -0.05));
    }

    #[test]
    fn welford_matches_two_pass() {
        let v = [0.0, 10.0, 20.0, 20.0, 0.0, 30.0, 10.0, 40.0, 0.0, 10.0];
        let s = summary_stats(&v);
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
        assert!((s.mean_pct - mean).abs() < 1e-12);
        assert!((s.std_pct - var.sqrt()).abs() < 1e-12);
        assert_eq!(summary_stats(&[]).std_pct, 0.0);
        assert_eq!(summary_stats(&[30.0]).std_pct, 0.0);
    }

    fn record(i: usize, violated: bool) -> TestRecord {
        TestRecord {
            point_index: i,
            point_hash: format!("{i}"),
            min_h: if violated { -0.1 } else { 0.1 },
            violated,
            blew_up: false,
            delta_events: i % 2,
        }
    }

    #[test]
    fn empty_report_is_valid_json() {
        let r = ExperimentReport::new(&ExperimentConfig::default(), Vec::new());
        let v: serde_json::Value = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(v["n_runs"], 0);
        assert_eq!(r.summary_csv().lines().count(), 1);
    }

    #[test]
    fn summary_has_two_rows_per_run() {
        let runs = (0..3)
            .map(|s| RunReport {
                seed: s,
                status: if s == 1 {
                    RunStatus::Excluded {
                        reason: "diverged".into(),
                    }
                } else {
                    RunStatus::Included
                },
                training: Vec::new(),
                dataset_hash: None,
                point_hashes: Vec::new(),
                probf: (s != 1).then(|| MethodRun::new(1.0, vec![record(0, false), record(1, true)])),
                mean: (s != 1).then(|| MethodRun::new(0.0, vec![record(0, true), record(1, true)])),
                center: None,
            })
            .collect();
        let r = ExperimentReport::new(&ExperimentConfig::default(), runs);
        assert_eq!(r.summary_csv().lines().count(), 1 + 3 * 2);
        assert_eq!((r.included, r.excluded), (2, 1));
        assert_eq!(r.probf.mean_pct, 50.0);
        assert_eq!(r.mean.mean_pct, 100.0);
        assert_eq!(r.runs[0].probf.as_ref().unwrap().early_warnings, 1);
    }

    #[test]
    fn emits_files() {
        let dir = std::env::temp_dir().join(format!("probf-emit-{}", std::process::id()));
        let r = ExperimentReport::new(&ExperimentConfig::default(), Vec::new());
        emit_report(&r, &dir).unwrap();
        let t = NamedTrajectory::new("a", traj_with_min(0.0));
        emit_trajectories(&[t], &segway_barrier().shape, &dir).unwrap();
        let phase = std::fs::read_to_string(dir.join("phase.csv")).unwrap();
        assert_eq!(phase.lines().filter(|l| l.starts_with("boundary,")).count(), 256);
        assert_eq!(phase.lines().filter(|l| l.starts_with("a,")).count(), 3);
        assert!(dir.join("trajectories/a.csv").exists());
        assert!(dir.join("summary.csv").exists());
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
