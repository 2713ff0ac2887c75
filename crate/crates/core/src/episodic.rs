//! Episodic learning: roll out the current filter on the true plant, turn
//! each step into a residual label, aggregate, refit, repeat.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::barrier::BarrierSpec;
use crate::control::{FilterMode, SafetyFilter};
use crate::dynamics::{rollout, ControlAffineModel, StateVec, Trajectory};
use crate::error::{Error, Result};
use crate::filter::BackoffSchedule;
use crate::gp::{fit_hyperparams, FitConfig, GPResidualModel, KernelHyperparams, ResidualDataset};
use crate::system::{StateBox, SystemSetup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub n_episodes: usize,
    pub region: StateBox,
    pub dt: f64,
    pub horizon: f64,
    pub delta_request: f64,
    pub backoff: BackoffSchedule,
    pub seed: u64,
    /// Every `label_stride`-th step becomes a training point.
    pub label_stride: usize,
    /// Aggregated data is thinned uniformly to at most this many points.
    pub max_points: usize,
    pub fit: FitConfig,
}

impl EpisodeConfig {
    pub fn for_setup(setup: &SystemSetup, n_episodes: usize, seed: u64) -> Self {
        Self {
            n_episodes,
            region: setup.region.clone(),
            dt: setup.dt,
            horizon: setup.horizon,
            delta_request: 1.0,
            backoff: BackoffSchedule::default(),
            seed,
            label_stride: 5,
            max_points: 600,
            fit: FitConfig {
                seed,
                ..FitConfig::default()
            },
        }
    }

    pub fn validate(&self, state_dim: usize) -> Result<()> {
        self.region.validate(state_dim)?;
        if self.n_episodes == 0 || self.label_stride == 0 || self.max_points < 2 {
            return Err(Error::Config(
                "n_episodes, label_stride must be >= 1 and max_points >= 2".into(),
            ));
        }
        if !(self.dt > 0.0) || !(self.horizon > 0.0) || !(self.delta_request >= 0.0) {
            return Err(Error::Config("dt, horizon must be positive and delta >= 0".into()));
        }
        Ok(())
    }

    /// Initial state of a training episode. Each episode draws from its own
    /// stream of the seeded generator.
    pub fn initial_state(&self, episode: usize) -> StateVec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(episode as u64);
        self.region.sample(&mut rng)
    }
}

/// Finite-difference residual labels along a trajectory:
/// `d_i = (ψ(x_{i+1}) - ψ(x_i))/dt - (c_aᵀu_i + c_b - γψ(x_i))`, where `ψ` is
/// the final chain stage and the bracket is its nominal derivative.
/// Labels are taken at steps `0, stride, 2·stride, …`.
pub fn residual_label(
    traj: &Trajectory,
    barrier: &BarrierSpec,
    model: &ControlAffineModel,
    stride: usize,
) -> Result<ResidualDataset> {
    if traj.len() < 2 || traj.controls.len() + 1 != traj.len() {
        return Err(Error::Contract(
            "labelling needs at least two states and one control per step".into(),
        ));
    }
    let gamma = barrier.final_gain();
    let mut out = ResidualDataset::new();
    for i in (0..traj.controls.len()).step_by(stride.max(1)) {
        let (x, u) = (&traj.states[i], &traj.controls[i]);
        let psi = barrier.final_stage(model, x)?;
        let psi_next = barrier.final_stage(model, &traj.states[i + 1])?;
        let cc = barrier.constants(model, x)?;
        let y = (psi_next - psi) / traj.dt - (cc.value(u) - gamma * psi);
        if y.is_finite() && x.iter().chain(u.iter()).all(|v| v.is_finite()) {
            out.push(x.clone(), u.clone(), y)?;
        }
    }
    Ok(out)
}

/// Concatenation in order.
pub fn aggregate(datasets: &[ResidualDataset]) -> Result<ResidualDataset> {
    let mut out = ResidualDataset::new();
    for d in datasets {
        for ((x, u), y) in d.xs.iter().zip(&d.us).zip(&d.ys) {
            out.push(x.clone(), u.clone(), *y)?;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub dataset: ResidualDataset,
    /// Integration stopped early; the trajectory is the part before it.
    pub blew_up: bool,
    pub delta_events: usize,
}

/// Rolls out a filter from `x0` on the true plant. With no model the
/// nominal CBF-QP is used, otherwise the chance-constrained projection at
/// `delta`.
pub fn filtered_rollout(
    setup: &SystemSetup,
    gp: Option<&GPResidualModel>,
    x0: &StateVec,
    delta: f64,
    backoff: &BackoffSchedule,
    horizon: f64,
    dt: f64,
) -> Result<(Trajectory, bool, usize)> {
    let mode = match gp {
        None => FilterMode::Nominal,
        Some(gp) => FilterMode::Probf {
            gp,
            delta,
            backoff: backoff.clone(),
        },
    };
    let mut filt = SafetyFilter::new(&setup.model, &setup.barrier, setup.desired.clone(), mode);
    match rollout(&setup.model, &mut filt, x0, horizon, dt, Some(&setup.barrier)) {
        Ok(t) => Ok((t, false, filt.delta_events)),
        Err(Error::IntegrationBlowup { partial, .. }) => Ok((*partial, true, filt.delta_events)),
        Err(e) => Err(e),
    }
}

pub fn collect_episode(
    gp: Option<&GPResidualModel>,
    setup: &SystemSetup,
    cfg: &EpisodeConfig,
    episode: usize,
) -> Result<Episode> {
    let x0 = cfg.initial_state(episode);
    let (trajectory, blew_up, delta_events) =
        filtered_rollout(setup, gp, &x0, cfg.delta_request, &cfg.backoff, cfg.horizon, cfg.dt)?;
    let dataset = if trajectory.len() >= 2 {
        residual_label(&trajectory, &setup.barrier, &setup.model, cfg.label_stride)?
    } else {
        ResidualDataset::new()
    };
    Ok(Episode {
        trajectory,
        dataset,
        blew_up,
        delta_events,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub n_points: usize,
    pub mll: f64,
    pub min_h: f64,
    pub violated: bool,
    pub delta_events: usize,
    pub blew_up: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: GPResidualModel,
    pub logs: Vec<EpisodeLog>,
    pub trajectories: Vec<Trajectory>,
}

/// Training stopped because the model could not be refitted.
#[derive(Debug, thiserror::Error)]
#[error("training diverged in episode {episode}: {source}")]
pub struct TrainFailure {
    pub episode: usize,
    #[source]
    pub source: Error,
    pub logs: Vec<EpisodeLog>,
}

pub fn train_episodic(setup: &SystemSetup, cfg: &EpisodeConfig) -> Result<TrainOutcome, TrainFailure> {
    let fail = |episode, source, logs: &Vec<EpisodeLog>| TrainFailure {
        episode,
        source,
        logs: logs.clone(),
    };
    let mut logs = Vec::new();
    if let Err(e) = cfg.validate(setup.model.state_dim()) {
        return Err(fail(0, e, &logs));
    }
    let mut data = ResidualDataset::new();
    let mut model: Option<GPResidualModel> = None;
    let mut hp: Option<KernelHyperparams> = None;
    let mut trajectories = Vec::new();
    for e in 0..cfg.n_episodes {
        let ep = collect_episode(model.as_ref(), setup, cfg, e).map_err(|err| fail(e, err, &logs))?;
        data = aggregate(&[data, ep.dataset])
            .map_err(|err| fail(e, err, &logs))?
            .thin(cfg.max_points);
        let fit = FitConfig {
            seed: cfg.fit.seed.wrapping_add(e as u64),
            ..cfg.fit.clone()
        };
        let report = fit_hyperparams(&data, &fit, hp.as_ref()).map_err(|err| fail(e, err, &logs))?;
        let gp = GPResidualModel::train(&data, &report.hyperparams).map_err(|err| fail(e, err, &logs))?;
        let min_h = ep.trajectory.min_h().unwrap_or(f64::NAN);
        logs.push(EpisodeLog {
            episode: e,
            n_points: data.len(),
            mll: gp.log_marginal_likelihood().unwrap_or(report.mll),
            min_h,
            violated: min_h < 0.0 || ep.blew_up,
            delta_events: ep.delta_events,
            blew_up: ep.blew_up,
        });
        hp = Some(report.hyperparams);
        model = Some(gp);
        trajectories.push(ep.trajectory);
    }
    Ok(TrainOutcome {
        model: model.expect("at least one episode"),
        logs,
        trajectories,
    })
}

/// Writes one JSON object per line.
pub fn write_logs(logs: &[EpisodeLog], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in logs {
        writeln!(f, "{}", serde_json::to_string(l)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::Desired;
    use crate::dynamics::{ControlAffineModel, Feedback, LinearParams, Plant};
    use nalgebra::{DMatrix, DVector};

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn matched_system_labels_are_small_and_shrink_with_dt() {
        let setup = SystemSetup::segway().matched();
        let x0 = dv(&[0.05, 0.2, 0.0, 0.1]);
        let mut bounds = Vec::new();
        for dt in [0.01, 0.005] {
            let mut c = Feedback(|t: f64, _x: &StateVec| dv(&[0.3 * (3.0 * t).sin()]));
            let tr = rollout(&setup.model, &mut c, &x0, 1.0, dt, None).unwrap();
            let d = residual_label(&tr, &setup.barrier, &setup.model, 1).unwrap();
            assert_eq!(d.len(), tr.controls.len());
            bounds.push(d.ys.iter().fold(0.0f64, |m, y| m.max(y.abs())));
        }
        let ratio = bounds[0] / bounds[1];
        assert!((ratio - 2.0).abs() < 0.6, "{bounds:?}");
    }

    #[test]
    fn labels_converge_to_true_residual() {
        let setup = SystemSetup::segway();
        let x0 = dv(&[0.0, 0.2, 0.1, 0.2]);
        let u = dv(&[0.4]);
        let truth = setup.barrier.residual_truth(&setup.model, &x0, &u).unwrap();
        let mut errs = Vec::new();
        for dt in [1e-2, 1e-3, 1e-4] {
            let mut c = Feedback(|_t: f64, _x: &StateVec| u.clone());
            let tr = rollout(&setup.model, &mut c, &x0, dt, dt, None).unwrap();
            let d = residual_label(&tr, &setup.barrier, &setup.model, 1).unwrap();
            errs.push((d.ys[0] - truth).abs());
        }
        for w in errs.windows(2) {
            let slope = (w[0] / w[1]).log10();
            assert!((slope - 1.0).abs() < 0.2, "{errs:?}");
        }
    }

    #[test]
    fn equilibrium_label_is_minus_nominal_derivative() {
        // Truly x' = -x + u, nominally x' = u; h = x.
        let truth = Plant::Linear(LinearParams {
            a: DMatrix::from_element(1, 1, -1.0),
            b: DMatrix::from_element(1, 1, 1.0),
        });
        let nominal = Plant::Linear(LinearParams {
            a: DMatrix::zeros(1, 1),
            b: DMatrix::from_element(1, 1, 1.0),
        });
        let model = ControlAffineModel::new("lin", truth, nominal).unwrap();
        let barrier = BarrierSpec {
            shape: crate::barrier::BarrierShape::Affine {
                weights: vec![1.0],
                offset: 0.0,
            },
            alpha_gain: 2.0,
            relative_degree: 1,
            hocbf_gains: Vec::new(),
        };
        let mut c = Feedback(|_t: f64, _x: &StateVec| dv(&[0.5]));
        let tr = rollout(&model, &mut c, &dv(&[0.0]), 0.1, 0.01, None).unwrap();
        let d = residual_label(&tr, &barrier, &model, 1).unwrap();
        // At x = 0 both models agree, so the first label is O(dt).
        assert!(d.ys[0].abs() < 0.01);
        let mut hold = Feedback(|_t: f64, _x: &StateVec| dv(&[0.0]));
        let tr = rollout(&model, &mut hold, &dv(&[0.0]), 0.05, 0.01, None).unwrap();
        let d = residual_label(&tr, &barrier, &model, 1).unwrap();
        assert!(d.ys.iter().all(|y| *y == 0.0));
    }

    #[test]
    fn aggregation_preserves_order_and_sizes() {
        let mut a = ResidualDataset::new();
        let mut b = ResidualDataset::new();
        for i in 0..3 {
            a.push(dv(&[i as f64]), dv(&[0.0]), i as f64).unwrap();
        }
        for i in 0..4 {
            b.push(dv(&[10.0 + i as f64]), dv(&[1.0]), -(i as f64)).unwrap();
        }
        assert_eq!(aggregate(&[a.clone()]).unwrap(), a);
        let ab = aggregate(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(ab.len(), 7);
        assert_eq!(ab.ys[3], 0.0);
        assert_eq!(ab.xs[6][0], 13.0);
    }

    #[test]
    fn episode_zero_is_nominal_and_deterministic() {
        let setup = SystemSetup::segway();
        let cfg = EpisodeConfig::for_setup(&setup, 1, 7);
        let a = collect_episode(None, &setup, &cfg, 0).unwrap();
        let b = collect_episode(None, &setup, &cfg, 0).unwrap();
        assert_eq!(a, b);
        assert!(a.trajectory.filter_meta.iter().all(|m| m.unwrap().delta_used == 0.0));
        let n_steps = a.trajectory.controls.len();
        assert_eq!(a.dataset.len(), n_steps.div_ceil(5));
        assert_ne!(cfg.initial_state(0), cfg.initial_state(1));
    }

    #[test]
    fn short_training_run_logs_growing_data() {
        let mut setup = SystemSetup::segway();
        setup.desired = Desired::SegwayPd(crate::control::SegwayPd::default());
        let mut cfg = EpisodeConfig::for_setup(&setup, 2, 3);
        cfg.horizon = 2.0;
        cfg.fit.restarts = 1;
        cfg.fit.max_iters = 30;
        let out = train_episodic(&setup, &cfg).unwrap();
        assert_eq!(out.logs.len(), 2);
        assert!(out.logs[1].n_points > out.logs[0].n_points);
        assert_eq!(out.model.len(), out.logs[1].n_points);
        let again = train_episodic(&setup, &cfg).unwrap();
        assert_eq!(again.model.weights(), out.model.weights());
    }

    #[test]
    fn invalid_config_is_reported_with_episode_zero() {
        let setup = SystemSetup::segway();
        let mut cfg = EpisodeConfig::for_setup(&setup, 1, 0);
        cfg.n_episodes = 0;
        let err = train_episodic(&setup, &cfg).unwrap_err();
        assert_eq!(err.episode, 0);
        assert!(matches!(err.source, Error::Config(_)));
    }
}
