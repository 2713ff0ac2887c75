use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::ResidualDataset;
use super::kernel::{KernelHyperparams, NOISE_FLOOR};
use super::model::log_marginal_likelihood_grad;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub restarts: usize,
    pub max_iters: usize,
    /// Hyperparameters are fitted on a uniformly thinned subset of this size.
    pub max_points: usize,
    /// Std of the log-space perturbation applied to restarts after the first.
    pub restart_spread: f64,
    /// Stop once an iteration improves the MLL by less than this (relative).
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            restarts: 4,
            max_iters: 200,
            max_points: 200,
            restart_spread: 0.5,
            tolerance: 1e-7,
            seed: 0,
        }
    }
}

/// Outcome of a hyperparameter search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub hyperparams: KernelHyperparams,
    pub initial_mll: f64,
    pub mll: f64,
    pub iterations: usize,
    pub failed_restarts: usize,
}

const LOG_MIN: f64 = -18.0;
const LOG_MAX: f64 = 18.0;

fn std_dev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Data-scaled starting point: lengthscales equal to the per-dimension input
/// spread (unit lengthscales on standardized inputs), signal variance equal
/// to the label variance, noise at one percent of it.
pub fn initial_hyperparams(data: &ResidualDataset) -> Result<KernelHyperparams> {
    let (s, m) = data
        .dims()
        .ok_or_else(|| Error::Contract("cannot initialize from an empty dataset".into()))?;
    let lengthscales: Vec<f64> = (0..s)
        .map(|d| {
            let sd = std_dev(data.xs.iter().map(|x| x[d]));
            if sd > 1e-9 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    let var_y = std_dev(data.ys.iter().copied()).powi(2).max(1e-6);
    let mut hp = KernelHyperparams::isotropic(s, m, var_y, 1.0, (0.01 * var_y).max(NOISE_FLOOR));
    hp.b.lengthscales = lengthscales.clone();
    for (j, ka) in hp.a.iter_mut().enumerate() {
        let mean_u2 = data.us.iter().map(|u| u[j] * u[j]).sum::<f64>() / data.len() as f64;
        ka.signal_variance = var_y / mean_u2.max(1e-6);
        ka.lengthscales = lengthscales.clone();
    }
    Ok(hp)
}

fn clamp_params(p: &mut DVector<f64>) {
    let last = p.len() - 1;
    for (i, v) in p.iter_mut().enumerate() {
        let lo = if i == last { NOISE_FLOOR.ln() } else { LOG_MIN };
        *v = v.clamp(lo, LOG_MAX);
    }
}

struct Objective<'a> {
    data: &'a ResidualDataset,
    s: usize,
    m: usize,
}

impl Objective<'_> {
    fn eval(&self, p: &DVector<f64>) -> Option<(f64, DVector<f64>)> {
        let hp = KernelHyperparams::from_log_params(p.as_slice(), self.s, self.m);
        let (v, g) = log_marginal_likelihood_grad(self.data, &hp).ok()?;
        v.is_finite().then(|| (v, DVector::from_vec(g)))
    }
}

/// Quasi-Newton (BFGS) ascent in log-parameter space with backtracking.
/// Only steps that increase the MLL are accepted.
fn ascend(obj: &Objective, start: DVector<f64>, cfg: &FitConfig) -> Option<(DVector<f64>, f64, usize)> {
    let mut p = start;
    clamp_params(&mut p);
    let (mut f, mut g) = obj.eval(&p)?;
    let n = p.len();
    let mut h_inv = DMatrix::<f64>::identity(n, n);
    let mut iters = 0;
    for it in 0..cfg.max_iters {
        iters = it + 1;
        let mut dir = &h_inv * &g;
        if dir.dot(&g) <= 0.0 {
            h_inv = DMatrix::identity(n, n);
            dir = g.clone();
        }
        // Keep the first trial step at most 2 in log space.
        let dn = dir.amax();
        let mut step = if dn > 2.0 { 2.0 / dn } else { 1.0 };
        let mut accepted = None;
        for _ in 0..30 {
            let mut trial = &p + step * &dir;
            clamp_params(&mut trial);
            if let Some((ft, gt)) = obj.eval(&trial) {
                if ft >= f + 1e-4 * step * dir.dot(&g) && ft >= f {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((pn, fnew, gn)) = accepted else {
            break;
        };
        let sv = &pn - &p;
        // Ascent on f is descent on -f: y = -(g_new - g).
        let yv = -(&gn - &g);
        let sy = sv.dot(&yv);
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let left = &i - rho * &sv * yv.transpose();
            let right = &i - rho * &yv * sv.transpose();
            h_inv = &left * &h_inv * &right + rho * &sv * sv.transpose();
        }
        let improvement = fnew - f;
        p = pn;
        f = fnew;
        g = gn;
        if improvement < cfg.tolerance * (1.0 + f.abs()) {
            break;
        }
    }
    Some((p, f, iters))
}

/// Maximizes the log marginal likelihood over all kernel hyperparameters
/// and the noise variance. The first restart begins at `warm_start` when
/// given, otherwise at [`initial_hyperparams`].
pub fn fit_hyperparams(
    data: &ResidualDataset,
    cfg: &FitConfig,
    warm_start: Option<&KernelHyperparams>,
) -> Result<FitReport> {
    if data.len() < 2 {
        return Err(Error::Contract(format!(
            "hyperparameter fitting needs N >= 2, got {}",
            data.len()
        )));
    }
    let subset = data.thin(cfg.max_points.max(2));
    let (s, m) = subset.dims().expect("non-empty");
    let init = match warm_start {
        Some(hp) => hp.clone(),
        None => initial_hyperparams(&subset)?,
    };
    let obj = Objective {
        data: &subset,
        s,
        m,
    };
    let mut p0 = DVector::from_vec(init.to_log_params());
    clamp_params(&mut p0);
    let initial_mll = obj.eval(&p0).map(|(f, _)| f);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.restart_spread.max(0.0)).expect("finite spread");
    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut iterations = 0;
    let mut failed = 0;
    for r in 0..cfg.restarts.max(1) {
        let start = if r == 0 {
            p0.clone()
        } else {
            p0.map(|v| v + noise.sample(&mut rng))
        };
        match ascend(&obj, start, cfg) {
            Some((p, f, it)) => {
                iterations += it;
                if best.as_ref().map_or(true, |(_, bf)| f > *bf) {
                    best = Some((p, f));
                }
            }
            None => failed += 1,
        }
    }
    let (p, mll) = best.ok_or(Error::Conditioning { jitter: 1e-2 })?;
    Ok(FitReport {
        hyperparams: KernelHyperparams::from_log_params(p.as_slice(), s, m),
        initial_mll: initial_mll.unwrap_or(f64::NEG_INFINITY),
        mll,
        iterations,
        failed_restarts: failed,
    })
}
