use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use super::dataset::ResidualDataset;
use super::kernel::{matern52_lengthscale_factor, matern52_r2, sq_dist, KernelHyperparams};
use crate::dynamics::{ControlVec, StateVec};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-2;

/// Joint posterior of `(a(x*), b(x*))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorBlocks {
    pub a_mean: DVector<f64>,
    pub b_mean: f64,
    pub sigma_a: DMatrix<f64>,
    pub sigma_ab: DVector<f64>,
    pub sigma_b2: f64,
}

impl PosteriorBlocks {
    pub fn prior_free(m: usize) -> Self {
        Self {
            a_mean: DVector::zeros(m),
            b_mean: 0.0,
            sigma_a: DMatrix::zeros(m, m),
            sigma_ab: DVector::zeros(m),
            sigma_b2: 0.0,
        }
    }

    pub fn control_dim(&self) -> usize {
        self.a_mean.len()
    }

    /// `[[Σ_a, Σ_ab], [Σ_abᵀ, σ_b²]]`.
    pub fn augmented(&self) -> DMatrix<f64> {
        let m = self.control_dim();
        let mut p = DMatrix::zeros(m + 1, m + 1);
        p.view_mut((0, 0), (m, m)).copy_from(&self.sigma_a);
        for j in 0..m {
            p[(j, m)] = self.sigma_ab[j];
            p[(m, j)] = self.sigma_ab[j];
        }
        p[(m, m)] = self.sigma_b2;
        p
    }

    pub fn mean(&self, u: &ControlVec) -> f64 {
        self.a_mean.dot(u) + self.b_mean
    }

    /// `uᵀΣ_a u + 2Σ_abᵀu + σ_b²`, unclamped.
    pub fn raw_variance(&self, u: &ControlVec) -> f64 {
        (u.transpose() * &self.sigma_a * u)[(0, 0)] + 2.0 * self.sigma_ab.dot(u) + self.sigma_b2
    }

    pub fn predict(&self, u: &ControlVec) -> (f64, f64) {
        let var = self.raw_variance(u);
        debug_assert!(
            var > -1e-8 * (1.0 + self.sigma_b2.abs() + self.sigma_a.norm()),
            "posterior variance {var} negative beyond round-off"
        );
        (self.mean(u), var.max(0.0))
    }
}

/// Points divided by each kernel's lengthscales, kernel order `[b, a_1…]`.
fn scaled_inputs(hp: &KernelHyperparams, xs: &[StateVec]) -> Vec<Vec<Vec<f64>>> {
    hp.kernels()
        .map(|k| xs.iter().map(|x| k.scale_point(x.as_slice())).collect())
        .collect()
}

/// Multiplier of kernel `c` between rows `i` and `j`: 1 for `b`, `u_i,j u_j,j` for `a_j`.
#[inline]
fn control_weight(c: usize, ui: &ControlVec, uj: &ControlVec) -> f64 {
    if c == 0 {
        1.0
    } else {
        ui[c - 1] * uj[c - 1]
    }
}

/// Composite Gram matrix without noise.
pub fn gram(hp: &KernelHyperparams, data: &ResidualDataset) -> DMatrix<f64> {
    let n = data.len();
    let scaled = scaled_inputs(hp, &data.xs);
    let mut k = DMatrix::zeros(n, n);
    for (c, kern) in hp.kernels().enumerate() {
        let pts = &scaled[c];
        for i in 0..n {
            for j in 0..=i {
                let w = control_weight(c, &data.us[i], &data.us[j]);
                if w == 0.0 {
                    continue;
                }
                let v = matern52_r2(sq_dist(&pts[i], &pts[j]), kern.signal_variance) * w;
                k[(i, j)] += v;
                if i != j {
                    k[(j, i)] += v;
                }
            }
        }
    }
    k
}

/// Cholesky of `K + σ_ε²I`, retrying with growing diagonal jitter.
pub(crate) fn factorize(mut k: DMatrix<f64>, noise: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let n = k.nrows();
    for i in 0..n {
        k[(i, i)] += noise;
    }
    if n == 0 {
        return Ok((Cholesky::new(k).expect("empty matrix"), 0.0));
    }
    if let Some(c) = Cholesky::new(k.clone()) {
        return Ok((c, 0.0));
    }
    let scale = (k.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut jitter = JITTER_START * scale;
    while jitter <= JITTER_MAX * scale * (1.0 + 1e-12) {
        let mut kj = k.clone();
        for i in 0..n {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(kj) {
            return Ok((c, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Conditioning { jitter: jitter / 10.0 })
}

fn labels(data: &ResidualDataset) -> DVector<f64> {
    DVector::from_column_slice(&data.ys)
}

fn mll_from_factor(chol: &Cholesky<f64, Dyn>, y: &DVector<f64>, alpha: &DVector<f64>) -> f64 {
    let n = y.len() as f64;
    let log_det_half: f64 = chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
    -0.5 * y.dot(alpha) - log_det_half - 0.5 * n * LN_2PI
}

/// `-½ yᵀ(K+σ²I)⁻¹y - ½ log|K+σ²I| - (N/2) log 2π`.
pub fn log_marginal_likelihood(data: &ResidualDataset, hp: &KernelHyperparams) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Contract("log marginal likelihood needs N >= 1".into()));
    }
    let (chol, _) = factorize(gram(hp, data), hp.noise_variance)?;
    let y = labels(data);
    let alpha = chol.solve(&y);
    Ok(mll_from_factor(&chol, &y, &alpha))
}

/// MLL and its gradient with respect to [`KernelHyperparams::to_log_params`].
pub fn log_marginal_likelihood_grad(
    data: &ResidualDataset,
    hp: &KernelHyperparams,
) -> Result<(f64, Vec<f64>)> {
    if data.is_empty() {
        return Err(Error::Contract("log marginal likelihood needs N >= 1".into()));
    }
    let n = data.len();
    let s = hp.state_dim();
    let (chol, _) = factorize(gram(hp, data), hp.noise_variance)?;
    let y = labels(data);
    let alpha = chol.solve(&y);
    let mll = mll_from_factor(&chol, &y, &alpha);

    // W = ααᵀ - (K+σ²I)⁻¹; ∂MLL/∂θ = ½ Σ_ij W_ij ∂K_ij/∂θ
    let mut w = chol.inverse();
    w.neg_mut();
    w.ger(1.0, &alpha, &alpha, 1.0);

    let mut grad = vec![0.0; hp.n_params()];
    let scaled = scaled_inputs(hp, &data.xs);
    for (c, kern) in hp.kernels().enumerate() {
        let base = c * (s + 1);
        let pts = &scaled[c];
        let sv = kern.signal_variance;
        let mut g_sv = 0.0;
        let mut g_ls = vec![0.0; s];
        for i in 0..n {
            for j in 0..=i {
                let wgt = control_weight(c, &data.us[i], &data.us[j]);
                if wgt == 0.0 {
                    continue;
                }
                let sym = if i == j { 1.0 } else { 2.0 };
                let wij = w[(i, j)] * wgt * sym;
                let r2 = sq_dist(&pts[i], &pts[j]);
                g_sv += wij * matern52_r2(r2, sv);
                let f = wij * matern52_lengthscale_factor(r2, sv);
                for d in 0..s {
                    let diff = pts[i][d] - pts[j][d];
                    g_ls[d] += f * diff * diff;
                }
            }
        }
        grad[base] = 0.5 * g_sv;
        for d in 0..s {
            grad[base + 1 + d] = 0.5 * g_ls[d];
        }
    }
    let last = grad.len() - 1;
    grad[last] = 0.5 * hp.noise_variance * w.trace();
    Ok((mll, grad))
}

/// Trained residual model with cached factorization.
#[derive(Clone, Debug)]
pub struct GPResidualModel {
    hyperparams: KernelHyperparams,
    dataset: ResidualDataset,
    /// Lower factor of `K + (σ_ε² + jitter) I`.
    factor: DMatrix<f64>,
    alpha: DVector<f64>,
    jitter: f64,
    mll: Option<f64>,
    scaled: Vec<Vec<Vec<f64>>>,
}

impl GPResidualModel {
    pub fn train(dataset: &ResidualDataset, hp: &KernelHyperparams) -> Result<Self> {
        if !hp.validate() {
            return Err(Error::Contract(format!("invalid hyperparameters {hp:?}")));
        }
        if let Some((s, m)) = dataset.dims() {
            if s != hp.state_dim() || m != hp.control_dim() {
                return Err(Error::Contract(format!(
                    "dataset is {s}x{m} but hyperparameters expect {}x{}",
                    hp.state_dim(),
                    hp.control_dim()
                )));
            }
        }
        let (chol, jitter) = factorize(gram(hp, dataset), hp.noise_variance)?;
        let y = labels(dataset);
        let alpha = chol.solve(&y);
        let mll = (!dataset.is_empty()).then(|| mll_from_factor(&chol, &y, &alpha));
        Ok(Self {
            hyperparams: hp.clone(),
            dataset: dataset.clone(),
            factor: chol.unpack(),
            alpha,
            jitter,
            mll,
            scaled: scaled_inputs(hp, &dataset.xs),
        })
    }

    pub fn hyperparams(&self) -> &KernelHyperparams {
        &self.hyperparams
    }

    pub fn dataset(&self) -> &ResidualDataset {
        &self.dataset
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.alpha
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    /// MLL of the training data under the stored hyperparameters.
    pub fn log_marginal_likelihood(&self) -> Option<f64> {
        self.mll
    }

    pub fn posterior_blocks(&self, x: &StateVec) -> PosteriorBlocks {
        let hp = &self.hyperparams;
        let m = hp.control_dim();
        let n = self.len();
        let mut prior = DMatrix::zeros(m + 1, m + 1);
        for (j, ka) in hp.a.iter().enumerate() {
            prior[(j, j)] = ka.signal_variance;
        }
        prior[(m, m)] = hp.b.signal_variance;
        if n == 0 {
            let mut blocks = PosteriorBlocks::prior_free(m);
            blocks.sigma_a = prior.view((0, 0), (m, m)).into_owned();
            blocks.sigma_b2 = prior[(m, m)];
            return blocks;
        }

        // Columns a_1 … a_m, b of cov((a(x*), b(x*)), y).
        let mut cross = DMatrix::zeros(n, m + 1);
        for (c, kern) in hp.kernels().enumerate() {
            let col = if c == 0 { m } else { c - 1 };
            let xs = kern.scale_point(x.as_slice());
            let pts = &self.scaled[c];
            for i in 0..n {
                let w = if c == 0 { 1.0 } else { self.dataset.us[i][c - 1] };
                if w != 0.0 {
                    cross[(i, col)] = matern52_r2(sq_dist(&xs, &pts[i]), kern.signal_variance) * w;
                }
            }
        }
        let means = cross.tr_mul(&self.alpha);
        let v = self
            .factor
            .solve_lower_triangular(&cross)
            .expect("factor has a positive diagonal");
        let cov = prior - v.tr_mul(&v);
        PosteriorBlocks {
            a_mean: means.rows(0, m).into_owned(),
            b_mean: means[m],
            sigma_a: cov.view((0, 0), (m, m)).into_owned(),
            sigma_ab: cov.view((0, m), (m, 1)).column(0).into_owned(),
            sigma_b2: cov[(m, m)],
        }
    }

    /// Mean and variance of `d(x*, u*)`.
    pub fn posterior_predict(&self, x: &StateVec, u: &ControlVec) -> (f64, f64) {
        self.posterior_blocks(x).predict(u)
    }
}
