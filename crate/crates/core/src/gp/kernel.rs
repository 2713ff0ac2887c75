use serde::{Deserialize, Serialize};

const SQRT5: f64 = 2.236_067_977_499_79;

/// Matérn 5/2 kernel with one lengthscale per input dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matern52 {
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
}

/// `σ²(1 + √5 r + 5r²/3) exp(-√5 r)` with `r² = Σ_d (x_d - x'_d)² / ℓ_d²`.
pub fn matern52(x: &[f64], xp: &[f64], lengthscales: &[f64], signal_variance: f64) -> f64 {
    let r2: f64 = x
        .iter()
        .zip(xp)
        .zip(lengthscales)
        .map(|((a, b), l)| {
            let d = (a - b) / l;
            d * d
        })
        .sum();
    matern52_r2(r2, signal_variance)
}

#[inline]
pub(crate) fn matern52_r2(r2: f64, signal_variance: f64) -> f64 {
    let r = r2.sqrt();
    let sr = SQRT5 * r;
    signal_variance * (1.0 + sr + 5.0 / 3.0 * r2) * (-sr).exp()
}

/// `∂k/∂log ℓ_d = (5/3) σ² (1 + √5 r) exp(-√5 r) (Δ_d/ℓ_d)²`; this returns the
/// factor in front of `(Δ_d/ℓ_d)²`.
#[inline]
pub(crate) fn matern52_lengthscale_factor(r2: f64, signal_variance: f64) -> f64 {
    let sr = SQRT5 * r2.sqrt();
    5.0 / 3.0 * signal_variance * (1.0 + sr) * (-sr).exp()
}

impl Matern52 {
    pub fn new(signal_variance: f64, lengthscales: Vec<f64>) -> Self {
        Self {
            signal_variance,
            lengthscales,
        }
    }

    pub fn eval(&self, x: &[f64], xp: &[f64]) -> f64 {
        matern52(x, xp, &self.lengthscales, self.signal_variance)
    }

    /// `x / ℓ`, so distances between scaled points give `r` directly.
    pub(crate) fn scale_point(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.lengthscales).map(|(v, l)| v / l).collect()
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Independent GP priors on `b(x)` and each entry of `a(x)`, plus the shared
/// observation noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelHyperparams {
    pub b: Matern52,
    pub a: Vec<Matern52>,
    pub noise_variance: f64,
}

pub const NOISE_FLOOR: f64 = 1e-8;

impl KernelHyperparams {
    pub fn isotropic(state_dim: usize, control_dim: usize, signal_variance: f64, lengthscale: f64, noise_variance: f64) -> Self {
        let k = Matern52::new(signal_variance, vec![lengthscale; state_dim]);
        Self {
            b: k.clone(),
            a: vec![k; control_dim],
            noise_variance,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.b.lengthscales.len()
    }

    pub fn control_dim(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> bool {
        let ok = |k: &Matern52| {
            k.signal_variance > 0.0
                && k.signal_variance.is_finite()
                && k.lengthscales.len() == self.state_dim()
                && k.lengthscales.iter().all(|l| *l > 0.0 && l.is_finite())
        };
        ok(&self.b) && self.a.iter().all(ok) && self.noise_variance >= NOISE_FLOOR
    }

    /// `k_d((x,u),(x',u')) = Σ_j k_{a,j}(x,x') u_j u'_j + k_b(x,x')`.
    pub fn composite(&self, x: &[f64], u: &[f64], xp: &[f64], up: &[f64]) -> f64 {
        let mut k = self.b.eval(x, xp);
        for (j, ka) in self.a.iter().enumerate() {
            k += ka.eval(x, xp) * u[j] * up[j];
        }
        k
    }

    /// Kernels in the order `[b, a_1, …, a_m]`.
    pub(crate) fn kernels(&self) -> impl Iterator<Item = &Matern52> {
        std::iter::once(&self.b).chain(self.a.iter())
    }

    /// Log-space parameter vector:
    /// `[log σ_b², log ℓ_b…, (log σ_aj², log ℓ_aj…)…, log σ_ε²]`.
    pub fn to_log_params(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for k in self.kernels() {
            p.push(k.signal_variance.ln());
            p.extend(k.lengthscales.iter().map(|l| l.ln()));
        }
        p.push(self.noise_variance.ln());
        p
    }

    pub fn from_log_params(p: &[f64], state_dim: usize, control_dim: usize) -> Self {
        let stride = state_dim + 1;
        let kernel = |c: usize| {
            let s = &p[c * stride..(c + 1) * stride];
            Matern52::new(s[0].exp(), s[1..].iter().map(|v| v.exp()).collect())
        };
        Self {
            b: kernel(0),
            a: (1..=control_dim).map(kernel).collect(),
            noise_variance: p[(control_dim + 1) * stride].exp().max(NOISE_FLOOR),
        }
    }

    pub fn n_params(&self) -> usize {
        (self.control_dim() + 1) * (self.state_dim() + 1) + 1
    }
}
