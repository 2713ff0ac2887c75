//! Reference implementations used to cross-check the GP and the projection
//! solver, plus randomized suites built on them. Everything here is written
//! from the defining formulas with dense linear algebra and brute-force
//! search; none of it reuses the production code paths it checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::barrier::{quadrotor_barrier, segway_barrier, ConstraintConstants, SEGWAY_THETA_EQ};
use crate::dynamics::{make_segway, Which};
use crate::filter::{
    self, binomial_band, build_program, chance_validate, delta_from_epsilon, solve, BackoffSchedule,
    SolveStatus,
};
use crate::gp::{
    fit_hyperparams, log_marginal_likelihood, FitConfig, GPResidualModel, KernelHyperparams, Matern52, PosteriorBlocks,
    ResidualDataset,
};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn matern(k: &Matern52, x: &[f64], y: &[f64]) -> f64 {
    let r = x
        .iter()
        .zip(y)
        .zip(&k.lengthscales)
        .map(|((a, b), l)| ((a - b) / l).powi(2))
        .sum::<f64>()
        .sqrt();
    let s5 = 5f64.sqrt() * r;
    k.signal_variance * (1.0 + s5 + s5 * s5 / 3.0) * (-s5).exp()
}

/// `k_d((x,u),(x',u'))`.
fn k_d(hp: &KernelHyperparams, x: &[f64], u: &[f64], xp: &[f64], up: &[f64]) -> f64 {
    let mut v = matern(&hp.b, x, xp);
    for (j, ka) in hp.a.iter().enumerate() {
        v += matern(ka, x, xp) * u[j] * up[j];
    }
    v
}

fn noisy_gram(data: &ResidualDataset, hp: &KernelHyperparams) -> DMatrix<f64> {
    let n = data.len();
    DMatrix::from_fn(n, n, |i, j| {
        let v = k_d(hp, data.xs[i].as_slice(), data.us[i].as_slice(), data.xs[j].as_slice(), data.us[j].as_slice());
        if i == j {
            v + hp.noise_variance
        } else {
            v
        }
    })
}

/// Log marginal likelihood via an explicit inverse and determinant.
pub fn naive_mll(data: &ResidualDataset, hp: &KernelHyperparams) -> f64 {
    let k = noisy_gram(data, hp);
    let y = DVector::from_column_slice(&data.ys);
    let inv = k.clone().try_inverse().expect("noisy Gram matrix is invertible");
    let det = k.determinant();
    -0.5 * y.dot(&(&inv * &y)) - 0.5 * det.ln() - 0.5 * data.len() as f64 * LN_2PI
}

/// Scalar GP prediction of `d(x*, u*)` with the composite kernel.
pub fn direct_prediction(
    data: &ResidualDataset,
    hp: &KernelHyperparams,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> (f64, f64) {
    let prior = k_d(hp, x.as_slice(), u.as_slice(), x.as_slice(), u.as_slice());
    if data.is_empty() {
        return (0.0, prior);
    }
    let inv = noisy_gram(data, hp).try_inverse().expect("invertible");
    let ks = DVector::from_fn(data.len(), |i, _| {
        k_d(hp, data.xs[i].as_slice(), data.us[i].as_slice(), x.as_slice(), u.as_slice())
    });
    let y = DVector::from_column_slice(&data.ys);
    (ks.dot(&(&inv * y)), prior - ks.dot(&(&inv * &ks)))
}

/// Posterior of `(a(x*), b(x*))` by conditioning the full joint Gaussian of
/// `(y, a(x*), b(x*))` with an explicit inverse.
pub fn joint_conditioning(data: &ResidualDataset, hp: &KernelHyperparams, x: &DVector<f64>) -> PosteriorBlocks {
    let m = hp.a.len();
    let n = data.len();
    let mut prior = DMatrix::zeros(m + 1, m + 1);
    for j in 0..m {
        prior[(j, j)] = hp.a[j].signal_variance;
    }
    prior[(m, m)] = hp.b.signal_variance;
    // cov(z, y) with z = (a_1*, …, a_m*, b*).
    let cross = DMatrix::from_fn(m + 1, n, |r, i| {
        if r < m {
            matern(&hp.a[r], x.as_slice(), data.xs[i].as_slice()) * data.us[i][r]
        } else {
            matern(&hp.b, x.as_slice(), data.xs[i].as_slice())
        }
    });
    let (mean, cov) = if n == 0 {
        (DVector::zeros(m + 1), prior)
    } else {
        let inv = noisy_gram(data, hp).try_inverse().expect("invertible");
        let y = DVector::from_column_slice(&data.ys);
        (&cross * &inv * y, &prior - &cross * &inv * cross.transpose())
    };
    PosteriorBlocks {
        a_mean: mean.rows(0, m).into_owned(),
        b_mean: mean[m],
        sigma_a: cov.view((0, 0), (m, m)).into_owned(),
        sigma_ab: cov.view((0, m), (m, 1)).column(0).into_owned(),
        sigma_b2: cov[(m, m)],
    }
}

/// A random dataset and hyperparameters for the GP suites.
pub fn random_gp_problem(rng: &mut ChaCha8Rng, max_n: usize) -> (ResidualDataset, KernelHyperparams) {
    let s = rng.gen_range(1..=3);
    let m = rng.gen_range(1..=2);
    let n = rng.gen_range(1..=max_n);
    let lu = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| (rng.gen_range(lo.ln()..hi.ln())).exp();
    let kern = |rng: &mut ChaCha8Rng| {
        let sv = lu(rng, 0.3, 3.0);
        Matern52::new(sv, (0..s).map(|_| lu(rng, 0.3, 2.0)).collect())
    };
    let hp = KernelHyperparams {
        b: kern(rng),
        a: (0..m).map(|_| kern(rng)).collect(),
        noise_variance: lu(rng, 1e-3, 1e-1),
    };
    let mut data = ResidualDataset::new();
    for _ in 0..n {
        let x: DVector<f64> = DVector::from_fn(s, |_, _| rng.gen_range(-1.0..1.0));
        let u = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0));
        let y = (2.0 * x[0]).sin() * u[0] + x.sum() * 0.5 + rng.gen_range(-0.1..0.1);
        data.push(x, u, y).expect("consistent rows");
    }
    (data, hp)
}

fn blocks_error(a: &PosteriorBlocks, b: &PosteriorBlocks) -> f64 {
    (&a.a_mean - &b.a_mean)
        .amax()
        .max((a.b_mean - b.b_mean).abs())
        .max((&a.sigma_a - &b.sigma_a).amax())
        .max((&a.sigma_ab - &b.sigma_ab).amax())
        .max((a.sigma_b2 - b.sigma_b2).abs())
}

/// One suite's outcome.
#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub passed: usize,
    pub total: usize,
    /// Largest observed deviation from the oracle.
    pub max_error: f64,
    pub notes: Vec<String>,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.into(),
            passed: 0,
            total: 0,
            max_error: 0.0,
            notes: Vec::new(),
        }
    }

    fn record(&mut self, ok: bool, err: f64, note: impl FnOnce() -> String) {
        self.total += 1;
        if ok {
            self.passed += 1;
        } else if self.notes.len() < 10 {
            self.notes.push(note());
        }
        if err.is_finite() {
            self.max_error = self.max_error.max(err);
        } else {
            self.max_error = f64::INFINITY;
        }
    }

    pub fn all_passed(&self) -> bool {
        self.total > 0 && self.passed == self.total
    }
}

/// Blockwise posterior against direct `k_d` prediction and joint-Gaussian
/// conditioning, at several test points per dataset.
pub fn gp_posterior_suite(n_datasets: usize, seed: u64, tol: f64) -> SuiteReport {
    let mut rep = SuiteReport::new("gp posterior vs direct and joint conditioning");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..n_datasets {
        let (data, hp) = random_gp_problem(&mut rng, 20);
        let model = match GPResidualModel::train(&data, &hp) {
            Ok(m) => m,
            Err(e) => {
                rep.record(false, f64::INFINITY, || format!("dataset {k}: {e}"));
                continue;
            }
        };
        let (s, m) = data.dims().expect("non-empty");
        let mut err: f64 = 0.0;
        for _ in 0..5 {
            let x = DVector::from_fn(s, |_, _| rng.gen_range(-1.2..1.2));
            let u = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0));
            let blocks = model.posterior_blocks(&x);
            err = err.max(blocks_error(&blocks, &joint_conditioning(&data, &hp, &x)));
            let (mu, var) = direct_prediction(&data, &hp, &x, &u);
            err = err.max((blocks.mean(&u) - mu).abs());
            err = err.max((blocks.raw_variance(&u) - var).abs());
        }
        rep.record(err < tol, err, || format!("dataset {k}: error {err:e}"));
    }
    rep
}

/// Cholesky-based MLL against explicit inverse and determinant.
pub fn mll_suite(n_datasets: usize, seed: u64, tol: f64) -> SuiteReport {
    let mut rep = SuiteReport::new("mll vs dense evaluation");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..n_datasets {
        let (data, hp) = random_gp_problem(&mut rng, 30);
        let fast = log_marginal_likelihood(&data, &hp);
        let slow = naive_mll(&data, &hp);
        let err = fast.as_ref().map_or(f64::INFINITY, |f| (f - slow).abs());
        rep.record(err < tol, err, || format!("dataset {k}: {fast:?} vs {slow}"));
    }
    rep
}

/// A random chance-constrained projection instance whose desired control
/// violates the constraint.
#[derive(Clone, Debug, Serialize)]
pub struct SocpInstance {
    pub blocks: PosteriorBlocks,
    pub cc: ConstraintConstants,
    pub u_d: DVector<f64>,
    pub delta: f64,
}

impl SocpInstance {
    /// `(ā+c_a)ᵀu + b̄ + c_b - δ·sqrt(uᵀΣ_a u + 2Σ_abᵀu + σ_b²)`.
    pub fn margin(&self, u: &DVector<f64>) -> f64 {
        let b = &self.blocks;
        let var = (u.transpose() * &b.sigma_a * u)[(0, 0)] + 2.0 * b.sigma_ab.dot(u) + b.sigma_b2;
        (&b.a_mean + &self.cc.c_a).dot(u) + b.b_mean + self.cc.c_b - self.delta * var.max(0.0).sqrt()
    }

    /// Supremum of the margin over all controls (closed form; `+∞` when the
    /// mean slope outruns the std slope).
    pub fn sup_margin(&self) -> f64 {
        let b = &self.blocks;
        let g = &b.a_mean + &self.cc.c_a;
        let sa_inv = b.sigma_a.clone().try_inverse().expect("Σ_a invertible");
        let kappa2 = g.dot(&(&sa_inv * &g));
        if self.delta * self.delta <= kappa2 {
            return f64::INFINITY;
        }
        let rho2 = (b.sigma_b2 - b.sigma_ab.dot(&(&sa_inv * &b.sigma_ab))).max(0.0);
        b.b_mean + self.cc.c_b - g.dot(&(&sa_inv * &b.sigma_ab))
            - (rho2 * (self.delta * self.delta - kappa2)).sqrt()
    }

    /// A feasible control, or `None` if the supremum margin is negative.
    fn feasible_point(&self) -> Option<DVector<f64>> {
        let b = &self.blocks;
        let g = &b.a_mean + &self.cc.c_a;
        let sa_inv = b.sigma_a.clone().try_inverse()?;
        let dir = &sa_inv * &g;
        let shift = &sa_inv * &b.sigma_ab;
        let kappa2 = g.dot(&dir);
        let d2 = self.delta * self.delta;
        if d2 > kappa2 {
            let rho2 = (b.sigma_b2 - b.sigma_ab.dot(&shift)).max(0.0);
            let alpha = (rho2 / (d2 - kappa2)).sqrt();
            let u = alpha * &dir - &shift;
            return (self.margin(&u) >= 0.0).then_some(u);
        }
        let mut alpha = 1.0;
        for _ in 0..200 {
            let u = alpha * &dir - &shift;
            if self.margin(&u) >= 0.0 {
                return Some(u);
            }
            alpha *= 2.0;
        }
        None
    }
}

pub fn random_socp_instance(rng: &mut ChaCha8Rng, m: usize) -> SocpInstance {
    let a = DMatrix::from_fn(m + 1, m + 1, |_, _| rng.gen_range(-0.8..0.8));
    let p = &a * a.transpose() + DMatrix::identity(m + 1, m + 1) * 0.05;
    let blocks = PosteriorBlocks {
        a_mean: DVector::from_fn(m, |_, _| rng.gen_range(-0.5..0.5)),
        b_mean: rng.gen_range(-0.5..0.5),
        sigma_a: p.view((0, 0), (m, m)).into_owned(),
        sigma_ab: p.view((0, m), (m, 1)).column(0).into_owned(),
        sigma_b2: p[(m, m)],
    };
    let mut inst = SocpInstance {
        blocks,
        cc: ConstraintConstants {
            c_a: DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0)),
            c_b: 0.0,
        },
        u_d: DVector::from_fn(m, |_, _| rng.gen_range(-1.5..1.5)),
        delta: rng.gen_range(0.2..2.5),
    };
    let violation = rng.gen_range(0.05..2.0);
    inst.cc.c_b = -inst.margin(&inst.u_d) - violation;
    inst
}

/// Exact projection for one control: the feasible set is an interval of the
/// concave margin's superlevel set, found by doubling out from `u_d` and
/// bisecting the boundary. `None` when the maximum margin is negative.
pub fn interval_oracle(inst: &SocpInstance) -> Option<f64> {
    let phi = |u: f64| inst.margin(&DVector::from_element(1, u));
    let ud = inst.u_d[0];
    if phi(ud) >= 0.0 {
        return Some(ud);
    }
    let h = 1e-6 * (1.0 + ud.abs());
    let dir = if phi(ud + h) >= phi(ud - h) { 1.0 } else { -1.0 };
    let mut prev = ud;
    let mut prev_val = phi(ud);
    let mut step = 1e-3;
    let feasible = loop {
        let next = ud + dir * step;
        let val = phi(next);
        if val >= 0.0 {
            break next;
        }
        if val < prev_val || step > 1e12 {
            // Maximum bracketed in [prev - step/2·dir, next]; ternary search.
            let (mut lo, mut hi) = if dir > 0.0 {
                (ud.min(prev - 0.5 * step), next)
            } else {
                (next, ud.max(prev + 0.5 * step))
            };
            for _ in 0..300 {
                let a = lo + (hi - lo) / 3.0;
                let b = hi - (hi - lo) / 3.0;
                if phi(a) < phi(b) {
                    lo = a;
                } else {
                    hi = b;
                }
            }
            let top = 0.5 * (lo + hi);
            if phi(top) >= 0.0 {
                break top;
            }
            return None;
        }
        prev = next;
        prev_val = val;
        step *= 2.0;
    };
    let (mut bad, mut good) = (ud, feasible);
    for _ in 0..200 {
        let mid = 0.5 * (bad + good);
        if phi(mid) >= 0.0 {
            good = mid;
        } else {
            bad = mid;
        }
    }
    Some(good)
}

/// Grid search over an `n × n` box centred at `u_d`. The box half-width is
/// the distance to a feasible point, so it contains the projection.
#[derive(Clone, Debug)]
pub struct GridResult {
    pub best: DVector<f64>,
    pub best_objective: f64,
    pub spacing: f64,
    /// Distance from the probe point to the nearest feasible grid point.
    pub probe_distance: f64,
}

pub fn grid_oracle(inst: &SocpInstance, n: usize, probe: &DVector<f64>) -> Option<GridResult> {
    let far = inst.feasible_point()?;
    let (mut bad, mut good) = (0.0, 1.0);
    for _ in 0..100 {
        let mid = 0.5 * (bad + good);
        let u = &inst.u_d + mid * (&far - &inst.u_d);
        if inst.margin(&u) >= 0.0 {
            good = mid;
        } else {
            bad = mid;
        }
    }
    let radius = good * (&far - &inst.u_d).norm() * (1.0 + 1e-9) + 1e-12;
    let h = 2.0 * radius / (n - 1) as f64;
    let mut best: Option<(DVector<f64>, f64)> = None;
    let mut probe_distance = f64::INFINITY;
    for i in 0..n {
        for j in 0..n {
            let u = DVector::from_vec(vec![
                inst.u_d[0] - radius + i as f64 * h,
                inst.u_d[1] - radius + j as f64 * h,
            ]);
            if inst.margin(&u) >= 0.0 {
                probe_distance = probe_distance.min((&u - probe).norm());
                let f = (&u - &inst.u_d).norm_squared();
                if best.as_ref().map_or(true, |(_, bf)| f < *bf) {
                    best = Some((u, f));
                }
            }
        }
    }
    best.map(|(u, f)| GridResult {
        best: u,
        best_objective: f,
        spacing: h,
        probe_distance,
    })
}

fn solve_instance(inst: &SocpInstance) -> crate::Result<(SolveStatus, DVector<f64>)> {
    let p = build_program(&inst.blocks, &inst.cc, &inst.u_d, inst.delta)?;
    let s = solve(&p)?;
    Ok((s.status, s.control()))
}

/// Solver against the one-dimensional interval oracle.
pub fn socp_interval_suite(n: usize, seed: u64, tol: f64) -> SuiteReport {
    let mut rep = SuiteReport::new("socp m=1 vs feasible-interval oracle");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut infeasible = 0;
    for k in 0..n {
        let inst = random_socp_instance(&mut rng, 1);
        let oracle = interval_oracle(&inst);
        let sup = inst.sup_margin();
        match (solve_instance(&inst), oracle) {
            (Ok((SolveStatus::Optimal, u)), Some(o)) => {
                let err = (u[0] - o).abs();
                let slack = inst.margin(&u);
                rep.record(err < tol && slack >= -1e-6, err, || {
                    format!("instance {k}: solver {} oracle {o} slack {slack:e}", u[0])
                });
            }
            (Ok((SolveStatus::Infeasible, _)), None) => {
                infeasible += 1;
                rep.record(true, 0.0, String::new);
            }
            // Status disagreement only counts when the instance is not
            // borderline.
            (Ok((status, _)), o) => {
                let borderline = sup.abs() < 1e-6;
                rep.record(borderline, 0.0, || {
                    format!("instance {k}: solver {status:?}, oracle {o:?}, sup margin {sup:e}")
                });
            }
            (Err(e), _) => rep.record(false, f64::INFINITY, || format!("instance {k}: {e}")),
        }
    }
    rep.notes.push(format!("{infeasible} of {n} instances infeasible"));
    rep
}

/// Solver against a grid search. Passes when the solver is feasible, no
/// worse than the best grid point, and within two grid diagonals of the
/// feasible grid points. (The grid argmin itself can sit much further away
/// along the boundary: near a tangency the objective is flat to first order.)
pub fn socp_grid_suite(n: usize, seed: u64, grid: usize) -> SuiteReport {
    let mut rep = SuiteReport::new("socp m=2 vs grid search");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut infeasible = 0;
    for k in 0..n {
        let inst = random_socp_instance(&mut rng, 2);
        let sup = inst.sup_margin();
        match solve_instance(&inst) {
            Ok((SolveStatus::Optimal, u)) => match grid_oracle(&inst, grid, &u) {
                Some(g) => {
                    let f = (&u - &inst.u_d).norm_squared();
                    let h = g.spacing;
                    let slack = inst.margin(&u);
                    let ok = slack >= -1e-6
                        && f <= g.best_objective + 1e-9
                        && g.probe_distance <= 2.0 * 2f64.sqrt() * h;
                    rep.record(ok, g.probe_distance / h, || {
                        format!(
                            "instance {k}: f {f} grid {} probe distance {:e} h {h:e} slack {slack:e}",
                            g.best_objective, g.probe_distance
                        )
                    });
                }
                None => rep.record(sup.abs() < 1e-6, 0.0, || {
                    format!("instance {k}: solver optimal but no feasible point (sup {sup:e})")
                }),
            },
            Ok((SolveStatus::Infeasible, _)) => {
                infeasible += 1;
                rep.record(sup < 1e-6, 0.0, || format!("instance {k}: solver infeasible, sup {sup:e}"));
            }
            Err(e) => rep.record(false, f64::INFINITY, || format!("instance {k}: {e}")),
        }
    }
    rep.notes.push(format!("{infeasible} of {n} instances infeasible; error column is distance / spacing"));
    rep
}

/// The chance-constrained filter at `δ = 0` against the halfspace projection
/// onto the mean-shifted constraint.
pub fn delta_zero_suite(n: usize, seed: u64, tol: f64) -> SuiteReport {
    let mut rep = SuiteReport::new("delta = 0 reduces to the mean CBF-QP");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..n {
        let m = rng.gen_range(1..=2);
        let inst = random_socp_instance(&mut rng, m);
        let g = &inst.blocks.a_mean + &inst.cc.c_a;
        let b = inst.blocks.b_mean + inst.cc.c_b;
        let v = g.dot(&inst.u_d) + b;
        let expect = if v >= 0.0 {
            inst.u_d.clone()
        } else {
            &inst.u_d - &g * (v / g.norm_squared())
        };
        let r = filter::probf_project(&inst.blocks, &inst.cc, &inst.u_d, 0.0, &BackoffSchedule::default());
        let err = (&r.u - &expect).amax();
        let ok = err < tol && r.delta_used == 0.0 && r.feasible_at_requested_delta;
        rep.record(ok, err, || format!("instance {k}: error {err:e}"));
    }
    rep
}

/// Monte-Carlo violation rate of active-constraint solutions against `ε`.
pub fn chance_suite(n: usize, seed: u64, samples: usize) -> SuiteReport {
    let mut rep = SuiteReport::new("chance-constraint calibration");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..n {
        let m = rng.gen_range(1..=2);
        let mut inst = random_socp_instance(&mut rng, m);
        // Scale Σ_a so the mean slope beats three std slopes; then every
        // level below is feasible.
        let g = &inst.blocks.a_mean + &inst.cc.c_a;
        let kappa2 = g.dot(&(inst.blocks.sigma_a.clone().try_inverse().expect("Σ_a invertible") * &g));
        let c = (kappa2 / 9.0).min(1.0);
        inst.blocks.sigma_a *= c;
        inst.blocks.sigma_ab *= c.sqrt();
        for (e_idx, eps) in [0.5, 0.1587, 0.0228].into_iter().enumerate() {
            let mut at = inst.clone();
            at.delta = delta_from_epsilon(eps).expect("valid epsilon");
            at.cc.c_b -= at.margin(&at.u_d) + 0.5;
            let solved = solve_instance(&at);
            let Ok((SolveStatus::Optimal, u)) = solved else {
                rep.record(false, f64::INFINITY, || format!("instance {k}, ε={eps}: {solved:?}"));
                continue;
            };
            let active = at.margin(&u).abs() < 1e-6;
            let rate = chance_validate(&at.blocks, &at.cc, &u, samples, seed ^ ((k * 3 + e_idx) as u64) << 8)
                .expect("enough samples");
            let band = binomial_band(eps, samples);
            let err = (rate - eps).abs() / band;
            rep.record(active && err <= 1.0, err, || {
                format!("instance {k}, ε={eps}: rate {rate} band ±{band:.4} active {active}")
            });
        }
    }
    rep.notes.push("error column is |rate - ε| / 3σ band".into());
    rep
}

/// Analytic barrier gradients against central differences at random states
/// drawn around each barrier's safe set.
pub fn barrier_gradient_suite(n_states: usize, seed: u64, tol: f64) -> SuiteReport {
    let mut rep = SuiteReport::new("barrier gradient vs central differences");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases = [
        (segway_barrier(), vec![1.0, 0.3, 1.0, 1.0], SEGWAY_THETA_EQ),
        (quadrotor_barrier(), vec![3.0, 3.0, 0.5, 1.0, 1.0, 1.0, 5.0, 5.0], 0.0),
    ];
    for (spec, spread, th) in &cases {
        for _ in 0..n_states {
            let mut x: DVector<f64> = DVector::from_fn(spread.len(), |i, _| rng.gen_range(-spread[i]..spread[i]));
            if spread.len() == 4 {
                x[1] += th;
            } else {
                x[0] += 2.0;
                x[1] += 2.0;
            }
            let g = spec.grad_h(&x);
            let fd = DVector::from_fn(x.len(), |i, _| {
                let step = 1e-5 * x[i].abs().max(1.0);
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[i] += step;
                xm[i] -= step;
                (spec.h(&xp) - spec.h(&xm)) / (2.0 * step)
            });
            let err = (&g - &fd).amax() / g.amax().max(1.0);
            rep.record(err < tol, err, || format!("x = {:?}: relative error {err:.2e}", x.as_slice()));
        }
    }
    rep
}

/// Global RK4 error after 1 s on the true Segway with a held input, against
/// a `dt = 1e-5` reference. Returns `(dt, error)` pairs and the least-squares
/// slope of `log error` on `log dt`.
pub fn rk4_order(dts: &[f64]) -> (Vec<(f64, f64)>, f64) {
    let model = make_segway();
    let x0 = DVector::from_vec(vec![0.0, SEGWAY_THETA_EQ + 0.3, 0.5, 1.0]);
    let u = DVector::from_element(1, 0.5);
    let integrate = |dt: f64| {
        let n = (1.0 / dt).round() as usize;
        (0..n).fold(x0.clone(), |x, _| model.step_rk4(&x, &u, dt, Which::True).expect("finite step"))
    };
    let reference = integrate(1e-5);
    let errs: Vec<(f64, f64)> = dts.iter().map(|&dt| (dt, (integrate(dt) - &reference).norm())).collect();
    let pts: Vec<(f64, f64)> = errs.iter().map(|(d, e)| (d.ln(), e.ln())).collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (errs, sxy / sxx)
}

/// Smallest eigenvalue of the augmented posterior covariance, relative to
/// its largest entry, at random states for random trained models.
pub fn posterior_psd_suite(n_states: usize, seed: u64, tol: f64) -> SuiteReport {
    let mut rep = SuiteReport::new("posterior blocks positive semidefinite");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_model = 20;
    let mut done = 0;
    while done < n_states {
        let (data, hp) = random_gp_problem(&mut rng, 40);
        let Ok(gp) = GPResidualModel::train(&data, &hp) else {
            rep.record(false, f64::INFINITY, || "training failed".into());
            done += per_model;
            continue;
        };
        let s = data.dims().expect("non-empty").0;
        for _ in 0..per_model.min(n_states - done) {
            let x = DVector::from_fn(s, |_, _| rng.gen_range(-1.5..1.5));
            let p = gp.posterior_blocks(&x).augmented();
            let scale = p.amax().max(1e-300);
            let min_eig = p.symmetric_eigenvalues().min() / scale;
            let err = (-min_eig).max(0.0);
            rep.record(min_eig >= -tol, err, || format!("min eigenvalue {min_eig:.2e} at {:?}", x.as_slice()));
            done += 1;
        }
    }
    rep
}

/// Fitting starts from the default initialization and must never end below
/// its log marginal likelihood.
pub fn fit_monotone_suite(n_datasets: usize, seed: u64) -> SuiteReport {
    let mut rep = SuiteReport::new("fit never lowers the mll");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..n_datasets {
        let (data, _) = random_gp_problem(&mut rng, 30);
        if data.len() < 2 {
            continue;
        }
        let cfg = FitConfig {
            seed: seed + k as u64,
            ..FitConfig::default()
        };
        match fit_hyperparams(&data, &cfg, None) {
            Ok(r) => {
                let gap = r.initial_mll - r.mll;
                rep.record(gap <= 1e-9 * (1.0 + r.initial_mll.abs()), gap.max(0.0), || {
                    format!("dataset {k}: mll {} below initial {}", r.mll, r.initial_mll)
                });
            }
            Err(e) => rep.record(false, f64::INFINITY, || format!("dataset {k}: {e}")),
        }
    }
    rep
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_oracle_on_known_instance() {
        // margin u - 1 - sqrt(0.25u² + 0.04), boundary at the larger root.
        let inst = SocpInstance {
            blocks: PosteriorBlocks {
                a_mean: DVector::zeros(1),
                b_mean: 0.0,
                sigma_a: DMatrix::from_element(1, 1, 0.25),
                sigma_ab: DVector::zeros(1),
                sigma_b2: 0.04,
            },
            cc: ConstraintConstants {
                c_a: DVector::from_element(1, 1.0),
                c_b: -1.0,
            },
            u_d: DVector::zeros(1),
            delta: 1.0,
        };
        let root = (2.0 + (4.0f64 - 2.88).sqrt()) / 1.5;
        assert!((interval_oracle(&inst).unwrap() - root).abs() < 1e-12);
        assert!(inst.sup_margin().is_infinite());
        let mut tight = inst.clone();
        tight.delta = 3.0;
        assert!(interval_oracle(&tight).is_none());
        assert!(tight.sup_margin() < 0.0);
    }

    #[test]
    fn dense_oracles_agree_with_each_other() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (data, hp) = random_gp_problem(&mut rng, 10);
        let (s, m) = data.dims().unwrap();
        let x = DVector::from_element(s, 0.1);
        let u = DVector::from_element(m, 0.7);
        let b = joint_conditioning(&data, &hp, &x);
        let (mu, var) = direct_prediction(&data, &hp, &x, &u);
        assert!((b.a_mean.dot(&u) + b.b_mean - mu).abs() < 1e-9);
        let v = (u.transpose() * &b.sigma_a * &u)[(0, 0)] + 2.0 * b.sigma_ab.dot(&u) + b.sigma_b2;
        assert!((v - var).abs() < 1e-9);
    }

    #[test]
    fn hygiene_suites_pass() {
        let g = barrier_gradient_suite(20, 3, 1e-6);
        assert!(g.all_passed(), "{:?}", g.notes);
        let p = posterior_psd_suite(40, 4, 1e-9);
        assert!(p.all_passed(), "{:?}", p.notes);
        let f = fit_monotone_suite(4, 5);
        assert!(f.all_passed(), "{:?}", f.notes);
    }
}
