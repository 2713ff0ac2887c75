//! Gaussian-process model of the barrier residual `d(x, u) = a(x)ᵀu + b(x)`.
//!
//! `b` and every entry of `a` get independent Matérn 5/2 priors, so the
//! residual has covariance `k_d = Σ_j k_{a,j}(x,x') u_j u'_j + k_b(x,x')`.
//! After conditioning on labels the posterior over `(a(x*), b(x*))` is a
//! dense Gaussian; [`GPResidualModel::posterior_blocks`] returns it in block
//! form.

mod checkpoint;
mod dataset;
mod fit;
mod kernel;
mod model;

pub use checkpoint::Checkpoint;
pub use dataset::{thin_indices, ResidualDataset};
pub use fit::{fit_hyperparams, initial_hyperparams, FitConfig, FitReport};
pub use kernel::{matern52, KernelHyperparams, Matern52, NOISE_FLOOR};
pub use model::{
    gram, log_marginal_likelihood, log_marginal_likelihood_grad, GPResidualModel, PosteriorBlocks,
};

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, s: usize, m: usize) -> ResidualDataset {
        let mut d = ResidualDataset::new();
        for _ in 0..n {
            let x: DVector<f64> = DVector::from_fn(s, |_, _| rng.gen_range(-1.0..1.0));
            let u: DVector<f64> = DVector::from_fn(m, |_, _| rng.gen_range(-2.0..2.0));
            let y = x[0].sin() * u[0] + 0.3 * x.norm() + rng.gen_range(-0.05..0.05);
            d.push(x, u, y).unwrap();
        }
        d
    }

    fn hp(s: usize, m: usize) -> KernelHyperparams {
        let mut hp = KernelHyperparams::isotropic(s, m, 1.3, 0.8, 1e-2);
        hp.b.lengthscales[0] = 0.5;
        for (j, a) in hp.a.iter_mut().enumerate() {
            a.signal_variance = 0.6 + 0.2 * j as f64;
        }
        hp
    }

    fn single(y: f64, noise: f64, sv: f64) -> (ResidualDataset, KernelHyperparams) {
        let mut d = ResidualDataset::new();
        d.push(dv(&[0.2, -0.1]), dv(&[0.0]), y).unwrap();
        let hp = KernelHyperparams::isotropic(2, 1, sv, 1.0, noise);
        (d, hp)
    }

    #[test]
    fn mll_single_point_zero_label() {
        let (d, hp) = single(0.0, 0.25, 0.75);
        let v = log_marginal_likelihood(&d, &hp).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12, "{v}");
    }

    #[test]
    fn mll_single_point_unit_label() {
        let (d, hp) = single(1.0, 0.25, 0.75);
        let v = log_marginal_likelihood(&d, &hp).unwrap();
        assert!((v - (-0.5 - 0.918_938_533_204_672_7)).abs() < 1e-12);
    }

    #[test]
    fn mll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = random_dataset(&mut rng, 15, 3, 2);
        let h = hp(3, 2);
        let (_, g) = log_marginal_likelihood_grad(&d, &h).unwrap();
        let p = h.to_log_params();
        for i in 0..p.len() {
            let eps = 1e-5;
            let mut pp = p.clone();
            pp[i] += eps;
            let fp = log_marginal_likelihood(&d, &KernelHyperparams::from_log_params(&pp, 3, 2)).unwrap();
            pp[i] -= 2.0 * eps;
            let fm = log_marginal_likelihood(&d, &KernelHyperparams::from_log_params(&pp, 3, 2)).unwrap();
            let fd = (fp - fm) / (2.0 * eps);
            let rel = (fd - g[i]).abs() / fd.abs().max(1e-3);
            assert!(rel < 1e-4, "param {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn empty_model_is_prior() {
        let h = hp(2, 2);
        let model = GPResidualModel::train(&ResidualDataset::new(), &h).unwrap();
        let b = model.posterior_blocks(&dv(&[0.3, 0.1]));
        assert_eq!(b.a_mean, DVector::zeros(2));
        assert_eq!(b.b_mean, 0.0);
        assert_eq!(b.sigma_a, DMatrix::from_diagonal(&dv(&[0.6, 0.8])));
        assert_eq!(b.sigma_ab, DVector::zeros(2));
        assert_eq!(b.sigma_b2, 1.3);
    }

    #[test]
    fn weights_solve_the_system() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_dataset(&mut rng, 20, 3, 1);
        let h = hp(3, 1);
        let model = GPResidualModel::train(&d, &h).unwrap();
        let mut k = gram(&h, &d);
        for i in 0..d.len() {
            k[(i, i)] += h.noise_variance + model.jitter();
        }
        let resid = &k * model.weights() - DVector::from_column_slice(&d.ys);
        assert!(resid.amax() < 1e-8);
        let again = GPResidualModel::train(&d, &h).unwrap();
        assert_eq!(again.weights(), model.weights());
        assert_eq!(again.factor(), model.factor());
    }

    #[test]
    fn factor_reproduces_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = random_dataset(&mut rng, 12, 2, 2);
        let h = hp(2, 2);
        let model = GPResidualModel::train(&d, &h).unwrap();
        let mut k = gram(&h, &d);
        assert_eq!(k, k.transpose());
        for i in 0..d.len() {
            k[(i, i)] += h.noise_variance + model.jitter();
        }
        let l = model.factor();
        let err = (l * l.transpose() - &k).norm() / k.norm();
        assert!(err < 1e-8);
    }

    #[test]
    fn interpolates_training_points_without_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = random_dataset(&mut rng, 8, 2, 1);
        let mut h = hp(2, 1);
        h.noise_variance = 1e-8;
        let model = GPResidualModel::train(&d, &h).unwrap();
        let (mu, var) = model.posterior_predict(&d.xs[3], &d.us[3]);
        assert!(var < 1e-6, "{var}");
        assert!((mu - d.ys[3]).abs() < 1e-4);
    }

    #[test]
    fn zero_control_gives_b_marginal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = random_dataset(&mut rng, 10, 2, 2);
        let model = GPResidualModel::train(&d, &hp(2, 2)).unwrap();
        let x = dv(&[0.1, 0.4]);
        let b = model.posterior_blocks(&x);
        let (mu, var) = model.posterior_predict(&x, &dv(&[0.0, 0.0]));
        assert_eq!(mu, b.b_mean);
        assert_eq!(var, b.sigma_b2.max(0.0));
    }

    #[test]
    fn fitting_never_lowers_mll() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = random_dataset(&mut rng, 30, 2, 1);
        let cfg = FitConfig {
            restarts: 2,
            max_iters: 50,
            ..FitConfig::default()
        };
        let rep = fit_hyperparams(&d, &cfg, None).unwrap();
        assert!(rep.mll >= rep.initial_mll);
        let direct = log_marginal_likelihood(&d, &rep.hyperparams).unwrap();
        assert!((direct - rep.mll).abs() < 1e-8 * direct.abs().max(1.0));
    }

    #[test]
    fn fitting_needs_two_points() {
        let (d, _) = single(1.0, 0.1, 1.0);
        assert!(fit_hyperparams(&d, &FitConfig::default(), None).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_tamper_detection() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = random_dataset(&mut rng, 10, 2, 1);
        let model = GPResidualModel::train(&d, &hp(2, 1)).unwrap();
        let cp = Checkpoint::from_model(&model);
        let json = serde_json::to_string(&cp).unwrap();
        let back: Checkpoint = serde_json::from_str(&json).unwrap();
        let restored = back.restore().unwrap();
        assert_eq!(restored.weights(), model.weights());

        let mut bad = back.clone();
        bad.dataset.ys[0] += 1.0;
        assert!(matches!(bad.restore(), Err(crate::Error::Checkpoint(_))));
        let mut bad = back;
        bad.mll = bad.mll.map(|v| v + 1e-3);
        assert!(matches!(bad.restore(), Err(crate::Error::Checkpoint(_))));
    }
}
