//! Safety filters: the nominal CBF-QP and the chance-constrained projection
//! that backs the barrier condition off by `δ` posterior standard deviations.

mod chance;
mod program;
mod quantile;
mod socp;

use serde::{Deserialize, Serialize};

pub use chance::{binomial_band, chance_validate};
pub use program::{build_program, ConvexSafetyProgram};
pub use quantile::{delta_from_epsilon, normal_cdf, normal_quantile};
pub use socp::{solve, Solution, SolveStatus};

use crate::barrier::ConstraintConstants;
use crate::dynamics::{ControlVec, StateVec};
use crate::error::{Error, Result};
use crate::gp::{GPResidualModel, PosteriorBlocks};

/// Minimum-norm correction of `u_d` onto `c_aᵀu + c_b ≥ 0`.
pub fn cbf_qp(cc: &ConstraintConstants, u_d: &ControlVec) -> Result<ControlVec> {
    if cc.c_a.len() != u_d.len() {
        return Err(Error::Dimension {
            what: "constraint c_a",
            expected: u_d.len(),
            got: cc.c_a.len(),
        });
    }
    if !cc.c_b.is_finite() || cc.c_a.iter().chain(u_d.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Contract("non-finite CBF-QP input".into()));
    }
    socp::project_halfspace(&cc.c_a, cc.c_b, u_d).ok_or_else(|| {
        Error::Infeasible(format!(
            "constraint does not depend on the control and is violated (c_b = {})",
            cc.c_b
        ))
    })
}

/// How the confidence level is lowered when the projection is infeasible.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackoffSchedule {
    /// Multiplier applied to `δ` after each infeasible attempt.
    pub factor: f64,
    /// Reduced attempts before falling back to `δ = 0`.
    pub attempts: usize,
    /// Keep the reduced `δ` for the rest of the episode.
    pub keep_for_episode: bool,
}

impl Default for BackoffSchedule {
    fn default() -> Self {
        Self {
            factor: 0.5,
            attempts: 6,
            keep_for_episode: true,
        }
    }
}

impl BackoffSchedule {
    /// `δ, δf, δf², …, δf^attempts, 0`, without repeats.
    pub fn deltas(&self, delta: f64) -> Vec<f64> {
        let mut out = vec![delta];
        if delta > 0.0 {
            let mut d = delta;
            for _ in 0..self.attempts {
                d *= self.factor;
                out.push(d);
            }
            out.push(0.0);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    pub u: ControlVec,
    pub delta_used: f64,
    pub feasible_at_requested_delta: bool,
    /// Chance-constraint left side at `u` and `delta_used`.
    pub slack: f64,
    pub solver_iterations: usize,
}

/// `(ā + c_a)ᵀu + b̄ + c_b - δ·σ_d(u)`.
pub fn chance_margin(blocks: &PosteriorBlocks, cc: &ConstraintConstants, u: &ControlVec, delta: f64) -> f64 {
    let (mean, var) = blocks.predict(u);
    cc.value(u) + mean - delta * var.sqrt()
}

/// Chance-constrained projection from precomputed posterior blocks.
pub fn probf_project(
    blocks: &PosteriorBlocks,
    cc: &ConstraintConstants,
    u_d: &ControlVec,
    delta_request: f64,
    backoff: &BackoffSchedule,
) -> FilterResult {
    let shifted = ConstraintConstants {
        c_a: &cc.c_a + &blocks.a_mean,
        c_b: cc.c_b + blocks.b_mean,
    };
    let mut iterations = 0;
    for (k, delta) in backoff.deltas(delta_request.max(0.0)).into_iter().enumerate() {
        let attempt = if delta == 0.0 {
            cbf_qp(&shifted, u_d).ok()
        } else {
            build_program(blocks, cc, u_d, delta)
                .and_then(|p| solve(&p))
                .ok()
                .and_then(|s| {
                    iterations += s.iterations;
                    (s.status == SolveStatus::Optimal).then(|| s.control())
                })
        };
        if let Some(u) = attempt {
            return FilterResult {
                slack: chance_margin(blocks, cc, &u, delta),
                u,
                delta_used: delta,
                feasible_at_requested_delta: k == 0,
                solver_iterations: iterations,
            };
        }
    }
    FilterResult {
        slack: chance_margin(blocks, cc, u_d, 0.0),
        u: u_d.clone(),
        delta_used: 0.0,
        feasible_at_requested_delta: false,
        solver_iterations: iterations,
    }
}

/// Chance-constrained safety filter at state `x`. Never fails: when no
/// confidence level admits a solution, `u_d` is returned flagged infeasible.
pub fn probf_filter(
    gp: &GPResidualModel,
    cc: &ConstraintConstants,
    x: &StateVec,
    u_d: &ControlVec,
    delta_request: f64,
    backoff: &BackoffSchedule,
) -> FilterResult {
    probf_project(&gp.posterior_blocks(x), cc, u_d, delta_request, backoff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{KernelHyperparams, ResidualDataset};
    use nalgebra::{DMatrix, DVector};

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn cbf_qp_examples() {
        let cc = ConstraintConstants {
            c_a: dv(&[1.0]),
            c_b: 0.0,
        };
        assert_eq!(cbf_qp(&cc, &dv(&[-2.0])).unwrap(), dv(&[0.0]));
        assert_eq!(cbf_qp(&cc, &dv(&[3.0])).unwrap(), dv(&[3.0]));
        let cc = ConstraintConstants {
            c_a: dv(&[1.0, 1.0]),
            c_b: -1.0,
        };
        assert_eq!(cbf_qp(&cc, &dv(&[0.0, 0.0])).unwrap(), dv(&[0.5, 0.5]));
        let dead = ConstraintConstants {
            c_a: dv(&[0.0, 0.0]),
            c_b: -1.0,
        };
        assert!(matches!(cbf_qp(&dead, &dv(&[0.0, 0.0])), Err(Error::Infeasible(_))));
        let idle = ConstraintConstants {
            c_a: dv(&[0.0, 0.0]),
            c_b: 1.0,
        };
        assert_eq!(cbf_qp(&idle, &dv(&[1.0, 2.0])).unwrap(), dv(&[1.0, 2.0]));
    }

    #[test]
    fn schedule_halves_then_zero() {
        let d = BackoffSchedule::default().deltas(1.0);
        assert_eq!(d, vec![1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625, 0.0]);
        assert_eq!(BackoffSchedule::default().deltas(0.0), vec![0.0]);
    }

    fn blocks(var_b: f64) -> PosteriorBlocks {
        PosteriorBlocks {
            a_mean: dv(&[0.0]),
            b_mean: 0.0,
            sigma_a: DMatrix::zeros(1, 1),
            sigma_ab: dv(&[0.0]),
            sigma_b2: var_b,
        }
    }

    #[test]
    fn feasible_at_requested_delta() {
        let cc = ConstraintConstants {
            c_a: dv(&[1.0]),
            c_b: -1.0,
        };
        let r = probf_project(&blocks(0.09), &cc, &dv(&[0.0]), 1.0, &BackoffSchedule::default());
        assert_eq!(r.delta_used, 1.0);
        assert!(r.feasible_at_requested_delta);
        assert!((r.u[0] - 1.3).abs() < 1e-8);
        assert!(r.slack.abs() < 1e-8);
    }

    #[test]
    fn backs_off_to_half() {
        // Margin 0.6 and std 1 regardless of u.
        let bl = PosteriorBlocks {
            a_mean: dv(&[0.0]),
            b_mean: 0.0,
            sigma_a: DMatrix::zeros(1, 1),
            sigma_ab: dv(&[0.0]),
            sigma_b2: 1.0,
        };
        let cc = ConstraintConstants {
            c_a: dv(&[0.0]),
            c_b: 0.6,
        };
        let r = probf_project(&bl, &cc, &dv(&[2.0]), 1.0, &BackoffSchedule::default());
        assert_eq!(r.delta_used, 0.5);
        assert!(!r.feasible_at_requested_delta);
        assert!(r.slack >= -1e-6);
    }

    #[test]
    fn hopeless_constraint_returns_desired() {
        let cc = ConstraintConstants {
            c_a: dv(&[0.0]),
            c_b: -1.0,
        };
        let r = probf_project(&blocks(1.0), &cc, &dv(&[0.7]), 1.0, &BackoffSchedule::default());
        assert_eq!(r.u, dv(&[0.7]));
        assert_eq!(r.delta_used, 0.0);
        assert!(!r.feasible_at_requested_delta);
        assert!(r.slack < 0.0);
    }

    #[test]
    fn untrained_model_backs_off_near_boundary() {
        let hp = KernelHyperparams::isotropic(2, 1, 4.0, 1.0, 0.01);
        let gp = GPResidualModel::train(&ResidualDataset::new(), &hp).unwrap();
        // Prior std sqrt(4u² + 4) always exceeds the margin slope 1 at δ=1.
        let cc = ConstraintConstants {
            c_a: dv(&[1.0]),
            c_b: -0.5,
        };
        let x = dv(&[0.0, 0.0]);
        let bo = BackoffSchedule::default();
        let r = probf_filter(&gp, &cc, &x, &dv(&[0.0]), 1.0, &bo);
        assert!(!r.feasible_at_requested_delta);
        assert!(r.delta_used < 1.0);
        let r0 = probf_filter(&gp, &cc, &x, &dv(&[0.0]), 0.0, &bo);
        assert!(r0.feasible_at_requested_delta);
        assert_eq!(r0.delta_used, 0.0);
        assert!((r0.u[0] - 0.5).abs() < 1e-12);
    }
}
