//! Barrier functions, nominal constraint constants and the higher-order chain.
//!
//! For a barrier of relative degree `r` the chain is
//! `ψ₀ = h`, `ψᵢ₊₁ = ψ̇ᵢ + γᵢ ψᵢ` with derivatives taken along the nominal
//! drift. The enforced constraint is `ψ̇ᵣ₋₁ + γᵣ₋₁ ψᵣ₋₁ = c_aᵀu + c_b ≥ 0`.
//! Time derivatives of `h` are computed exactly with Taylor-series jets.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlAffineModel, ControlVec, Plant, StateVec, Which};
use crate::error::{Error, Result};
use crate::jet::{Jet, Scalar};

/// Largest supported relative degree (jets carry `MAX_ORDER + 1` terms).
pub const MAX_ORDER: usize = 5;
type TimeJet<T> = Jet<T, { MAX_ORDER + 1 }>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BarrierShape {
    /// `θ_m² - θ̇² - (θ - θ_e)²` over state entries 1 (θ) and 3 (θ̇).
    SegwayTilt { theta_max: f64, theta_eq: f64 },
    /// `(x - cx)² + (y - cy)² - r²` over state entries 0 and 1.
    CircularObstacle { center: [f64; 2], radius_sq: f64 },
    /// `wᵀx + offset`.
    Affine { weights: Vec<f64>, offset: f64 },
}

impl BarrierShape {
    pub fn eval<T: Scalar>(&self, x: &[T]) -> T {
        match self {
            BarrierShape::SegwayTilt {
                theta_max,
                theta_eq,
            } => {
                let dth = x[1] - T::cst(*theta_eq);
                T::cst(theta_max * theta_max) - x[3] * x[3] - dth * dth
            }
            BarrierShape::CircularObstacle { center, radius_sq } => {
                let dx = x[0] - T::cst(center[0]);
                let dy = x[1] - T::cst(center[1]);
                dx * dx + dy * dy - T::cst(*radius_sq)
            }
            BarrierShape::Affine { weights, offset } => weights
                .iter()
                .zip(x)
                .fold(T::cst(*offset), |acc, (w, xi)| acc + xi.scale(*w)),
        }
    }

    pub fn grad(&self, x: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        match self {
            BarrierShape::SegwayTilt { theta_eq, .. } => {
                g[1] = -2.0 * (x[1] - theta_eq);
                g[3] = -2.0 * x[3];
            }
            BarrierShape::CircularObstacle { center, .. } => {
                g[0] = 2.0 * (x[0] - center[0]);
                g[1] = 2.0 * (x[1] - center[1]);
            }
            BarrierShape::Affine { weights, .. } => {
                for (gi, w) in g.iter_mut().zip(weights) {
                    *gi = *w;
                }
            }
        }
        g
    }
}

impl BarrierShape {
    /// State coordinates of the plane the safe set is drawn in.
    pub fn phase_coordinates(&self) -> Option<(usize, usize)> {
        match self {
            BarrierShape::SegwayTilt { .. } => Some((1, 3)),
            BarrierShape::CircularObstacle { .. } => Some((0, 1)),
            BarrierShape::Affine { .. } => None,
        }
    }

    /// `n` points of the zero level set in the phase plane, evenly spaced
    /// in angle. Empty for shapes without a closed boundary.
    pub fn boundary(&self, n: usize) -> Vec<[f64; 2]> {
        let (c, r) = match self {
            BarrierShape::SegwayTilt {
                theta_max,
                theta_eq,
            } => ([*theta_eq, 0.0], *theta_max),
            BarrierShape::CircularObstacle { center, radius_sq } => (*center, radius_sq.max(0.0).sqrt()),
            BarrierShape::Affine { .. } => return Vec::new(),
        };
        (0..n)
            .map(|k| {
                let t = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                [c[0] + r * t.cos(), c[1] + r * t.sin()]
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BarrierSpec {
    pub shape: BarrierShape,
    /// Linear class-K gain, `α(h) = γ h`, used when `relative_degree == 1`.
    pub alpha_gain: f64,
    pub relative_degree: usize,
    /// `γ₀ … γᵣ₋₁` of the chain; ignored for relative degree one.
    #[serde(default)]
    pub hocbf_gains: Vec<f64>,
}

/// Nominal part of the enforced constraint, `c_aᵀu + c_b ≥ 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintConstants {
    pub c_a: DVector<f64>,
    pub c_b: f64,
}

impl ConstraintConstants {
    pub fn value(&self, u: &ControlVec) -> f64 {
        self.c_a.dot(u) + self.c_b
    }
}

pub const SEGWAY_THETA_MAX: f64 = 0.2617;
pub const SEGWAY_THETA_EQ: f64 = 0.1383;
pub const OBSTACLE_CENTER: [f64; 2] = [1.85, 0.6];
pub const OBSTACLE_RADIUS_SQ: f64 = 0.28;

pub fn segway_barrier() -> BarrierSpec {
    BarrierSpec {
        shape: BarrierShape::SegwayTilt {
            theta_max: SEGWAY_THETA_MAX,
            theta_eq: SEGWAY_THETA_EQ,
        },
        alpha_gain: 1.0,
        relative_degree: 1,
        hocbf_gains: Vec::new(),
    }
}

pub fn quadrotor_barrier() -> BarrierSpec {
    BarrierSpec {
        shape: BarrierShape::CircularObstacle {
            center: OBSTACLE_CENTER,
            radius_sq: OBSTACLE_RADIUS_SQ,
        },
        alpha_gain: 4.0,
        relative_degree: 4,
        hocbf_gains: vec![4.0; 4],
    }
}

impl BarrierSpec {
    pub fn validate(&self) -> Result<()> {
        if self.relative_degree == 0 || self.relative_degree > MAX_ORDER {
            return Err(Error::Config(format!(
                "relative degree {} outside 1..={MAX_ORDER}",
                self.relative_degree
            )));
        }
        if self.relative_degree == 1 {
            if !(self.alpha_gain > 0.0) {
                return Err(Error::Config("class-K gain must be positive".into()));
            }
        } else if self.hocbf_gains.len() != self.relative_degree
            || self.hocbf_gains.iter().any(|g| !(*g > 0.0))
        {
            return Err(Error::Config(format!(
                "need {} positive chain gains, got {:?}",
                self.relative_degree, self.hocbf_gains
            )));
        }
        Ok(())
    }

    pub fn h(&self, x: &StateVec) -> f64 {
        self.shape.eval(x.as_slice())
    }

    pub fn grad_h(&self, x: &StateVec) -> DVector<f64> {
        self.shape.grad(x.as_slice())
    }

    pub fn alpha(&self, h: f64) -> f64 {
        self.alpha_gain * h
    }

    /// Gains of each chain stage; `[alpha_gain]` for relative degree one.
    pub fn stage_gains(&self) -> Vec<f64> {
        if self.relative_degree == 1 {
            vec![self.alpha_gain]
        } else {
            self.hocbf_gains.clone()
        }
    }

    /// Gain applied to the last chain stage.
    pub fn final_gain(&self) -> f64 {
        *self.stage_gains().last().expect("validated gains")
    }

    /// Coefficients of `ψᵢ = Σₖ pₖ h⁽ᵏ⁾` for `i = 0..=r`; row `r` is the
    /// enforced constraint.
    fn chain_polynomials(&self) -> Vec<Vec<f64>> {
        let gains = self.stage_gains();
        let mut polys = vec![vec![1.0]];
        for g in gains {
            let prev = polys.last().unwrap();
            let mut next = vec![0.0; prev.len() + 1];
            for (k, p) in prev.iter().enumerate() {
                next[k + 1] += p;
                next[k] += g * p;
            }
            polys.push(next);
        }
        polys
    }

    /// `ψ₀ … ψᵣ₋₁` at `x`.
    pub fn chain_values(&self, model: &ControlAffineModel, x: &StateVec) -> Result<Vec<f64>> {
        self.validate()?;
        let r = self.relative_degree;
        let zero = vec![0.0; model.control_dim()];
        let derivs = lie_derivatives(&self.shape, &model.nominal, x.as_slice(), &zero, r - 1);
        Ok(self.chain_polynomials()[..r]
            .iter()
            .map(|p| p.iter().zip(&derivs).map(|(c, d)| c * d).sum())
            .collect())
    }

    /// Final chain stage `ψᵣ₋₁`, the quantity whose derivative is constrained.
    pub fn final_stage(&self, model: &ControlAffineModel, x: &StateVec) -> Result<f64> {
        if self.relative_degree == 1 {
            return Ok(self.h(x));
        }
        Ok(*self.chain_values(model, x)?.last().unwrap())
    }

    /// Relative-degree-one constants from the analytic gradient.
    pub fn constraint_constants(
        &self,
        model: &ControlAffineModel,
        x: &StateVec,
    ) -> Result<ConstraintConstants> {
        if self.relative_degree != 1 {
            return Err(Error::RelativeDegree(self.relative_degree));
        }
        let grad = self.grad_h(x);
        let f = model.drift(Which::Nominal, x);
        let g = model.actuation(Which::Nominal, x);
        Ok(ConstraintConstants {
            c_a: g.tr_mul(&grad),
            c_b: grad.dot(&f) + self.alpha(self.h(x)),
        })
    }

    /// Constants of the chain constraint. Fails if control shows up in a
    /// derivative of `h` below the relative degree.
    pub fn hocbf_constants(
        &self,
        model: &ControlAffineModel,
        x: &StateVec,
    ) -> Result<ConstraintConstants> {
        self.validate()?;
        let r = self.relative_degree;
        if r == 1 {
            return self.constraint_constants(model, x);
        }
        let m = model.control_dim();
        let plant = &model.nominal;
        let zero = vec![0.0; m];
        let base = lie_derivatives(&self.shape, plant, x.as_slice(), &zero, r);
        let poly = &self.chain_polynomials()[r];
        let mut c_a = DVector::zeros(m);
        for j in 0..m {
            let mut e = zero.clone();
            e[j] = 1.0;
            let with = lie_derivatives(&self.shape, plant, x.as_slice(), &e, r);
            for k in 0..r {
                let scale = 1.0 + base[k].abs().max(with[k].abs());
                if (with[k] - base[k]).abs() > 1e-9 * scale {
                    return Err(Error::Structural {
                        order: k,
                        relative_degree: r,
                    });
                }
            }
            c_a[j] = with[r] - base[r];
        }
        let c_b = poly.iter().zip(&base).map(|(p, d)| p * d).sum();
        Ok(ConstraintConstants { c_a, c_b })
    }

    /// Dispatches on the relative degree.
    pub fn constants(&self, model: &ControlAffineModel, x: &StateVec) -> Result<ConstraintConstants> {
        if self.relative_degree == 1 {
            self.constraint_constants(model, x)
        } else {
            self.hocbf_constants(model, x)
        }
    }

    /// Ground-truth residual of the final stage derivative,
    /// `∇ψ · ((f - f̂) + (g - ĝ) u)`.
    pub fn residual_truth(
        &self,
        model: &ControlAffineModel,
        x: &StateVec,
        u: &ControlVec,
    ) -> Result<f64> {
        self.validate()?;
        let dt = model.eval(Which::True, x, u)?;
        let dn = model.eval(Which::Nominal, x, u)?;
        let dir = dt - dn;
        let xs: Vec<Jet<f64, 2>> = x
            .iter()
            .zip(dir.iter())
            .map(|(xi, vi)| Jet::from_coeffs([*xi, *vi]))
            .collect();
        let r = self.relative_degree;
        let zero = vec![Jet::<f64, 2>::cst(0.0); model.control_dim()];
        let derivs = lie_derivatives(&self.shape, &model.nominal, &xs, &zero, r - 1);
        let poly = &self.chain_polynomials()[r - 1];
        let psi = poly
            .iter()
            .zip(&derivs)
            .fold(Jet::<f64, 2>::cst(0.0), |acc, (p, d)| acc + d.scale(*p));
        Ok(psi.c[1])
    }
}

/// `h, ḣ, …, h⁽ᵒʳᵈᵉʳ⁾` along `ẋ = f(x) + g(x)u` with `u` held constant.
pub fn lie_derivatives<T: Scalar>(
    shape: &BarrierShape,
    plant: &Plant,
    x: &[T],
    u: &[T],
    order: usize,
) -> Vec<T> {
    assert!(order <= MAX_ORDER, "order {order} exceeds {MAX_ORDER}");
    let mut xs: Vec<TimeJet<T>> = x.iter().map(|v| Jet::constant(*v)).collect();
    let us: Vec<TimeJet<T>> = u.iter().map(|v| Jet::constant(*v)).collect();
    for k in 0..order {
        let dx = plant.field(&xs, &us);
        for (xi, di) in xs.iter_mut().zip(&dx) {
            xi.c[k + 1] = di.c[k].scale(1.0 / (k + 1) as f64);
        }
    }
    let hs = shape.eval(&xs);
    (0..=order).map(|k| hs.derivative(k)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{make_quadrotor, make_quadrotor_extended, make_segway, LinearParams};
    use nalgebra::DMatrix;

    #[test]
    fn boundary_samples_lie_on_zero_level() {
        for spec in [segway_barrier(), quadrotor_barrier()] {
            let pts = spec.shape.boundary(256);
            assert_eq!(pts.len(), 256);
            let (i, j) = spec.shape.phase_coordinates().unwrap();
            for p in pts {
                let mut x = DVector::zeros(8);
                x[i] = p[0];
                x[j] = p[1];
                assert!(spec.h(&x).abs() < 1e-12);
            }
        }
    }

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn double_integrator() -> ControlAffineModel {
        ControlAffineModel::matched(
            "di",
            Plant::Linear(LinearParams {
                a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
                b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            }),
        )
    }

    #[test]
    fn segway_barrier_values() {
        let b = segway_barrier();
        let h = b.h(&dv(&[0.0, 0.1383, 0.0, 0.0]));
        assert!((h - 0.06848689).abs() < 1e-15);
        let h = b.h(&dv(&[0.0, 0.1383, 0.0, 0.2617]));
        assert_eq!(h, 0.0);
        assert_eq!(b.grad_h(&dv(&[0.0, 0.1383, 0.0, 0.1]))[1], 0.0);
    }

    #[test]
    fn quadrotor_barrier_values() {
        let b = quadrotor_barrier();
        let mut x = dv(&[1.85, 0.6, 0.0, 0.0, 0.0, 0.0]);
        assert!((b.h(&x) + 0.28).abs() < 1e-15);
        x[0] = 1.85 + 0.28f64.sqrt();
        assert!(b.h(&x).abs() < 1e-15);
        x[0] = 2.0;
        x[1] = 2.0;
        assert!((b.h(&x) - 1.7025).abs() < 1e-12);
    }

    #[test]
    fn constants_vanish_without_actuation() {
        let lin = ControlAffineModel::matched(
            "lin",
            Plant::Linear(LinearParams {
                a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
                b: DMatrix::zeros(2, 1),
            }),
        );
        let spec = BarrierSpec {
            shape: BarrierShape::Affine {
                weights: vec![1.0, 0.5],
                offset: 0.0,
            },
            alpha_gain: 2.0,
            relative_degree: 1,
            hocbf_gains: vec![],
        };
        let cc = spec.constraint_constants(&lin, &dv(&[0.3, -0.1])).unwrap();
        assert_eq!(cc.c_a[0], 0.0);
    }

    #[test]
    fn boundary_has_no_class_k_term() {
        let m = make_segway();
        let b = segway_barrier();
        let x = dv(&[0.0, 0.1383, 0.0, 0.2617]);
        let cc = b.constraint_constants(&m, &x).unwrap();
        let grad = b.grad_h(&x);
        let f = m.drift(Which::Nominal, &x);
        assert_eq!(cc.c_b, grad.dot(&f));
    }

    #[test]
    fn segway_at_equilibrium_angle_uses_rate_row_only() {
        let m = make_segway();
        let b = segway_barrier();
        let x = dv(&[0.2, 0.1383, 0.1, -0.05]);
        let cc = b.constraint_constants(&m, &x).unwrap();
        let g = m.actuation(Which::Nominal, &x);
        assert_eq!(cc.c_a[0], -2.0 * x[3] * g[(3, 0)]);
    }

    #[test]
    fn wrong_relative_degree_for_plain_constants() {
        let m = make_quadrotor_extended();
        let x = dv(&[2.0, 2.0, 0.0, 0.0, 0.0, 0.0, 14.7, 0.0]);
        let err = quadrotor_barrier().constraint_constants(&m, &x).unwrap_err();
        assert!(matches!(err, Error::RelativeDegree(4)));
    }

    #[test]
    fn double_integrator_chain() {
        let m = double_integrator();
        let spec = BarrierSpec {
            shape: BarrierShape::Affine {
                weights: vec![1.0, 0.0],
                offset: 0.0,
            },
            alpha_gain: 1.0,
            relative_degree: 2,
            hocbf_gains: vec![1.5, 2.5],
        };
        let x = dv(&[0.7, -0.3]);
        let cc = spec.hocbf_constants(&m, &x).unwrap();
        assert!((cc.c_a[0] - 1.0).abs() < 1e-14);
        let expect = x[1] * (1.5 + 2.5) + 1.5 * 2.5 * x[0];
        assert!((cc.c_b - expect).abs() < 1e-14);
    }

    #[test]
    fn degree_one_chain_is_plain_constants() {
        let m = make_segway();
        let b = segway_barrier();
        let x = dv(&[0.1, 0.2, 0.3, -0.1]);
        assert_eq!(
            b.hocbf_constants(&m, &x).unwrap(),
            b.constraint_constants(&m, &x).unwrap()
        );
    }

    #[test]
    fn rigid_quadrotor_rejects_fourth_order_chain() {
        let m = make_quadrotor();
        let x = dv(&[2.0, 2.0, 0.1, 0.0, 0.0, 0.0]);
        let err = quadrotor_barrier().hocbf_constants(&m, &x).unwrap_err();
        assert!(matches!(err, Error::Structural { order: 2, .. }));
    }

    #[test]
    fn quadrotor_hover_far_from_obstacle_has_slack() {
        let m = make_quadrotor_extended();
        let x = dv(&[2.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.5 * 9.81, 0.0]);
        let cc = quadrotor_barrier().hocbf_constants(&m, &x).unwrap();
        let hover = dv(&[0.0, 0.0]);
        assert!(cc.value(&hover) > 0.0);
    }

    #[test]
    fn residual_vanishes_on_matched_model() {
        let m = ControlAffineModel::matched("s", make_segway().truth);
        let r = segway_barrier()
            .residual_truth(&m, &dv(&[0.1, 0.2, 0.3, -0.2]), &dv(&[0.4]))
            .unwrap();
        assert_eq!(r, 0.0);
    }
}
