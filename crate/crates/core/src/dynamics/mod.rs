//! Control-affine plant models, fixed-step integration and closed-loop rollout.

mod quadrotor;
mod segway;
mod trajectory;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::barrier::BarrierSpec;
use crate::error::{Error, Result};
use crate::jet::Scalar;

pub use quadrotor::QuadrotorParams;
pub use segway::{SegwayParams, GRAVITY};
pub use trajectory::{StepMeta, Trajectory};

pub type StateVec = DVector<f64>;
pub type ControlVec = DVector<f64>;

/// `ẋ = A x + B u`, used for integrator and barrier-chain checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

/// One parameterized vector field `x ↦ (f(x), g(x))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Plant {
    Segway(SegwayParams),
    Quadrotor(QuadrotorParams),
    QuadrotorExtended(QuadrotorParams),
    Linear(LinearParams),
}

impl Plant {
    pub fn state_dim(&self) -> usize {
        match self {
            Plant::Segway(_) => 4,
            Plant::Quadrotor(_) => 6,
            Plant::QuadrotorExtended(_) => 8,
            Plant::Linear(p) => p.a.nrows(),
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            Plant::Segway(_) => 1,
            Plant::Quadrotor(_) | Plant::QuadrotorExtended(_) => 2,
            Plant::Linear(p) => p.b.ncols(),
        }
    }

    pub fn drift<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        match self {
            Plant::Segway(p) => p.drift(x),
            Plant::Quadrotor(p) => p.drift(x),
            Plant::QuadrotorExtended(p) => p.extended_drift(x),
            Plant::Linear(p) => (0..p.a.nrows())
                .map(|i| {
                    (0..p.a.ncols()).fold(T::cst(0.0), |acc, j| acc + x[j].scale(p.a[(i, j)]))
                })
                .collect(),
        }
    }

    /// `g(x)` in row-major order, `state_dim × control_dim`.
    pub fn actuation<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        match self {
            Plant::Segway(p) => p.actuation(x),
            Plant::Quadrotor(p) => p.actuation(x),
            Plant::QuadrotorExtended(p) => p.extended_actuation(x),
            Plant::Linear(p) => {
                let (s, m) = p.b.shape();
                let mut out = Vec::with_capacity(s * m);
                for i in 0..s {
                    for j in 0..m {
                        out.push(T::cst(p.b[(i, j)]));
                    }
                }
                out
            }
        }
    }

    /// `f(x) + g(x) u`.
    pub fn field<T: Scalar>(&self, x: &[T], u: &[T]) -> Vec<T> {
        let m = self.control_dim();
        let mut dx = self.drift(x);
        let g = self.actuation(x);
        for (i, d) in dx.iter_mut().enumerate() {
            for j in 0..m {
                *d = *d + g[i * m + j] * u[j];
            }
        }
        dx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    True,
    Nominal,
}

/// Paired true and nominal dynamics of one system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlAffineModel {
    pub name: String,
    pub truth: Plant,
    pub nominal: Plant,
}

impl ControlAffineModel {
    pub fn new(name: impl Into<String>, truth: Plant, nominal: Plant) -> Result<Self> {
        if truth.state_dim() != nominal.state_dim() {
            return Err(Error::Dimension {
                what: "nominal state",
                expected: truth.state_dim(),
                got: nominal.state_dim(),
            });
        }
        if truth.control_dim() != nominal.control_dim() {
            return Err(Error::Dimension {
                what: "nominal control",
                expected: truth.control_dim(),
                got: nominal.control_dim(),
            });
        }
        Ok(Self {
            name: name.into(),
            truth,
            nominal,
        })
    }

    /// Same plant on both sides; no residual to learn.
    pub fn matched(name: impl Into<String>, plant: Plant) -> Self {
        Self {
            name: name.into(),
            truth: plant.clone(),
            nominal: plant,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.truth.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.truth.control_dim()
    }

    pub fn plant(&self, which: Which) -> &Plant {
        match which {
            Which::True => &self.truth,
            Which::Nominal => &self.nominal,
        }
    }

    fn check(&self, x: &StateVec, u: &ControlVec) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::Dimension {
                what: "state",
                expected: self.state_dim(),
                got: x.len(),
            });
        }
        if u.len() != self.control_dim() {
            return Err(Error::Dimension {
                what: "control",
                expected: self.control_dim(),
                got: u.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, which: Which, x: &StateVec, u: &ControlVec) -> Result<StateVec> {
        self.check(x, u)?;
        Ok(DVector::from_vec(
            self.plant(which).field(x.as_slice(), u.as_slice()),
        ))
    }

    pub fn eval_true(&self, x: &StateVec, u: &ControlVec) -> Result<StateVec> {
        self.eval(Which::True, x, u)
    }

    pub fn eval_nominal(&self, x: &StateVec, u: &ControlVec) -> Result<StateVec> {
        self.eval(Which::Nominal, x, u)
    }

    pub fn drift(&self, which: Which, x: &StateVec) -> StateVec {
        DVector::from_vec(self.plant(which).drift(x.as_slice()))
    }

    pub fn actuation(&self, which: Which, x: &StateVec) -> DMatrix<f64> {
        let p = self.plant(which);
        DMatrix::from_row_slice(p.state_dim(), p.control_dim(), &p.actuation(x.as_slice()))
    }

    /// Classical RK4 step with the control held over the step.
    pub fn step_rk4(&self, x: &StateVec, u: &ControlVec, dt: f64, which: Which) -> Result<StateVec> {
        if !(dt > 0.0) {
            return Err(Error::Contract(format!("dt must be positive, got {dt}")));
        }
        self.check(x, u)?;
        let p = self.plant(which);
        let u = u.as_slice();
        let f = |x: &[f64]| p.field(x, u);
        let add = |x: &[f64], k: &[f64], h: f64| -> Vec<f64> {
            x.iter().zip(k).map(|(a, b)| a + h * b).collect()
        };
        let x0 = x.as_slice();
        let k1 = f(x0);
        let k2 = f(&add(x0, &k1, 0.5 * dt));
        let k3 = f(&add(x0, &k2, 0.5 * dt));
        let k4 = f(&add(x0, &k3, dt));
        let next: Vec<f64> = (0..x0.len())
            .map(|i| x0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
            .collect();
        Ok(DVector::from_vec(next))
    }
}

pub fn make_segway() -> ControlAffineModel {
    let truth = SegwayParams::reference();
    let nominal = SegwayParams {
        pendulum_mass: truth.pendulum_mass * 0.85,
        motor_gain: truth.motor_gain * 1.2,
        ..truth.clone()
    };
    ControlAffineModel {
        name: "segway".into(),
        truth: Plant::Segway(truth),
        nominal: Plant::Segway(nominal),
    }
}

/// Rigid-body planar quadrotor, controls `(thrust, torque)`.
pub fn make_quadrotor() -> ControlAffineModel {
    ControlAffineModel {
        name: "quadrotor".into(),
        truth: Plant::Quadrotor(QuadrotorParams::truth()),
        nominal: Plant::Quadrotor(QuadrotorParams::nominal()),
    }
}

/// Thrust-extended planar quadrotor, controls `(thrust acceleration, torque)`.
pub fn make_quadrotor_extended() -> ControlAffineModel {
    ControlAffineModel {
        name: "quadrotor".into(),
        truth: Plant::QuadrotorExtended(QuadrotorParams::truth()),
        nominal: Plant::QuadrotorExtended(QuadrotorParams::nominal()),
    }
}

/// Closed-loop policy. Stateful so a filter can keep a reduced confidence
/// level for the rest of an episode.
pub trait Controller {
    fn control(&mut self, t: f64, x: &StateVec) -> (ControlVec, Option<StepMeta>);
}

/// Adapts a plain feedback law.
pub struct Feedback<F>(pub F);

impl<F: FnMut(f64, &StateVec) -> ControlVec> Controller for Feedback<F> {
    fn control(&mut self, t: f64, x: &StateVec) -> (ControlVec, Option<StepMeta>) {
        ((self.0)(t, x), None)
    }
}

fn step_count(horizon: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0) || !(horizon >= 0.0) {
        return Err(Error::Contract(format!(
            "invalid horizon {horizon} / dt {dt}"
        )));
    }
    let n = (horizon / dt).round();
    if (n * dt - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::Contract(format!(
            "horizon {horizon} is not a multiple of dt {dt}"
        )));
    }
    Ok(n as usize)
}

/// Closed-loop trajectory under the true dynamics.
pub fn rollout(
    model: &ControlAffineModel,
    controller: &mut dyn Controller,
    x0: &StateVec,
    horizon: f64,
    dt: f64,
    barrier: Option<&BarrierSpec>,
) -> Result<Trajectory> {
    let n = step_count(horizon, dt)?;
    if x0.len() != model.state_dim() {
        return Err(Error::Dimension {
            what: "initial state",
            expected: model.state_dim(),
            got: x0.len(),
        });
    }
    let mut traj = Trajectory::start(dt, x0.clone(), barrier.map(|b| b.h(x0)));
    let mut x = x0.clone();
    for i in 0..n {
        let t = i as f64 * dt;
        let (u, meta) = controller.control(t, &x);
        let next = model.step_rk4(&x, &u, dt, Which::True)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::IntegrationBlowup {
                step: i,
                partial: Box::new(traj),
            });
        }
        let h = barrier.map(|b| b.h(&next));
        traj.push(u, meta, next.clone(), h);
        x = next;
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn quadrotor_hover_cancels_gravity() {
        let m = make_quadrotor();
        let x = dv(&[0.3, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let u = dv(&[1.8 * 9.81, 0.0]);
        let dx = m.eval_true(&x, &u).unwrap();
        assert!(dx[4].abs() < 1e-12);
        assert_eq!(dx[3], 0.0);
    }

    #[test]
    fn quadrotor_nominal_inertia() {
        let m = make_quadrotor();
        let x = dv(&[0.0; 6]);
        let u = dv(&[0.0, 2.6]);
        let dx = m.eval_nominal(&x, &u).unwrap();
        assert!((dx[5] - 2.6 / 1.3).abs() < 1e-15);
        let dx = m.eval_true(&x, &u).unwrap();
        assert!((dx[5] - 2.6 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn quadrotor_models_differ_only_in_mass_and_inertia() {
        let m = make_quadrotor();
        match (&m.truth, &m.nominal) {
            (Plant::Quadrotor(t), Plant::Quadrotor(n)) => {
                assert_eq!((t.mass, t.inertia), (1.8, 1.1));
                assert_eq!((n.mass, n.inertia), (1.5, 1.3));
            }
            _ => panic!("unexpected plants"),
        }
    }

    #[test]
    fn segway_zero_control_is_drift() {
        let m = make_segway();
        let x = dv(&[0.1, 0.2, 0.0, 0.0]);
        let dx = m.eval_true(&x, &dv(&[0.0])).unwrap();
        assert_eq!(dx, m.drift(Which::True, &x));
        assert_ne!(m.truth, m.nominal);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let m = make_segway();
        let err = m.eval_true(&dv(&[0.0; 3]), &dv(&[0.0])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
        let err = m.eval_true(&dv(&[0.0; 4]), &dv(&[0.0, 1.0])).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn matched_model_agrees() {
        let m = ControlAffineModel::matched("s", Plant::Segway(SegwayParams::reference()));
        let x = dv(&[0.1, 0.2, -0.3, 0.4]);
        let u = dv(&[0.7]);
        assert_eq!(m.eval_true(&x, &u).unwrap(), m.eval_nominal(&x, &u).unwrap());
    }

    #[test]
    fn zero_horizon_rollout_is_single_state() {
        let m = make_segway();
        let mut c = Feedback(|_t: f64, _x: &StateVec| dv(&[0.0]));
        let x0 = dv(&[0.0, 0.1, 0.0, 0.0]);
        let tr = rollout(&m, &mut c, &x0, 0.0, 0.01, None).unwrap();
        assert_eq!(tr.states.len(), 1);
        assert!(tr.controls.is_empty());
    }

    #[test]
    fn ragged_horizon_rejected() {
        let m = make_segway();
        let mut c = Feedback(|_t: f64, _x: &StateVec| dv(&[0.0]));
        let x0 = dv(&[0.0, 0.1, 0.0, 0.0]);
        assert!(rollout(&m, &mut c, &x0, 0.015, 0.01, None).is_err());
    }

    #[test]
    fn blowup_keeps_partial_trajectory() {
        let lin = LinearParams {
            a: DMatrix::from_element(1, 1, 1e4),
            b: DMatrix::zeros(1, 1),
        };
        let m = ControlAffineModel::matched("lin", Plant::Linear(lin));
        let mut c = Feedback(|_t: f64, _x: &StateVec| dv(&[0.0]));
        let err = rollout(&m, &mut c, &dv(&[1.0]), 10.0, 0.1, None).unwrap_err();
        match err {
            Error::IntegrationBlowup { step, partial } => {
                assert!(step > 0);
                assert_eq!(partial.states.len(), step + 1);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn input_ignored_without_actuation() {
        let lin = LinearParams {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            b: DMatrix::zeros(2, 1),
        };
        let m = ControlAffineModel::matched("lin", Plant::Linear(lin));
        let x = dv(&[1.0, 0.0]);
        let a = m.step_rk4(&x, &dv(&[0.0]), 0.1, Which::True).unwrap();
        let b = m.step_rk4(&x, &dv(&[5.0]), 0.1, Which::True).unwrap();
        assert_eq!(a, b);
    }
}
