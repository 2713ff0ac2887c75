//! Goal-reaching controllers and the safety-filtered closed loop.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::barrier::{BarrierSpec, ConstraintConstants};
use crate::dynamics::{ControlAffineModel, ControlVec, Controller, StateVec, StepMeta, GRAVITY};
use crate::filter::{cbf_qp, probf_filter, BackoffSchedule};
use crate::gp::GPResidualModel;

/// Linear state feedback toward an upright Segway parked at `goal_position`:
/// `u = k_p (p - p*) + k_θ (θ - θ_e) + k_v ṗ + k_ω θ̇`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegwayPd {
    pub goal_position: f64,
    pub theta_eq: f64,
    pub k_position: f64,
    pub k_tilt: f64,
    pub k_velocity: f64,
    pub k_rate: f64,
}

impl Default for SegwayPd {
    fn default() -> Self {
        Self {
            goal_position: 1.0,
            theta_eq: crate::barrier::SEGWAY_THETA_EQ,
            k_position: 3.16,
            k_tilt: 27.9,
            k_velocity: 5.0,
            k_rate: 8.8,
        }
    }
}

impl SegwayPd {
    pub fn control(&self, x: &StateVec) -> ControlVec {
        let u = self.k_position * (x[0] - self.goal_position)
            + self.k_tilt * (x[1] - self.theta_eq)
            + self.k_velocity * x[2]
            + self.k_rate * x[3];
        DVector::from_element(1, u)
    }
}

/// Position tracker for the thrust-extended planar quadrotor, by exact
/// feedback linearization of the nominal model. The flat output `(x, y)`
/// has relative degree four; with `z` the integral of the clipped position
/// error `e`, its snap is assigned as `-kᵢz - k₀e - k₁ė - k₂ë - k₃e⁽³⁾`.
/// The integral removes the hover offset a wrong mass estimate leaves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrotorTracker {
    pub goal: [f64; 2],
    pub mass: f64,
    pub inertia: f64,
    /// `[kᵢ, k₀, k₁, k₂, k₃]`.
    pub gains: [f64; 5],
    /// Position error is clipped per axis to keep far goals gentle.
    pub max_position_error: f64,
    /// Per-axis bound on the error integral.
    pub max_integral: f64,
    /// Thrust used for the decoupling inverse is floored at this fraction of hover.
    pub min_thrust_fraction: f64,
    #[serde(skip)]
    integral: [f64; 2],
    #[serde(skip)]
    last_t: Option<f64>,
}

impl Default for QuadrotorTracker {
    fn default() -> Self {
        let nominal = crate::dynamics::QuadrotorParams::nominal();
        Self {
            goal: [1.5, -0.6],
            mass: nominal.mass,
            inertia: nominal.inertia,
            // (s + 1.5)⁵
            gains: [7.59375, 25.3125, 33.75, 22.5, 7.5],
            max_position_error: 1.0,
            max_integral: 10.0,
            min_thrust_fraction: 0.1,
            integral: [0.0; 2],
            last_t: None,
        }
    }
}

impl QuadrotorTracker {
    fn error(&self, x: &StateVec, i: usize) -> f64 {
        let lim = self.max_position_error;
        (x[i] - self.goal[i]).clamp(-lim, lim)
    }

    /// `(F̈, τ)` from the extended state `(x, y, φ, ẋ, ẏ, φ̇, F, Ḟ)` and the
    /// error integral `z`.
    pub fn law(&self, x: &StateVec, z: [f64; 2]) -> ControlVec {
        let m = self.mass;
        let (s, c) = x[2].sin_cos();
        let w = x[5];
        let f = x[6].max(self.min_thrust_fraction * m * GRAVITY);
        let fd = x[7];
        let k = &self.gains;

        let acc = [-f * s / m, f * c / m - GRAVITY];
        let jerk = [(-fd * s - f * c * w) / m, (fd * c - f * s * w) / m];
        let mut snap = [0.0; 2];
        for i in 0..2 {
            snap[i] = -k[0] * z[i] - k[1] * self.error(x, i) - k[2] * x[3 + i] - k[3] * acc[i] - k[4] * jerk[i];
        }
        // Remove the input-free part of the snap, then invert the decoupling
        // matrix [[-s, -F c], [c, -F s]] acting on (F̈, φ̈).
        let wx = m * snap[0] + 2.0 * fd * c * w - f * s * w * w;
        let wy = m * snap[1] + 2.0 * fd * s * w + f * c * w * w;
        let fdd = -s * wx + c * wy;
        let phidd = -(c * wx + s * wy) / f;
        DVector::from_vec(vec![fdd, self.inertia * phidd])
    }

    /// Advances the integral to time `t` (forward Euler on the error at `x`)
    /// and evaluates the law.
    pub fn control(&mut self, t: f64, x: &StateVec) -> ControlVec {
        if let Some(t0) = self.last_t {
            let h = (t - t0).max(0.0);
            for i in 0..2 {
                self.integral[i] = (self.integral[i] + h * self.error(x, i)).clamp(-self.max_integral, self.max_integral);
            }
        }
        self.last_t = Some(t);
        self.law(x, self.integral)
    }

    pub fn reset(&mut self) {
        self.integral = [0.0; 2];
        self.last_t = None;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Desired {
    SegwayPd(SegwayPd),
    QuadrotorTracker(QuadrotorTracker),
}

impl Desired {
    pub fn control(&mut self, t: f64, x: &StateVec) -> ControlVec {
        match self {
            Desired::SegwayPd(c) => c.control(x),
            Desired::QuadrotorTracker(c) => c.control(t, x),
        }
    }

    /// Clears internal state before a new rollout.
    pub fn reset(&mut self) {
        if let Desired::QuadrotorTracker(c) = self {
            c.reset();
        }
    }
}

impl Controller for Desired {
    fn control(&mut self, t: f64, x: &StateVec) -> (ControlVec, Option<StepMeta>) {
        (Desired::control(self, t, x), None)
    }
}

/// Which projection the filter applies.
#[derive(Clone, Debug)]
pub enum FilterMode<'a> {
    /// CBF-QP on the nominal constants.
    Nominal,
    /// Chance-constrained projection under the GP posterior.
    Probf {
        gp: &'a GPResidualModel,
        delta: f64,
        backoff: BackoffSchedule,
    },
}

/// A desired controller passed through a safety filter. Stateful: in
/// `Probf` mode a reduced confidence level persists for the rest of the
/// episode when the schedule asks for it.
pub struct SafetyFilter<'a> {
    model: &'a ControlAffineModel,
    barrier: &'a BarrierSpec,
    desired: Desired,
    mode: FilterMode<'a>,
    delta_current: f64,
    /// Steps at which the requested level was infeasible.
    pub delta_events: usize,
}

impl<'a> SafetyFilter<'a> {
    pub fn new(model: &'a ControlAffineModel, barrier: &'a BarrierSpec, mut desired: Desired, mode: FilterMode<'a>) -> Self {
        desired.reset();
        let delta_current = match &mode {
            FilterMode::Probf { delta, .. } => delta.max(0.0),
            FilterMode::Nominal => 0.0,
        };
        Self {
            model,
            barrier,
            desired,
            mode,
            delta_current,
            delta_events: 0,
        }
    }

    pub fn current_delta(&self) -> f64 {
        self.delta_current
    }

    fn nominal_step(cc: &ConstraintConstants, u_d: ControlVec) -> (ControlVec, StepMeta) {
        match cbf_qp(cc, &u_d) {
            Ok(u) => {
                let slack = cc.value(&u);
                (
                    u,
                    StepMeta {
                        delta_used: 0.0,
                        feasible: true,
                        slack,
                    },
                )
            }
            Err(_) => {
                let slack = cc.value(&u_d);
                (
                    u_d,
                    StepMeta {
                        delta_used: 0.0,
                        feasible: false,
                        slack,
                    },
                )
            }
        }
    }
}

impl Controller for SafetyFilter<'_> {
    fn control(&mut self, t: f64, x: &StateVec) -> (ControlVec, Option<StepMeta>) {
        let u_d = self.desired.control(t, x);
        let cc = match self.barrier.constants(self.model, x) {
            Ok(cc) => cc,
            Err(_) => {
                let meta = StepMeta {
                    delta_used: self.delta_current,
                    feasible: false,
                    slack: f64::NAN,
                };
                return (u_d, Some(meta));
            }
        };
        match &self.mode {
            FilterMode::Nominal => {
                let (u, meta) = Self::nominal_step(&cc, u_d);
                (u, Some(meta))
            }
            FilterMode::Probf { gp, backoff, .. } => {
                let r = probf_filter(gp, &cc, x, &u_d, self.delta_current, backoff);
                if !r.feasible_at_requested_delta {
                    self.delta_events += 1;
                    if backoff.keep_for_episode {
                        self.delta_current = r.delta_used;
                    }
                }
                let meta = StepMeta {
                    delta_used: r.delta_used,
                    feasible: r.feasible_at_requested_delta,
                    slack: r.slack,
                };
                (r.u, Some(meta))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barrier::{quadrotor_barrier, segway_barrier};
    use crate::dynamics::{make_quadrotor_extended, make_segway, rollout, QuadrotorParams, Which};

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn segway_pd_is_zero_at_goal() {
        let pd = SegwayPd::default();
        let u = pd.control(&dv(&[pd.goal_position, pd.theta_eq, 0.0, 0.0]));
        assert_eq!(u[0], 0.0);
    }

    #[test]
    fn tracker_assigns_requested_snap_on_nominal_model() {
        // Fourth derivative of position along the nominal model, by jets,
        // must equal the snap the tracker asked for.
        let tr = QuadrotorTracker::default();
        let model = make_quadrotor_extended();
        let x = dv(&[1.9, 2.1, 0.2, 0.3, -0.4, 0.5, 16.0, 1.2]);
        let z = [0.3, -0.2];
        let u = tr.law(&x, z);
        let m = tr.mass;
        let (s, c) = x[2].sin_cos();
        let f = x[6];
        let dx = model.eval(Which::Nominal, &x, &u).unwrap();
        let (fd, fdd, w, wd) = (x[7], dx[7], x[5], dx[5]);
        let snap = [
            (-fdd * s - 2.0 * fd * c * w + f * s * w * w - f * c * wd) / m,
            (fdd * c - 2.0 * fd * s * w - f * c * w * w - f * s * wd) / m,
        ];
        let acc = [-f * s / m, f * c / m - GRAVITY];
        let jerk = [(-fd * s - f * c * w) / m, (fd * c - f * s * w) / m];
        for i in 0..2 {
            let e = (x[i] - tr.goal[i]).clamp(-1.0, 1.0);
            let want = -7.59375 * z[i] - 25.3125 * e - 33.75 * x[3 + i] - 22.5 * acc[i] - 7.5 * jerk[i];
            assert!((snap[i] - want).abs() < 1e-9, "{i}: {} vs {want}", snap[i]);
        }
    }

    #[test]
    fn tracker_settles_on_nominal_plant() {
        let nominal = QuadrotorParams::nominal();
        let model = crate::dynamics::ControlAffineModel::matched(
            "q",
            crate::dynamics::Plant::QuadrotorExtended(nominal.clone()),
        );
        let tr = QuadrotorTracker {
            goal: [1.0, 1.5],
            ..QuadrotorTracker::default()
        };
        let mut c = Desired::QuadrotorTracker(tr);
        let x0 = dv(&[1.2, 1.3, 0.0, 0.0, 0.0, 0.0, nominal.mass * GRAVITY, 0.0]);
        let traj = rollout(&model, &mut c, &x0, 10.0, 0.01, None).unwrap();
        let xf = traj.final_state();
        assert!((xf[0] - 1.0).abs() < 1e-3 && (xf[1] - 1.5).abs() < 1e-3, "{xf}");
    }

    #[test]
    fn tracker_integral_absorbs_mass_error() {
        let model = make_quadrotor_extended();
        let tr = QuadrotorTracker {
            goal: [1.0, 1.5],
            ..QuadrotorTracker::default()
        };
        let mut c = Desired::QuadrotorTracker(tr);
        let x0 = dv(&[1.2, 1.3, 0.0, 0.0, 0.0, 0.0, 1.5 * GRAVITY, 0.0]);
        let traj = rollout(&model, &mut c, &x0, 25.0, 0.01, None).unwrap();
        let xf = traj.final_state();
        assert!((xf[0] - 1.0).abs() < 1e-2 && (xf[1] - 1.5).abs() < 1e-2, "{xf}");
    }

    #[test]
    fn nominal_filter_keeps_matched_segway_safe() {
        let model = crate::dynamics::ControlAffineModel::matched(
            "s",
            crate::dynamics::Plant::Segway(crate::dynamics::SegwayParams::reference()),
        );
        let b = segway_barrier();
        let x0 = dv(&[0.0, 0.1383, 0.0, 0.0]);
        let mut raw = Desired::SegwayPd(SegwayPd::default());
        let unfiltered = rollout(&model, &mut raw, &x0, 10.0, 0.01, Some(&b)).unwrap();
        assert!(unfiltered.min_h().unwrap() < 0.0);
        let mut f = SafetyFilter::new(&model, &b, Desired::SegwayPd(SegwayPd::default()), FilterMode::Nominal);
        let filtered = rollout(&model, &mut f, &x0, 10.0, 0.01, Some(&b)).unwrap();
        assert!(filtered.min_h().unwrap() > -1e-3);
        assert!(filtered.filter_meta.iter().all(|m| m.unwrap().feasible));
    }

    #[test]
    fn probf_filter_records_backoff() {
        let model = make_segway();
        let b = segway_barrier();
        let hp = crate::gp::KernelHyperparams::isotropic(4, 1, 50.0, 1.0, 0.01);
        let gp = GPResidualModel::train(&crate::gp::ResidualDataset::new(), &hp).unwrap();
        let mode = FilterMode::Probf {
            gp: &gp,
            delta: 2.0,
            backoff: BackoffSchedule::default(),
        };
        let mut f = SafetyFilter::new(&model, &b, Desired::SegwayPd(SegwayPd::default()), mode);
        let x0 = dv(&[0.0, 0.25, 0.0, 0.2]);
        let tr = rollout(&model, &mut f, &x0, 0.5, 0.01, Some(&b)).unwrap();
        assert!(f.delta_events > 0);
        assert!(f.current_delta() < 2.0);
        let last = tr.filter_meta.last().unwrap().unwrap();
        assert!(last.delta_used <= f.current_delta());
    }

    #[test]
    fn quadrotor_filter_runs_with_chain_constants() {
        let model = make_quadrotor_extended();
        let b = quadrotor_barrier();
        let mut f = SafetyFilter::new(
            &model,
            &b,
            Desired::QuadrotorTracker(QuadrotorTracker::default()),
            FilterMode::Nominal,
        );
        let x0 = dv(&[2.0, 2.0, 0.0, 0.0, 0.0, 0.0, 1.5 * GRAVITY, 0.0]);
        let tr = rollout(&model, &mut f, &x0, 1.0, 0.01, Some(&b)).unwrap();
        assert_eq!(tr.len(), 101);
    }
}
