use serde::{Deserialize, Serialize};

use crate::jet::Scalar;

use super::segway::GRAVITY;

/// Planar quadrotor with gravity along `-y`.
///
/// Rigid-body state `(x, y, φ, ẋ, ẏ, φ̇)` with controls `(thrust, torque)`:
///
/// ```text
/// ẍ = -(u₁/m) sin φ,  ÿ = (u₁/m) cos φ - g,  φ̈ = u₂/J
/// ```
///
/// The extended variant carries the thrust and its rate as states,
/// `(x, y, φ, ẋ, ẏ, φ̇, F, Ḟ)`, and is driven by `(F̈, torque)`. Both inputs
/// then enter the fourth derivative of any position function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrotorParams {
    pub mass: f64,
    pub inertia: f64,
}

impl QuadrotorParams {
    pub fn truth() -> Self {
        Self {
            mass: 1.8,
            inertia: 1.1,
        }
    }

    pub fn nominal() -> Self {
        Self {
            mass: 1.5,
            inertia: 1.3,
        }
    }

    pub fn drift<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let z = T::cst(0.0);
        vec![x[3], x[4], x[5], z, T::cst(-GRAVITY), z]
    }

    pub fn actuation<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let z = T::cst(0.0);
        let (s, c) = x[2].sin_cos();
        let im = 1.0 / self.mass;
        // row-major 6x2
        vec![
            z,
            z,
            z,
            z,
            z,
            z,
            -s.scale(im),
            z,
            c.scale(im),
            z,
            z,
            T::cst(1.0 / self.inertia),
        ]
    }

    pub fn extended_drift<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let z = T::cst(0.0);
        let (s, c) = x[2].sin_cos();
        let im = 1.0 / self.mass;
        let thrust = x[6];
        vec![
            x[3],
            x[4],
            x[5],
            -(thrust * s).scale(im),
            (thrust * c).scale(im) - T::cst(GRAVITY),
            z,
            x[7],
            z,
        ]
    }

    pub fn extended_actuation<T: Scalar>(&self, _x: &[T]) -> Vec<T> {
        let z = T::cst(0.0);
        let one = T::cst(1.0);
        // row-major 8x2
        vec![
            z,
            z,
            z,
            z,
            z,
            z,
            z,
            z,
            z,
            z,
            z,
            T::cst(1.0 / self.inertia),
            z,
            z,
            one,
            z,
        ]
    }
}
