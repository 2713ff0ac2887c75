use serde::{Deserialize, Serialize};

use crate::jet::Scalar;

pub const GRAVITY: f64 = 9.81;

/// Wheeled inverted pendulum: a wheel base of mass `cart_mass` carrying a
/// body of mass `pendulum_mass` whose center of mass sits `pendulum_length`
/// above the axle, tilted `com_offset` rad from the body axis.
///
/// State `(p, θ, ṗ, θ̇)`; one motor command `u`. The motor applies torque
/// `motor_gain * u` between wheel and body, i.e. a force
/// `motor_gain * u / wheel_radius` on the base and the reaction `-motor_gain * u`
/// on the body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegwayParams {
    pub cart_mass: f64,
    pub pendulum_mass: f64,
    pub pendulum_length: f64,
    pub motor_gain: f64,
    pub viscous_friction: f64,
    pub wheel_radius: f64,
    pub com_offset: f64,
}

impl SegwayParams {
    pub fn reference() -> Self {
        Self {
            cart_mass: 60.0,
            pendulum_mass: 20.0,
            pendulum_length: 1.0,
            motor_gain: 12.0,
            viscous_friction: 1.0,
            wheel_radius: 0.2,
            com_offset: 0.1383,
        }
    }

    /// Inverse mass matrix entries and the generalized forces for `u = 0`.
    fn terms<T: Scalar>(&self, x: &[T]) -> ([T; 3], [T; 2], [T; 2]) {
        let (mc, mp, l) = (self.cart_mass, self.pendulum_mass, self.pendulum_length);
        let tilt = x[1] - T::cst(self.com_offset);
        let (s, c) = tilt.sin_cos();
        let m11 = T::cst(mc + mp);
        let m12 = c.scale(mp * l);
        let m22 = T::cst(mp * l * l);
        let det = m11 * m22 - m12 * m12;
        let inv = [m22 / det, -m12 / det, m11 / det];
        let thd = x[3];
        let r1 = s * thd * thd * T::cst(mp * l) - x[2].scale(self.viscous_friction);
        let r2 = s.scale(mp * GRAVITY * l);
        let ru = [
            T::cst(self.motor_gain / self.wheel_radius),
            T::cst(-self.motor_gain),
        ];
        (inv, [r1, r2], ru)
    }

    pub fn drift<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let (inv, r, _) = self.terms(x);
        vec![
            x[2],
            x[3],
            inv[0] * r[0] + inv[1] * r[1],
            inv[1] * r[0] + inv[2] * r[1],
        ]
    }

    pub fn actuation<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let (inv, _, ru) = self.terms(x);
        vec![
            T::cst(0.0),
            T::cst(0.0),
            inv[0] * ru[0] + inv[1] * ru[1],
            inv[1] * ru[0] + inv[2] * ru[1],
        ]
    }
}
