//! Truncated Taylor series ("jets") for exact higher-order time derivatives.
//!
//! Dynamics and barrier functions are written once against [`Scalar`] and
//! evaluated either on plain `f64` or on jets. A `Jet<T, N>` holds the
//! normalized coefficients `a_k = x^(k)(0) / k!` for `k < N`. Jets nest, so
//! `Jet<Jet<f64, 2>, 5>` carries a directional derivative through a
//! fourth-order time expansion.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Arithmetic needed by the vector fields and barriers.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn scale(self, k: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    /// Leading real part.
    fn re(&self) -> f64;

    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }

    fn powi2(self) -> Self {
        self * self
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn scale(self, k: f64) -> Self {
        self * k
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn re(&self) -> f64 {
        *self
    }
    #[inline]
    fn sin_cos(self) -> (Self, Self) {
        f64::sin_cos(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet<T: Scalar, const N: usize> {
    pub c: [T; N],
}

impl<T: Scalar, const N: usize> Jet<T, N> {
    pub fn constant(v: T) -> Self {
        let mut c = [T::cst(0.0); N];
        c[0] = v;
        Self { c }
    }

    /// `v + t`, the seed for differentiating along one direction.
    pub fn variable(v: T) -> Self {
        let mut j = Self::constant(v);
        if N > 1 {
            j.c[1] = T::cst(1.0);
        }
        j
    }

    pub fn from_coeffs(c: [T; N]) -> Self {
        Self { c }
    }

    /// k-th derivative at the expansion point, `k! * c[k]`.
    pub fn derivative(&self, k: usize) -> T {
        let mut fact = 1.0;
        for i in 2..=k {
            fact *= i as f64;
        }
        self.c[k].scale(fact)
    }
}

impl<T: Scalar, const N: usize> Add for Jet<T, N> {
    type Output = Self;
    #[inline]
    fn add(mut self, rhs: Self) -> Self {
        for k in 0..N {
            self.c[k] = self.c[k] + rhs.c[k];
        }
        self
    }
}

impl<T: Scalar, const N: usize> Sub for Jet<T, N> {
    type Output = Self;
    #[inline]
    fn sub(mut self, rhs: Self) -> Self {
        for k in 0..N {
            self.c[k] = self.c[k] - rhs.c[k];
        }
        self
    }
}

impl<T: Scalar, const N: usize> Neg for Jet<T, N> {
    type Output = Self;
    #[inline]
    fn neg(mut self) -> Self {
        for k in 0..N {
            self.c[k] = -self.c[k];
        }
        self
    }
}

impl<T: Scalar, const N: usize> Mul for Jet<T, N> {
    type Output = Self;
    #[inline]
    fn mul(self, rhs: Self) -> Self {
        let mut out = [T::cst(0.0); N];
        for (k, o) in out.iter_mut().enumerate() {
            let mut acc = self.c[0] * rhs.c[k];
            for j in 1..=k {
                acc = acc + self.c[j] * rhs.c[k - j];
            }
            *o = acc;
        }
        Self { c: out }
    }
}

impl<T: Scalar, const N: usize> Div for Jet<T, N> {
    type Output = Self;
    #[inline]
    fn div(self, rhs: Self) -> Self {
        let mut q = [T::cst(0.0); N];
        for k in 0..N {
            let mut acc = self.c[k];
            for j in 0..k {
                acc = acc - q[j] * rhs.c[k - j];
            }
            q[k] = acc / rhs.c[0];
        }
        Self { c: q }
    }
}

impl<T: Scalar, const N: usize> Scalar for Jet<T, N> {
    fn cst(v: f64) -> Self {
        Self::constant(T::cst(v))
    }

    fn scale(mut self, k: f64) -> Self {
        for c in self.c.iter_mut() {
            *c = c.scale(k);
        }
        self
    }

    fn sin(self) -> Self {
        self.sin_cos().0
    }

    fn cos(self) -> Self {
        self.sin_cos().1
    }

    fn re(&self) -> f64 {
        self.c[0].re()
    }

    fn sin_cos(self) -> (Self, Self) {
        // s' = c a', c' = -s a'
        let mut s = [T::cst(0.0); N];
        let mut c = [T::cst(0.0); N];
        let (s0, c0) = self.c[0].sin_cos();
        s[0] = s0;
        c[0] = c0;
        for k in 1..N {
            let mut ds = T::cst(0.0);
            let mut dc = T::cst(0.0);
            for j in 1..=k {
                let ja = self.c[j].scale(j as f64);
                ds = ds + ja * c[k - j];
                dc = dc + ja * s[k - j];
            }
            s[k] = ds.scale(1.0 / k as f64);
            c[k] = -dc.scale(1.0 / k as f64);
        }
        (Self { c: s }, Self { c })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type J5 = Jet<f64, 5>;

    #[test]
    fn sin_series_matches_derivatives() {
        let x0 = 0.3;
        let s = J5::variable(x0).sin();
        let expect = [x0.sin(), x0.cos(), -x0.sin(), -x0.cos(), x0.sin()];
        for k in 0..5 {
            assert!((s.derivative(k) - expect[k]).abs() < 1e-14, "k={k}");
        }
    }

    #[test]
    fn division_inverts_multiplication() {
        let a = J5::from_coeffs([1.5, -0.2, 0.7, 0.1, -0.4]);
        let b = J5::from_coeffs([2.0, 0.3, -0.1, 0.05, 0.2]);
        let q = (a * b) / b;
        for k in 0..5 {
            assert!((q.c[k] - a.c[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn nested_jets_give_mixed_derivative() {
        // f(x, t) = sin(x * (1 + t)); d/dx d/dt at (x0, 0) = cos(x0) - x0 sin(x0)
        let x0 = 0.7;
        let x: Jet<Jet<f64, 2>, 3> = Jet::constant(Jet::variable(x0));
        let t: Jet<Jet<f64, 2>, 3> = Jet::variable(Jet::constant(0.0));
        let f = (x * (Jet::cst(1.0) + t)).sin();
        let mixed = f.c[1].c[1];
        assert!((mixed - (x0.cos() - x0 * x0.sin())).abs() < 1e-14);
    }
}
