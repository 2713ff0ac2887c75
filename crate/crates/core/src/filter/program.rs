use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::barrier::ConstraintConstants;
use crate::dynamics::ControlVec;
use crate::error::{Error, Result};
use crate::gp::PosteriorBlocks;

/// Lifted convex form of the chance-constrained projection over
/// `ū = [u; t; s]`:
///
/// ```text
/// min  ūᵀQū
/// s.t. Cū + d ≤ 0           (mean margin minus δ·s, and s ≥ 0)
///      ‖Σ̄ū‖ ≤ cᵀū           (s bounds the posterior std)
///      Dᵀū + f = 0          (t = 1)
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexSafetyProgram {
    pub q: DMatrix<f64>,
    pub sigma_bar: DMatrix<f64>,
    pub cone_dir: DVector<f64>,
    pub ineq_c: DMatrix<f64>,
    pub ineq_d: DVector<f64>,
    pub eq_d: DVector<f64>,
    pub eq_f: f64,
    /// Diagonal jitter added to the augmented covariance before factoring.
    pub jitter: f64,
}

/// The program with `s` eliminated: maximize feasibility margin
/// `φ(u) = gᵀu + b - δ·sqrt([u;1]ᵀP[u;1])`.
#[derive(Clone, Debug)]
pub(crate) struct Reduced {
    pub g: DVector<f64>,
    pub b: f64,
    pub delta: f64,
    pub p: DMatrix<f64>,
    pub u_d: DVector<f64>,
}

impl Reduced {
    /// `(σ(u), w)` with `w = P[u;1]`.
    pub fn sigma(&self, u: &DVector<f64>) -> (f64, DVector<f64>) {
        let m = u.len();
        let mut z = DVector::zeros(m + 1);
        z.rows_mut(0, m).copy_from(u);
        z[m] = 1.0;
        let w = &self.p * &z;
        (z.dot(&w).max(0.0).sqrt(), w)
    }

    pub fn phi(&self, u: &DVector<f64>) -> f64 {
        self.g.dot(u) + self.b - self.delta * self.sigma(u).0
    }
}

impl ConvexSafetyProgram {
    pub fn control_dim(&self) -> usize {
        self.q.nrows() - 2
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    /// Confidence multiplier on the std variable.
    pub fn delta(&self) -> f64 {
        self.ineq_c[(0, self.dim() - 1)]
    }

    pub fn desired(&self) -> DVector<f64> {
        let m = self.control_dim();
        -self.q.view((0, m), (m, 1)).column(0).into_owned()
    }

    /// `‖Σ̄ū‖ - cᵀū`.
    pub fn cone_residual(&self, x: &DVector<f64>) -> f64 {
        (&self.sigma_bar * x).norm() - self.cone_dir.dot(x)
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.q * x))
    }

    pub(crate) fn reduced(&self) -> Reduced {
        let m = self.control_dim();
        let row = self.ineq_c.row(0);
        let l = self.sigma_bar.view((0, 0), (m + 1, m + 1));
        Reduced {
            g: -row.columns(0, m).transpose(),
            b: -(row[m] + self.ineq_d[0]),
            delta: row[m + 1],
            p: l.transpose() * l,
            u_d: self.desired(),
        }
    }

    /// Lifted point for a control, with `s` at the posterior std.
    pub fn lift(&self, u: &ControlVec) -> DVector<f64> {
        let m = self.control_dim();
        let mut x = DVector::zeros(m + 2);
        x.rows_mut(0, m).copy_from(u);
        x[m] = 1.0;
        x[m + 1] = self.reduced().sigma(u).0;
        x
    }
}

fn try_cholesky(p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let l = p.clone().cholesky()?.unpack();
    let ok = l.diagonal().iter().all(|d| *d > 0.0) && l.iter().all(|v| v.is_finite());
    ok.then(|| l.transpose())
}

/// Upper-triangular `R` with `RᵀR = P + jitter·I`. The first attempt uses no
/// jitter; later ones grow from `1e-8` to `1e-2` of the mean diagonal.
fn upper_factor(p: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    if let Some(r) = try_cholesky(p) {
        return Ok((r, 0.0));
    }
    let n = p.nrows();
    let scale = (p.trace() / n as f64).abs().max(1e-200);
    let mut jitter = 1e-8 * scale;
    while jitter <= 1e-2 * scale * (1.0 + 1e-12) {
        let pj = p + DMatrix::identity(n, n) * jitter;
        if let Some(r) = try_cholesky(&pj) {
            return Ok((r, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::Conditioning { jitter: jitter / 10.0 })
}

/// Builds the program for the constraint
/// `(ā + c_a)ᵀu + b̄ + c_b - δ·σ_d(u) ≥ 0` around desired control `u_d`.
pub fn build_program(
    blocks: &PosteriorBlocks,
    cc: &ConstraintConstants,
    u_d: &ControlVec,
    delta: f64,
) -> Result<ConvexSafetyProgram> {
    let m = blocks.control_dim();
    for (what, got) in [("constraint c_a", cc.c_a.len()), ("desired control", u_d.len())] {
        if got != m {
            return Err(Error::Dimension {
                what,
                expected: m,
                got,
            });
        }
    }
    if !(delta >= 0.0) || !delta.is_finite() {
        return Err(Error::Contract(format!("delta must be finite and >= 0, got {delta}")));
    }
    let n = m + 2;
    let (t, s) = (m, m + 1);

    let mut q = DMatrix::zeros(n, n);
    for i in 0..m {
        q[(i, i)] = 1.0;
        q[(i, t)] = -u_d[i];
        q[(t, i)] = -u_d[i];
    }
    q[(t, t)] = u_d.dot(u_d);

    let (lt, jitter) = upper_factor(&blocks.augmented())?;
    let mut sigma_bar = DMatrix::zeros(n, n);
    sigma_bar.view_mut((0, 0), (m + 1, m + 1)).copy_from(&lt);

    let mut cone_dir = DVector::zeros(n);
    cone_dir[s] = 1.0;

    let g = &blocks.a_mean + &cc.c_a;
    let b = blocks.b_mean + cc.c_b;
    let mut ineq_c = DMatrix::zeros(2, n);
    for i in 0..m {
        ineq_c[(0, i)] = -g[i];
    }
    ineq_c[(0, t)] = -b;
    ineq_c[(0, s)] = delta;
    ineq_c[(1, s)] = -1.0;

    let mut eq_d = DVector::zeros(n);
    eq_d[t] = 1.0;

    Ok(ConvexSafetyProgram {
        q,
        sigma_bar,
        cone_dir,
        ineq_c,
        ineq_d: DVector::zeros(2),
        eq_d,
        eq_f: -1.0,
        jitter,
    })
}
