//! Interior-point solver for the lifted projection program.
//!
//! Phase I finds a strictly feasible point by minimizing the largest
//! constraint value, phase II follows the log-barrier central path to the
//! projection,
//! and a final Newton solve on the reduced KKT system sharpens the answer
//! to machine precision.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::program::{ConvexSafetyProgram, Reduced};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    /// `[u; t; s]`. For infeasible programs, the phase I point.
    pub x: DVector<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    /// Surrogate duality gap at termination.
    pub gap: f64,
}

impl Solution {
    pub fn control(&self) -> DVector<f64> {
        let m = self.x.len() - 2;
        self.x.rows(0, m).into_owned()
    }
}

const MAX_OUTER: usize = 60;
const MAX_CENTERING: usize = 60;
const MU: f64 = 20.0;

/// Value, gradient and (for nonlinear functions) Hessian.
struct Smooth {
    v: f64,
    g: DVector<f64>,
    h: Option<DMatrix<f64>>,
}

trait Problem {
    fn dim(&self) -> usize;
    fn objective(&self, x: &DVector<f64>) -> Smooth;
    /// Inequalities `f_i(x) ≤ 0`.
    fn constraints(&self, x: &DVector<f64>) -> Vec<Smooth>;
    /// Single equality row `aᵀx = b`.
    fn equality(&self) -> (&DVector<f64>, f64);
}

fn linear(row: DVector<f64>, offset: f64, x: &DVector<f64>) -> Smooth {
    Smooth {
        v: row.dot(x) + offset,
        g: row,
        h: None,
    }
}

/// `‖Σ̄x‖ - cᵀx`. Gradient and Hessian assume `Σ̄x ≠ 0`.
fn cone(p: &ConvexSafetyProgram, x: &DVector<f64>) -> Smooth {
    let y = &p.sigma_bar * x;
    let norm = y.norm().max(f64::MIN_POSITIVE);
    let w = p.sigma_bar.transpose() * &y;
    let gram = p.sigma_bar.transpose() * &p.sigma_bar;
    Smooth {
        v: norm - p.cone_dir.dot(x),
        g: &w / norm - &p.cone_dir,
        h: Some((gram - &w * w.transpose() / (norm * norm)) / norm),
    }
}

fn lifted_constraints(p: &ConvexSafetyProgram, x: &DVector<f64>) -> Vec<Smooth> {
    vec![
        linear(p.ineq_c.row(0).transpose(), p.ineq_d[0], x),
        linear(p.ineq_c.row(1).transpose(), p.ineq_d[1], x),
        cone(p, x),
    ]
}

fn program_scale(p: &ConvexSafetyProgram) -> f64 {
    1.0 + p.q.amax() + p.ineq_c.amax() + p.ineq_d.amax() + p.sigma_bar.amax()
}

struct PhaseTwo<'a>(&'a ConvexSafetyProgram);

impl Problem for PhaseTwo<'_> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn objective(&self, x: &DVector<f64>) -> Smooth {
        let qx = &self.0.q * x;
        Smooth {
            v: x.dot(&qx),
            g: 2.0 * qx,
            h: Some(2.0 * &self.0.q),
        }
    }

    fn constraints(&self, x: &DVector<f64>) -> Vec<Smooth> {
        lifted_constraints(self.0, x)
    }

    fn equality(&self) -> (&DVector<f64>, f64) {
        (&self.0.eq_d, -self.0.eq_f)
    }

}

/// `min τ` over `(ū, τ)` s.t. `f_i(ū) ≤ τ`, `τ ≥ -1`.
struct PhaseOne<'a> {
    p: &'a ConvexSafetyProgram,
    eq: DVector<f64>,
}

impl Problem for PhaseOne<'_> {
    fn dim(&self) -> usize {
        self.p.dim() + 1
    }

    fn objective(&self, x: &DVector<f64>) -> Smooth {
        let n = self.dim();
        Smooth {
            v: x[n - 1],
            g: DVector::from_fn(n, |i, _| if i == n - 1 { 1.0 } else { 0.0 }),
            h: None,
        }
    }

    fn constraints(&self, x: &DVector<f64>) -> Vec<Smooth> {
        let n = self.dim();
        let xb = x.rows(0, n - 1).into_owned();
        let tau = x[n - 1];
        let mut out: Vec<Smooth> = lifted_constraints(self.p, &xb)
            .into_iter()
            .map(|c| {
                let mut g = c.g.clone().resize_vertically(n, 0.0);
                g[n - 1] = -1.0;
                Smooth {
                    v: c.v - tau,
                    g,
                    h: c.h.map(|h| h.resize(n, n, 0.0)),
                }
            })
            .collect();
        let mut g = DVector::zeros(n);
        g[n - 1] = -1.0;
        out.push(Smooth {
            v: -tau - 1.0,
            g,
            h: None,
        });
        out
    }

    fn equality(&self) -> (&DVector<f64>, f64) {
        (&self.eq, -self.p.eq_f)
    }

}

struct IpmOutcome {
    x: DVector<f64>,
    iterations: usize,
    gap: f64,
}

/// `t·f_0(x) - Σ log(-f_i(x))`, or `None` outside the strict interior.
fn barrier_value(prob: &dyn Problem, x: &DVector<f64>, t: f64) -> Option<f64> {
    let mut v = t * prob.objective(x).v;
    for c in prob.constraints(x) {
        if !(c.v < 0.0) {
            return None;
        }
        v -= (-c.v).ln();
    }
    v.is_finite().then_some(v)
}

/// Log-barrier path following from a strictly feasible `x` that satisfies
/// the equality. Each centering step is an equality-constrained Newton
/// solve; `k/t` bounds the suboptimality because `λ_i = -1/(t f_i)` is dual
/// feasible at a centred point. `done` allows an early exit.
fn barrier_method(
    prob: &dyn Problem,
    mut x: DVector<f64>,
    gap_tol: f64,
    done: &dyn Fn(&DVector<f64>) -> bool,
) -> Result<IpmOutcome> {
    let n = prob.dim();
    let (a, _) = prob.equality();
    let k = prob.constraints(&x).len() as f64;
    let mut t = 1.0;
    let mut iterations = 0;
    for _ in 0..MAX_OUTER {
        for _ in 0..MAX_CENTERING {
            if done(&x) {
                return Ok(IpmOutcome {
                    x,
                    iterations,
                    gap: k / t,
                });
            }
            let obj = prob.objective(&x);
            let cons = prob.constraints(&x);
            let mut grad = t * &obj.g;
            let mut h = obj.h.map_or_else(|| DMatrix::zeros(n, n), |h| t * h);
            for c in &cons {
                grad -= &c.g / c.v;
                h += &c.g * c.g.transpose() / (c.v * c.v);
                if let Some(hc) = &c.h {
                    h -= hc / c.v;
                }
            }
            // Proximal term: a linear objective can leave H singular.
            let reg = 1e-12 * (1.0 + h.diagonal().amax());
            for i in 0..n {
                h[(i, i)] += reg;
            }
            let mut kkt = DMatrix::zeros(n + 1, n + 1);
            kkt.view_mut((0, 0), (n, n)).copy_from(&h);
            kkt.view_mut((0, n), (n, 1)).copy_from(a);
            kkt.view_mut((n, 0), (1, n)).copy_from(&a.transpose());
            let mut rhs = DVector::zeros(n + 1);
            rhs.rows_mut(0, n).copy_from(&(-&grad));
            let Some(step) = kkt.lu().solve(&rhs) else {
                break;
            };
            let dx = step.rows(0, n).into_owned();
            let decrement = -grad.dot(&dx);
            iterations += 1;
            if decrement <= 1e-12 {
                break;
            }
            let f0 = barrier_value(prob, &x, t).unwrap_or(f64::INFINITY);
            let mut s = 1.0;
            let mut moved = false;
            while s > 1e-16 {
                let xn = &x + s * &dx;
                if let Some(fv) = barrier_value(prob, &xn, t) {
                    if fv <= f0 - 0.25 * s * decrement {
                        x = xn;
                        moved = true;
                        break;
                    }
                }
                s *= 0.5;
            }
            if !moved {
                break;
            }
        }
        if k / t <= gap_tol {
            return Ok(IpmOutcome {
                x,
                iterations,
                gap: k / t,
            });
        }
        t *= MU;
    }
    Err(Error::SolverStall {
        iterations,
        gap: k / t,
        iterate: x.as_slice().to_vec(),
    })
}

/// Closed-form halfspace projection of `u_d` onto `gᵀu + b ≥ 0`.
pub(crate) fn project_halfspace(g: &DVector<f64>, b: f64, u_d: &DVector<f64>) -> Option<DVector<f64>> {
    let v = g.dot(u_d) + b;
    if v >= 0.0 {
        return Some(u_d.clone());
    }
    let gg = g.norm_squared();
    if gg == 0.0 {
        return None;
    }
    Some(u_d - g * (v / gg))
}

/// Newton iterations on `2(u - u_d) = μ∇φ(u)`, `φ(u) = 0`, started from
/// the interior-point answer.
fn polish(r: &Reduced, u0: &DVector<f64>) -> Option<DVector<f64>> {
    let m = u0.len();
    let grad = |u: &DVector<f64>| -> (f64, DVector<f64>, DMatrix<f64>) {
        let (sigma, w) = r.sigma(u);
        let sigma = sigma.max(f64::MIN_POSITIVE);
        let wu = w.rows(0, m).into_owned();
        let d2 = (r.p.view((0, 0), (m, m)) - &wu * wu.transpose() / (sigma * sigma)) / sigma;
        let phi = r.g.dot(u) + r.b - r.delta * sigma;
        (phi, &r.g - r.delta * &wu / sigma, -r.delta * d2)
    };
    let mut u = u0.clone();
    let (_, g0, _) = grad(&u);
    let gn = g0.norm_squared();
    if gn == 0.0 {
        return None;
    }
    let mut mu = 2.0 * (&u - &r.u_d).dot(&g0) / gn;
    let scale = 1.0 + r.u_d.amax() + u0.amax();
    for _ in 0..30 {
        let (phi, g, h) = grad(&u);
        let f1 = 2.0 * (&u - &r.u_d) - mu * &g;
        if f1.amax() <= 1e-14 * scale && phi.abs() <= 1e-14 * (1.0 + r.b.abs() + r.g.amax() * scale) {
            break;
        }
        let mut j = DMatrix::zeros(m + 1, m + 1);
        j.view_mut((0, 0), (m, m))
            .copy_from(&(DMatrix::identity(m, m) * 2.0 - mu * &h));
        j.view_mut((0, m), (m, 1)).copy_from(&(-&g));
        j.view_mut((m, 0), (1, m)).copy_from(&g.transpose());
        let mut rhs = DVector::zeros(m + 1);
        rhs.rows_mut(0, m).copy_from(&(-f1));
        rhs[m] = -phi;
        let step = j.lu().solve(&rhs)?;
        u += step.rows(0, m);
        mu += step[m];
    }
    let ok = mu >= 0.0
        && r.phi(&u) >= -1e-12 * scale
        && (&u - u0).amax() <= 1e-4 * scale
        && u.iter().all(|v| v.is_finite());
    ok.then_some(u)
}

/// Solves the program. Desired controls that already satisfy the
/// constraint are returned unchanged.
pub fn solve(program: &ConvexSafetyProgram) -> Result<Solution> {
    let m = program.control_dim();
    let red = program.reduced();
    let u_d = red.u_d.clone();

    if red.phi(&u_d) >= 0.0 {
        return Ok(Solution {
            x: program.lift(&u_d),
            status: SolveStatus::Optimal,
            iterations: 0,
            gap: 0.0,
        });
    }

    // Without the std term the cone rows only bound s from below; the
    // remaining problem is a halfspace projection.
    if red.delta == 0.0 {
        return Ok(match project_halfspace(&red.g, red.b, &u_d) {
            Some(u) => Solution {
                x: program.lift(&u),
                status: SolveStatus::Optimal,
                iterations: 0,
                gap: 0.0,
            },
            None => Solution {
                x: program.lift(&u_d),
                status: SolveStatus::Infeasible,
                iterations: 0,
                gap: 0.0,
            },
        });
    }

    let n = m + 2;
    let scale = program_scale(program);
    let phase_one = PhaseOne {
        p: program,
        eq: program.eq_d.clone().resize_vertically(n + 1, 0.0),
    };
    let mut x0 = program.lift(&u_d);
    x0[n - 1] += 1.0;
    let worst = lifted_constraints(program, &x0)
        .iter()
        .map(|c| c.v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z0 = x0.resize_vertically(n + 1, 0.0);
    z0[n] = worst.max(-0.5) + 1.0;
    let p1 = barrier_method(&phase_one, z0, 1e-9 * scale, &|z: &DVector<f64>| z[n] < -1e-10 * scale)?;
    let tau = p1.x[n];
    let start = p1.x.rows(0, n).into_owned();
    let strictly_feasible = lifted_constraints(program, &start).iter().all(|c| c.v < 0.0);
    if !(tau < -1e-10 * scale) || !strictly_feasible {
        return Ok(Solution {
            x: start,
            status: SolveStatus::Infeasible,
            iterations: p1.iterations,
            gap: p1.gap,
        });
    }

    let obj_scale = 1.0 + u_d.norm_squared();
    let p2 = barrier_method(&PhaseTwo(program), start, 1e-10 * obj_scale, &|_: &DVector<f64>| false)?;
    let u_ipm = p2.x.rows(0, m).into_owned();
    let x = match polish(&red, &u_ipm) {
        Some(u) if (&u - &u_d).norm_squared() <= (&u_ipm - &u_d).norm_squared() + 1e-9 * obj_scale => {
            program.lift(&u)
        }
        _ => p2.x,
    };
    Ok(Solution {
        x,
        status: SolveStatus::Optimal,
        iterations: p1.iterations + p2.iterations,
        gap: p2.gap,
    })
}
