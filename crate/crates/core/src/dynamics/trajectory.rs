use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ControlVec, StateVec};
use crate::error::{Error, Result};

/// Per-step safety filter bookkeeping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMeta {
    pub delta_used: f64,
    pub feasible: bool,
    pub slack: f64,
}

/// A fixed-step closed-loop trajectory. `controls[i]` is held on
/// `[times[i], times[i + 1])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<StateVec>,
    pub controls: Vec<ControlVec>,
    /// Barrier value at each state; empty when no barrier was attached.
    pub h_values: Vec<f64>,
    pub filter_meta: Vec<Option<StepMeta>>,
}

impl Trajectory {
    pub(crate) fn start(dt: f64, x0: StateVec, h0: Option<f64>) -> Self {
        Self {
            dt,
            times: vec![0.0],
            states: vec![x0],
            controls: Vec::new(),
            h_values: h0.into_iter().collect(),
            filter_meta: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, u: ControlVec, meta: Option<StepMeta>, x: StateVec, h: Option<f64>) {
        self.controls.push(u);
        self.filter_meta.push(meta);
        self.times.push(self.states.len() as f64 * self.dt);
        self.states.push(x);
        if let Some(h) = h {
            self.h_values.push(h);
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn min_h(&self) -> Option<f64> {
        self.h_values.iter().copied().reduce(f64::min)
    }

    pub fn final_state(&self) -> &StateVec {
        self.states.last().expect("trajectory holds at least x0")
    }

    /// CSV with header `t,x0..,u0..,h,delta_used,feasible,slack`. The last
    /// row has no control, so its control and filter columns are empty.
    pub fn to_csv(&self) -> String {
        let s = self.states.first().map_or(0, |x| x.len());
        let m = self.controls.first().map_or(0, |u| u.len());
        let mut out = String::from("t");
        for i in 0..s {
            let _ = write!(out, ",x{i}");
        }
        for j in 0..m {
            let _ = write!(out, ",u{j}");
        }
        out.push_str(",h,delta_used,feasible,slack\n");
        for (i, x) in self.states.iter().enumerate() {
            let _ = write!(out, "{}", self.times[i]);
            for v in x.iter() {
                let _ = write!(out, ",{v}");
            }
            match self.controls.get(i) {
                Some(u) => {
                    for v in u.iter() {
                        let _ = write!(out, ",{v}");
                    }
                }
                None => out.push_str(&",".repeat(m)),
            }
            match self.h_values.get(i) {
                Some(h) => {
                    let _ = write!(out, ",{h}");
                }
                None => out.push(','),
            }
            match self.filter_meta.get(i).copied().flatten() {
                Some(meta) => {
                    let _ = write!(
                        out,
                        ",{},{},{}",
                        meta.delta_used, meta.feasible as u8, meta.slack
                    );
                }
                None => out.push_str(",,,"),
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    #[test]
    fn csv_layout() {
        let mut tr = Trajectory::start(0.5, DVector::from_vec(vec![1.0, 2.0]), Some(0.3));
        tr.push(
            DVector::from_vec(vec![0.1]),
            Some(StepMeta {
                delta_used: 1.0,
                feasible: true,
                slack: 0.25,
            }),
            DVector::from_vec(vec![1.5, 2.5]),
            Some(0.2),
        );
        let csv = tr.to_csv();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "t,x0,x1,u0,h,delta_used,feasible,slack");
        assert_eq!(lines[1], "0,1,2,0.1,0.3,1,1,0.25");
        assert_eq!(lines[2], "0.5,1.5,2.5,,0.2,,,");
        assert_eq!(tr.times, vec![0.0, 0.5]);
    }
}
