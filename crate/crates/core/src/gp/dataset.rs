use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{ControlVec, StateVec};
use crate::error::{Error, Result};

/// Residual labels `d_i` observed at state-control pairs `(x_i, u_i)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResidualDataset {
    pub xs: Vec<StateVec>,
    pub us: Vec<ControlVec>,
    pub ys: Vec<f64>,
}

impl ResidualDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn push(&mut self, x: StateVec, u: ControlVec, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::Contract(format!("non-finite residual label {y}")));
        }
        if let (Some(x0), Some(u0)) = (self.xs.first(), self.us.first()) {
            if x.len() != x0.len() {
                return Err(Error::Dimension {
                    what: "dataset state",
                    expected: x0.len(),
                    got: x.len(),
                });
            }
            if u.len() != u0.len() {
                return Err(Error::Dimension {
                    what: "dataset control",
                    expected: u0.len(),
                    got: u.len(),
                });
            }
        }
        self.xs.push(x);
        self.us.push(u);
        self.ys.push(y);
        Ok(())
    }

    pub fn dims(&self) -> Option<(usize, usize)> {
        Some((self.xs.first()?.len(), self.us.first()?.len()))
    }

    /// Rows at the given indices, in order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            xs: idx.iter().map(|&i| self.xs[i].clone()).collect(),
            us: idx.iter().map(|&i| self.us[i].clone()).collect(),
            ys: idx.iter().map(|&i| self.ys[i]).collect(),
        }
    }

    /// Keeps at most `cap` rows at a uniform stride, always retaining the
    /// first and last rows.
    pub fn thin(&self, cap: usize) -> Self {
        self.select(&thin_indices(self.len(), cap))
    }

    /// SHA-256 over the little-endian bytes of every entry.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        for ((x, u), y) in self.xs.iter().zip(&self.us).zip(&self.ys) {
            for v in x.iter().chain(u.iter()).chain(std::iter::once(y)) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Indices `round(k (n-1) / (cap-1))` for `k = 0..cap`, or all of `0..n`.
pub fn thin_indices(n: usize, cap: usize) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    if cap == 0 {
        return Vec::new();
    }
    if cap == 1 {
        return vec![0];
    }
    (0..cap)
        .map(|k| ((k as f64) * (n - 1) as f64 / (cap - 1) as f64).round() as usize)
        .collect()
}
