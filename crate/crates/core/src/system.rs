//! Ready-made benchmark setups: plant pair, barrier, desired controller and
//! the box initial states are drawn from.

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::barrier::{quadrotor_barrier, segway_barrier, BarrierSpec, SEGWAY_THETA_EQ};
use crate::control::{Desired, QuadrotorTracker, SegwayPd};
use crate::dynamics::{make_quadrotor_extended, make_segway, ControlAffineModel, StateVec, GRAVITY};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Segway,
    Quadrotor,
}

impl std::str::FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segway" => Ok(SystemKind::Segway),
            "quadrotor" => Ok(SystemKind::Quadrotor),
            other => Err(Error::Config(format!("unknown system '{other}'"))),
        }
    }
}

impl std::fmt::Display for SystemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SystemKind::Segway => "segway",
            SystemKind::Quadrotor => "quadrotor",
        })
    }
}

/// Axis-aligned box of states. Degenerate sides (`lower = upper`) pin a
/// coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl StateBox {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.lower.len() != dim || self.upper.len() != dim {
            return Err(Error::Config(format!(
                "initial region must have {dim} bounds per side"
            )));
        }
        if self
            .lower
            .iter()
            .zip(&self.upper)
            .any(|(l, u)| !(l <= u) || !l.is_finite() || !u.is_finite())
        {
            return Err(Error::Config("initial region is empty or unbounded".into()));
        }
        Ok(())
    }

    pub fn center(&self) -> StateVec {
        DVector::from_iterator(
            self.lower.len(),
            self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)),
        )
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> StateVec {
        DVector::from_iterator(
            self.lower.len(),
            self.lower
                .iter()
                .zip(&self.upper)
                .map(|(&l, &u)| if l < u { rng.gen_range(l..u) } else { l }),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemSetup {
    pub kind: SystemKind,
    pub model: ControlAffineModel,
    pub barrier: BarrierSpec,
    pub desired: Desired,
    pub region: StateBox,
    pub dt: f64,
    pub horizon: f64,
}

impl SystemSetup {
    pub fn segway() -> Self {
        let th = SEGWAY_THETA_EQ;
        Self {
            kind: SystemKind::Segway,
            model: make_segway(),
            barrier: segway_barrier(),
            desired: Desired::SegwayPd(SegwayPd::default()),
            region: StateBox {
                lower: vec![-0.1, th - 0.05, -0.1, -0.1],
                upper: vec![0.1, th + 0.05, 0.1, 0.1],
            },
            dt: 0.01,
            horizon: 10.0,
        }
    }

    /// Thrust-extended quadrotor starting at rest near `(2, 2)` with the
    /// thrust the nominal model believes hovers.
    pub fn quadrotor() -> Self {
        let model = make_quadrotor_extended();
        let hover = match &model.nominal {
            crate::dynamics::Plant::QuadrotorExtended(p) => p.mass * GRAVITY,
            _ => unreachable!("extended quadrotor"),
        };
        Self {
            kind: SystemKind::Quadrotor,
            model,
            barrier: quadrotor_barrier(),
            desired: Desired::QuadrotorTracker(QuadrotorTracker::default()),
            region: StateBox {
                lower: vec![1.8, 1.8, 0.0, 0.0, 0.0, 0.0, hover, 0.0],
                upper: vec![2.2, 2.2, 0.0, 0.0, 0.0, 0.0, hover, 0.0],
            },
            dt: 0.01,
            horizon: 12.0,
        }
    }

    pub fn for_kind(kind: SystemKind) -> Self {
        match kind {
            SystemKind::Segway => Self::segway(),
            SystemKind::Quadrotor => Self::quadrotor(),
        }
    }

    /// Same setup with the true plant replaced by the nominal one.
    pub fn matched(mut self) -> Self {
        self.model = ControlAffineModel::matched(self.model.name.clone(), self.model.nominal.clone());
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.barrier.validate()?;
        self.region.validate(self.model.state_dim())?;
        if !(self.dt > 0.0) || !(self.horizon > 0.0) {
            return Err(Error::Config(format!(
                "dt {} and horizon {} must be positive",
                self.dt, self.horizon
            )));
        }
        Ok(())
    }
}
