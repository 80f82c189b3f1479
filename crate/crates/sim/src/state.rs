//! Observable plant state and actuator settings.

use serde::{Deserialize, Serialize};

use crate::{Result, SimError};

/// Water levels of the three tanks at one instant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TankState {
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
}

impl TankState {
    pub fn new(h1: f64, h2: f64, h3: f64) -> Self {
        Self { h1, h2, h3 }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.h1, self.h2, self.h3]
    }

    pub fn total(&self) -> f64 {
        self.h1 + self.h2 + self.h3
    }

    pub fn is_finite(&self) -> bool {
        self.h1.is_finite() && self.h2.is_finite() && self.h3.is_finite()
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !self.is_finite() {
            return Err(SimError::InvalidState(format!("non-finite tank state {self:?}")));
        }
        if self.h1 < 0.0 || self.h2 < 0.0 || self.h3 < 0.0 {
            return Err(SimError::InvalidState(format!("negative level in {self:?}")));
        }
        Ok(())
    }
}

/// Actuator settings held constant within a process phase: inflows into
/// tanks 1 and 3, the two inter-tank valves, and the tank-3 outlet valve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub q1: f64,
    pub q3: f64,
    pub kv12: f64,
    pub kv23: f64,
    pub kv3: f64,
}

impl ControlInput {
    pub const ZERO: ControlInput = ControlInput { q1: 0.0, q3: 0.0, kv12: 0.0, kv23: 0.0, kv3: 0.0 };

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("q1", self.q1),
            ("q3", self.q3),
            ("kv12", self.kv12),
            ("kv23", self.kv23),
            ("kv3", self.kv3),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(SimError::InvalidConfig(format!("control {name} is not finite")));
            }
            if v < 0.0 {
                return Err(SimError::InvalidConfig(format!("control {name} = {v} is negative")));
            }
        }
        Ok(())
    }

    /// Every flow field scaled by the same factor.
    pub fn scaled(&self, factor: f64) -> ControlInput {
        ControlInput {
            q1: self.q1 * factor,
            q3: self.q3 * factor,
            kv12: self.kv12 * factor,
            kv23: self.kv23 * factor,
            kv3: self.kv3 * factor,
        }
    }

    /// Componentwise maximum; used to merge two phases that actuate
    /// disjoint controls into one simultaneous phase.
    pub fn combined_max(&self, other: &ControlInput) -> ControlInput {
        ControlInput {
            q1: self.q1.max(other.q1),
            q3: self.q3.max(other.q3),
            kv12: self.kv12.max(other.kv12),
            kv23: self.kv23.max(other.kv23),
            kv3: self.kv3.max(other.kv3),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn control_validation() {
        assert!(ControlInput::ZERO.validate().is_ok());
        let mut c = ControlInput::ZERO;
        c.kv12 = -0.1;
        assert!(c.validate().is_err());
        c.kv12 = f64::NAN;
        assert!(c.validate().is_err());
    }

    #[test]
    fn state_validation() {
        assert!(TankState::new(0.0, 0.0, 0.0).validate().is_ok());
        assert!(TankState::new(-0.1, 0.0, 0.0).validate().is_err());
        assert!(TankState::new(0.0, f64::INFINITY, 0.0).validate().is_err());
    }

    #[test]
    fn combined_max_takes_the_active_control() {
        let fill = ControlInput { q1: 0.3, ..ControlInput::ZERO };
        let empty = ControlInput { kv3: 0.5, ..ControlInput::ZERO };
        let merged = fill.combined_max(&empty);
        assert_eq!(merged.q1, 0.3);
        assert_eq!(merged.kv3, 0.5);
        assert_eq!(merged.kv12, 0.0);
    }
}
