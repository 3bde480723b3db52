use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 4;

/// Ego-involved accident categories with stable indices 0..3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccidentClass {
    MovingAheadOrWaiting,
    Oncoming,
    Turning,
    Lateral,
}

impl AccidentClass {
    pub const ALL: [AccidentClass; NUM_CLASSES] = [
        AccidentClass::MovingAheadOrWaiting,
        AccidentClass::Oncoming,
        AccidentClass::Turning,
        AccidentClass::Lateral,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::Index(format!("class index {i} out of range 0..{NUM_CLASSES}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            AccidentClass::MovingAheadOrWaiting => "moving_ahead_or_waiting",
            AccidentClass::Oncoming => "oncoming",
            AccidentClass::Turning => "turning",
            AccidentClass::Lateral => "lateral",
        }
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(|c| c.name()).collect()
    }
}

impl fmt::Display for AccidentClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AccidentClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown class {s:?}; valid labels: {:?}", Self::names())))
    }
}
