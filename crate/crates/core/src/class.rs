use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Pedestrian light mode, in logit order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightClass {
    Red,
    Green,
    CountdownGreen,
    CountdownBlank,
    None,
}

impl LightClass {
    pub const ALL: [LightClass; 5] = [
        LightClass::Red,
        LightClass::Green,
        LightClass::CountdownGreen,
        LightClass::CountdownBlank,
        LightClass::None,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            LightClass::Red => "red",
            LightClass::Green => "green",
            LightClass::CountdownGreen => "countdown_green",
            LightClass::CountdownBlank => "countdown_blank",
            LightClass::None => "none",
        }
    }
}

impl fmt::Display for LightClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LightClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown class {s:?}")))
    }
}

/// Argmax of a score row, first index on ties.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
