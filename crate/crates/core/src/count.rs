//! Discretized target counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_BINS: usize = 5;

/// Count bin in `0..=4`; bin 4 stands for four or more targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CountBin(u8);

impl CountBin {
    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_BINS {
            Ok(Self(index as u8))
        } else {
            Err(Error::BinOutOfRange(index))
        }
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

pub fn bin_of(count: usize) -> CountBin {
    CountBin(count.min(NUM_BINS - 1) as u8)
}
