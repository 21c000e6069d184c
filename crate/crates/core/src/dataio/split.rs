use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Chronological train/validation/test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitSpec {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let s = Self { train, val, test };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions {parts:?} must be in [0, 1] and sum to 1"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRanges {
    pub fn lengths(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

fn floor_frac(f: f64, total: usize) -> usize {
    // the epsilon absorbs representation error such as 0.7 * 10 = 6.999...
    ((f * total as f64) + 1e-9).floor() as usize
}

/// Contiguous blocks of `floor(f * T)` steps; the remainder goes to test.
/// Every block with a non-zero fraction must fit at least one window of
/// `min_len` steps.
pub fn split(steps: usize, spec: &SplitSpec, min_len: usize) -> Result<SplitRanges> {
    spec.validate()?;
    let n_train = floor_frac(spec.train, steps);
    let n_val = floor_frac(spec.val, steps).min(steps - n_train);
    let ranges = SplitRanges {
        train: 0..n_train,
        val: n_train..n_train + n_val,
        test: n_train + n_val..steps,
    };
    for (name, frac, r) in [
        ("train", spec.train, &ranges.train),
        ("val", spec.val, &ranges.val),
        ("test", spec.test, &ranges.test),
    ] {
        if frac > 0.0 && r.len() < min_len {
            return Err(Error::BlockTooShort {
                block: name,
                len: r.len(),
                needed: min_len,
            });
        }
    }
    Ok(ranges)
}
