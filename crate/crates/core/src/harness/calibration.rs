//! Calibrated phase-clock round lengths.
//!
//! `calibration.json` in the crate root holds the smallest `m` on the doubling
//! grid whose rounds all last at least `D1 n ln n`, per population size. It is
//! regenerated with `popproto calibrate`.

use serde::{Deserialize, Serialize};

use crate::phaseclock::{calibrate_m, Calibration};

use super::HarnessError;

/// Target minimum round length, in units of `n ln n`.
pub const D1: f64 = 2.0;
/// Master seed of the committed calibration runs.
pub const SEED: u64 = 0x5eed_c10c;

const TABLE: &str = include_str!("../../calibration.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub d1: f64,
    pub seed: u64,
    pub entries: Vec<Calibration>,
}

impl CalibrationTable {
    pub fn committed() -> Self {
        serde_json::from_str(TABLE).expect("calibration.json is valid")
    }

    pub fn get(&self, n: usize) -> Option<&Calibration> {
        self.entries.iter().find(|c| c.n == n && c.d1 == self.d1)
    }
}

/// Calibrated `m` for `n`: the committed value if there is one, a fresh
/// calibration run otherwise.
pub fn m_for(n: usize, seed: u64) -> Result<u32, HarnessError> {
    if let Some(c) = CalibrationTable::committed().get(n) {
        return Ok(c.m);
    }
    Ok(calibrate_m(n, D1, seed)?.m)
}

pub fn build_table(sizes: &[usize], d1: f64, seed: u64) -> Result<CalibrationTable, HarnessError> {
    let entries = sizes.iter().map(|&n| calibrate_m(n, d1, seed)).collect::<Result<_, _>>()?;
    Ok(CalibrationTable { d1, seed, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn committed_table_parses() {
        let t = CalibrationTable::committed();
        assert_eq!(t.d1, D1);
        assert!(t.entries.iter().all(|c| c.min_length_ratio >= c.d1 && c.m.is_power_of_two()));
        for w in t.entries.windows(2) {
            assert!(w[0].n < w[1].n);
        }
    }
}
