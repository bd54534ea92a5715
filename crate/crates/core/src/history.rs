//! Per-step loss records shared by all training stages.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossHistory {
    pub records: Vec<LossRecord>,
}

impl LossHistory {
    pub fn new() -> Self {
        LossHistory::default()
    }

    /// Appends a value; a non-finite value aborts with the step index.
    pub fn push(&mut self, step: u64, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: name.to_string(),
                step,
            });
        }
        self.records.push(LossRecord {
            step,
            name: name.to_string(),
            value,
        });
        Ok(())
    }

    pub fn series(&self, name: &str) -> Vec<(u64, f64)> {
        self.records
            .iter()
            .filter(|r| r.name == name)
            .map(|r| (r.step, r.value))
            .collect()
    }

    pub fn first(&self, name: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .map(|r| r.value)
    }

    pub fn last(&self, name: &str) -> Option<f64> {
        self.records
            .iter()
            .rev()
            .find(|r| r.name == name)
            .map(|r| r.value)
    }

    pub fn extend(&mut self, other: LossHistory) {
        self.records.extend(other.records);
    }
}
