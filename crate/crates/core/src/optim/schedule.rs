use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Piecewise multipliers for epochs 1–500, 501–1000, …, 4501–5000.
pub const TABLE3_MULTIPLIERS: [f64; 10] = [
    5.114545, 4.355357, 3.303698, 2.603073, 2.214707, 1.795869, 1.487962, 1.336904, 1.139297, 0.950362,
];

/// Inclusive epoch intervals with a learning-rate multiplier each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplierTable {
    /// `(first_epoch, last_epoch, multiplier)`, 1-based and inclusive.
    pub intervals: Vec<(u64, u64, f64)>,
}

impl MultiplierTable {
    pub fn table3() -> Self {
        MultiplierTable {
            intervals: TABLE3_MULTIPLIERS
                .iter()
                .enumerate()
                .map(|(i, &m)| (500 * i as u64 + 1, 500 * (i as u64 + 1), m))
                .collect(),
        }
    }

    pub fn constant(epochs: u64, multiplier: f64) -> Self {
        MultiplierTable {
            intervals: vec![(1, epochs, multiplier)],
        }
    }

    /// Last covered epoch.
    pub fn epochs(&self) -> u64 {
        self.intervals.iter().map(|i| i.1).max().unwrap_or(0)
    }

    /// Intervals must be positive, start at epoch 1 and be contiguous.
    pub fn validate(&self) -> Result<()> {
        let mut next = 1;
        for &(a, b, m) in &self.intervals {
            if a != next || b < a {
                return Err(Error::Config(format!(
                    "multiplier intervals must be contiguous from epoch 1; found {a}-{b} where {next} was expected"
                )));
            }
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::Config(format!("multiplier for epochs {a}-{b} must be positive, got {m}")));
            }
            next = b + 1;
        }
        if self.intervals.is_empty() {
            return Err(Error::Config("empty multiplier table".into()));
        }
        Ok(())
    }

    pub fn at_epoch(&self, epoch: u64) -> Result<f64> {
        self.intervals
            .iter()
            .find(|&&(a, b, _)| a <= epoch && epoch <= b)
            .map(|i| i.2)
            .ok_or_else(|| Error::Config(format!("epoch {epoch} is not covered by the multiplier table")))
    }

    /// Reads `first,last,multiplier` rows; a non-numeric first row is
    /// treated as a header.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut intervals = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed = (cols.len() == 3)
                .then(|| Some((cols[0].parse().ok()?, cols[1].parse().ok()?, cols[2].parse().ok()?)))
                .flatten();
            match parsed {
                Some(row) => intervals.push(row),
                None if intervals.is_empty() && n == 0 => continue,
                None => return Err(Error::Config(format!("multiplier table line {}: cannot parse {line:?}", n + 1))),
            }
        }
        let t = MultiplierTable { intervals };
        t.validate()?;
        Ok(t)
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read multiplier table {}: {e}", path.display())))?;
        Self::from_csv_str(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// `½(1 + cos(π·step/total))`.
    CosineAnnealing,
    /// `min(1, (step+1)/warmup)`.
    WarmupThenConstant { warmup: usize },
    /// Table epochs are mapped to equal fractions of the run:
    /// `epoch = 1 + ⌊step·E/total⌋` for a table covering `E` epochs.
    PiecewiseMultiplier { table: MultiplierTable },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: usize,
    #[serde(default)]
    pub kind: LrSchedule,
}

impl Schedule {
    pub fn constant(base_lr: f64, total_steps: usize) -> Self {
        Schedule {
            base_lr,
            total_steps,
            kind: LrSchedule::Constant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.base_lr)));
        }
        match &self.kind {
            LrSchedule::WarmupThenConstant { warmup: 0 } => Err(Error::Config("warmup must be at least one step".into())),
            LrSchedule::PiecewiseMultiplier { table } => table.validate(),
            _ => Ok(()),
        }
    }

    pub fn epoch_of(&self, step: usize, epochs: u64) -> u64 {
        if self.total_steps == 0 {
            return 1;
        }
        1 + (step as u128 * epochs as u128 / self.total_steps as u128) as u64
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Config(format!("step {step} is past the end of a {}-step run", self.total_steps)));
        }
        let factor = match &self.kind {
            LrSchedule::Constant => 1.0,
            LrSchedule::CosineAnnealing => {
                if self.total_steps == 0 {
                    1.0
                } else {
                    0.5 * (1.0 + (PI * step as f64 / self.total_steps as f64).cos())
                }
            }
            LrSchedule::WarmupThenConstant { warmup } => ((step + 1) as f64 / *warmup as f64).min(1.0),
            LrSchedule::PiecewiseMultiplier { table } => {
                let e = table.epochs();
                table.at_epoch(self.epoch_of(step, e).min(e))?
            }
        };
        Ok(self.base_lr * factor)
    }
}
