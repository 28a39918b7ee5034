use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// One `step<TAB>name<TAB>value` line of a run's metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricEntry {
    pub step: u64,
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    pub entries: Vec<MetricEntry>,
}

impl MetricLog {
    pub fn push(&mut self, step: u64, name: impl Into<String>, value: f64) {
        self.entries.push(MetricEntry {
            step,
            name: name.into(),
            value,
        });
    }

    /// Values logged under `name`, in order.
    pub fn series(&self, name: &str) -> Vec<(u64, f64)> {
        self.entries
            .iter()
            .filter(|e| e.name == name)
            .map(|e| (e.step, e.value))
            .collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::with_capacity(self.entries.len() * 24);
        for e in &self.entries {
            // `{:?}` keeps enough digits to round-trip exactly
            let _ = writeln!(out, "{}\t{}\t{:?}", e.step, e.name, e.value);
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut log = MetricLog::default();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let bad = || Error::Serde(format!("metric log line {}: `{line}`", n + 1));
            let mut cols = line.split('\t');
            let (Some(step), Some(name), Some(value), None) = (cols.next(), cols.next(), cols.next(), cols.next()) else {
                return Err(bad());
            };
            log.push(
                step.parse().map_err(|_| bad())?,
                name,
                value.parse().map_err(|_| bad())?,
            );
        }
        Ok(log)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        MetricLog::from_tsv(&text)
    }

    /// Largest relative difference between two logs with identical keys, or
    /// `None` when their step/name sequences differ.
    pub fn max_rel_diff(&self, other: &MetricLog) -> Option<f64> {
        if self.entries.len() != other.entries.len() {
            return None;
        }
        let mut worst = 0.0f64;
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.step != b.step || a.name != b.name {
                return None;
            }
            if a.value == b.value {
                continue;
            }
            let scale = a.value.abs().max(b.value.abs()).max(f64::MIN_POSITIVE);
            worst = worst.max((a.value - b.value).abs() / scale);
        }
        Some(worst)
    }
}
