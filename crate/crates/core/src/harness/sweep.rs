//! Cartesian parameter sweeps with per-cell seed repetition.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{set_path, RunConfig};
use super::run::{load_data, run_with_data, RunRecord};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

/// Grid file contents: `n_seeds` plus one array of values per swept key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    #[serde(default = "default_seeds")]
    pub n_seeds: usize,
    pub grid: BTreeMap<String, Vec<toml::Value>>,
}

fn default_seeds() -> usize {
    5
}

impl SweepSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SweepSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if spec.n_seeds == 0 {
            return Err(Error::Config("n_seeds must be positive".into()));
        }
        if let Some((k, _)) = spec.grid.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::Config(format!("grid key `{k}` has no values")));
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SweepSpec::from_toml_str(&text)
    }

    /// All assignments of the grid, first key varying slowest.
    pub fn cells(&self) -> Vec<Vec<(String, toml::Value)>> {
        let mut cells = vec![Vec::new()];
        for (key, values) in &self.grid {
            cells = cells
                .into_iter()
                .flat_map(|prefix| {
                    values.iter().map(move |v| {
                        let mut c = prefix.clone();
                        c.push((key.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub assignments: Vec<(String, String)>,
    pub alpha: Option<f64>,
    /// Distillation weight in effect (derived from alpha unless overridden).
    pub lambda: Option<f64>,
    pub faa: Vec<f64>,
    pub bt: Vec<f64>,
    pub faa_mean: f64,
    pub faa_std: f64,
    pub bt_mean: f64,
    pub bt_std: f64,
    pub run_ids: Vec<String>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepTable {
    pub keys: Vec<String>,
    pub cells: Vec<CellResult>,
}

impl SweepTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let mut header: Vec<&str> = self.keys.iter().map(String::as_str).collect();
        header.extend(["lambda", "faa_mean", "faa_std", "bt_mean", "bt_std", "n_ok", "n_failed"]);
        let _ = writeln!(out, "{}", header.join("\t"));
        for c in &self.cells {
            let mut row: Vec<String> = c.assignments.iter().map(|(_, v)| v.clone()).collect();
            row.push(c.lambda.map_or("-".into(), |l| format!("{l:.6}")));
            for v in [c.faa_mean, c.faa_std, c.bt_mean, c.bt_std] {
                row.push(format!("{v:.6}"));
            }
            row.push(c.faa.len().to_string());
            row.push(c.failures.len().to_string());
            let _ = writeln!(out, "{}", row.join("\t"));
        }
        out
    }

    /// For each alpha, the lambda of the cell with the best mean FAA.
    pub fn best_lambda_per_alpha(&self) -> Vec<(f64, f64)> {
        let mut best: BTreeMap<u64, (f64, f64, f64)> = BTreeMap::new();
        for c in self.cells.iter().filter(|c| !c.faa.is_empty()) {
            let (Some(a), Some(l)) = (c.alpha, c.lambda) else { continue };
            let e = best.entry(a.to_bits()).or_insert((a, l, f64::NEG_INFINITY));
            if c.faa_mean > e.2 {
                *e = (a, l, c.faa_mean);
            }
        }
        let mut out: Vec<(f64, f64)> = best.into_values().map(|(a, l, _)| (a, l)).collect();
        out.sort_by(|x, y| x.0.total_cmp(&y.0));
        out
    }
}

fn render(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Runs every cell of `spec` for `n_seeds` seeds starting at `base.seed`.
/// A failing run is recorded in its cell and the sweep continues.
pub fn sweep(base: &RunConfig, spec: &SweepSpec) -> Result<(SweepTable, Vec<RunRecord>)> {
    let base_table = base.to_table()?;
    let mut data_cache: BTreeMap<String, Dataset> = BTreeMap::new();
    let mut cells = Vec::new();
    let mut records = Vec::new();
    for assignment in spec.cells() {
        let mut cell = CellResult {
            assignments: assignment.iter().map(|(k, v)| (k.clone(), render(v))).collect(),
            alpha: None,
            lambda: None,
            faa: Vec::new(),
            bt: Vec::new(),
            faa_mean: f64::NAN,
            faa_std: f64::NAN,
            bt_mean: f64::NAN,
            bt_std: f64::NAN,
            run_ids: Vec::new(),
            failures: Vec::new(),
        };
        for i in 0..spec.n_seeds {
            let attempt = (|| -> Result<RunRecord> {
                let mut table = base_table.clone();
                for (k, v) in &assignment {
                    set_path(&mut table, k, v.clone())?;
                }
                let seed = base.seed + i as u64;
                table.insert("seed".into(), toml::Value::Integer(seed as i64));
                let cfg = RunConfig::from_table(table)?;
                cell.alpha = Some(cfg.alpha);
                cell.lambda = Some(cfg.effective_lambda()?);
                let key = format!("{}|{:?}", cfg.dataset, cfg.synth_sizes());
                if !data_cache.contains_key(&key) {
                    data_cache.insert(key.clone(), load_data(&cfg)?);
                }
                run_with_data(&cfg, &data_cache[&key])
            })();
            match attempt {
                Ok(r) => {
                    cell.faa.push(r.faa);
                    if let Some(bt) = r.bt {
                        cell.bt.push(bt);
                    }
                    cell.run_ids.push(r.run_id.clone());
                    records.push(r);
                }
                Err(e) => {
                    log::warn!("sweep cell {:?} seed {i}: {e}", cell.assignments);
                    cell.failures.push(e.to_string());
                }
            }
        }
        (cell.faa_mean, cell.faa_std) = mean_std(&cell.faa);
        (cell.bt_mean, cell.bt_std) = mean_std(&cell.bt);
        cells.push(cell);
    }
    let table = SweepTable {
        keys: spec.grid.keys().cloned().collect(),
        cells,
    };
    Ok((table, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_expansion_is_cartesian() {
        let spec = SweepSpec::from_toml_str("n_seeds = 2\n[grid]\nalpha = [0.001, 0.01, 0.1]\nmkd = [\"off\", \"on\"]\n").unwrap();
        let cells = spec.cells();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0][0].0, "alpha");
        assert_eq!(cells[1][1].1, toml::Value::String("on".into()));
    }

    #[test]
    fn empty_grid_is_one_cell() {
        let spec = SweepSpec::from_toml_str("[grid]\n").unwrap();
        assert_eq!(spec.cells(), vec![Vec::new()]);
        assert_eq!(spec.n_seeds, 5);
        assert!(SweepSpec::from_toml_str("n_seeds = 0\n[grid]\n").is_err());
        assert!(SweepSpec::from_toml_str("[grid]\nalpha = []\n").is_err());
    }

    #[test]
    fn mean_std_cases() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert!(mean_std(&[]).0.is_nan());
    }
}
