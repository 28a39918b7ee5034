use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mkd_core::harness::{self, RunConfig, RunRecord, SweepSpec};

#[derive(Parser)]
#[command(name = "mkd", version, about = "Online continual learning with momentum distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate a single configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// `key=value` applied on top of the config file; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Directory receiving the run folder (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the cartesian product of a grid file, several seeds per cell.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize saved runs and regenerate their plots.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>, overrides: &[String], out: Option<PathBuf>) -> Result<RunConfig> {
    let mut all = overrides.to_vec();
    if let Some(s) = seed {
        all.push(format!("seed={s}"));
    }
    let mut cfg = RunConfig::load(path, &all).with_context(|| format!("loading {}", path.display()))?;
    if out.is_some() {
        cfg.out_dir = out;
    }
    Ok(cfg)
}

fn print_record(r: &RunRecord) {
    println!("run {} ({} steps, {:.1}s)", r.run_id, r.n_steps, r.wall_clock_secs);
    print!("{}", r.accuracy.to_table());
    println!("final average accuracy: {:.4}", r.faa);
    match r.bt {
        Some(bt) => println!("backward transfer: {bt:+.4}"),
        None => println!("backward transfer: undefined for a single task"),
    }
    for (mode, faa) in &r.faa_by_mode {
        println!("  {:<9} faa {faa:.4}", mode.name());
    }
    if let Some(ncm) = r.ncm_accuracy {
        println!("logit accuracy {:.4}, ncm accuracy {ncm:.4}", r.logit_accuracy);
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn report(dir: &PathBuf) -> Result<()> {
    let records = harness::run::load_records(dir)?;
    anyhow::ensure!(!records.is_empty(), "no runs found under {}", dir.display());
    let mut groups: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in &records {
        groups.entry(r.label.clone()).or_default().push(r);
    }
    println!("{:<20} {:>5} {:>16} {:>16}", "method", "runs", "faa", "bt");
    for (label, rs) in &groups {
        let (fm, fs) = mean_std(&rs.iter().map(|r| r.faa).collect::<Vec<_>>());
        let bts: Vec<f64> = rs.iter().filter_map(|r| r.bt).collect();
        let bt = if bts.is_empty() {
            "-".to_string()
        } else {
            let (m, s) = mean_std(&bts);
            format!("{m:+.4}±{s:.4}")
        };
        println!("{label:<20} {:>5} {:>16} {bt:>16}", rs.len(), format!("{fm:.4}±{fs:.4}"));
    }
    let plot_dir = dir.join("plots");
    let written = harness::emit_plots(&records, &plot_dir)?;
    println!("{} plot files in {}", written.len(), plot_dir.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            seed,
            overrides,
            out,
        } => {
            let cfg = load_config(&config, seed, &overrides, out)?;
            let record = harness::run_experiment(&cfg)?;
            print_record(&record);
        }
        Command::Sweep { config, grid, out } => {
            let cfg = load_config(&config, None, &[], out)?;
            let spec = SweepSpec::load(&grid)?;
            let (table, records) = harness::sweep(&cfg, &spec)?;
            print!("{}", table.to_tsv());
            if let Some(dir) = &cfg.out_dir {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("sweep.tsv"), table.to_tsv())?;
                std::fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&table)?)?;
                let plots = dir.join("plots");
                std::fs::create_dir_all(&plots)?;
                if let Err(e) = harness::plots::alpha_lambda_plot(&table, &plots) {
                    log::warn!("alpha/lambda plot skipped: {e}");
                }
                harness::emit_plots(&records, &plots)?;
            }
        }
        Command::Report { runs } => report(&runs)?,
    }
    Ok(())
}
