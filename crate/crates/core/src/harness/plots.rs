//! SVG figures with a TSV data file next to each one. The TSV files are the
//! data of record; the SVGs are regenerated from them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::run::RunRecord;
use super::sweep::SweepTable;
use crate::error::{Error, Result};

const CELL: f64 = 28.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn shade(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let c = |lo: f64, hi: f64| (lo + (hi - lo) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", c(255.0, 8.0), c(255.0, 48.0), c(255.0, 107.0))
}

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" font-family=\"sans-serif\" font-size=\"10\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn heatmap_svg(title: &str, rows: &[String], cols: &[String], values: &[Vec<f64>], max: f64) -> String {
    let w = MARGIN * 2.0 + CELL * cols.len() as f64;
    let h = MARGIN * 2.0 + CELL * rows.len() as f64;
    let mut s = svg_open(w, h);
    let _ = writeln!(s, "<text x=\"{}\" y=\"20\" font-size=\"12\">{title}</text>", MARGIN);
    for (i, row) in values.iter().enumerate() {
        let y = MARGIN + CELL * i as f64;
        let _ = writeln!(s, "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", MARGIN - 4.0, y + CELL * 0.6, rows[i]);
        for (j, &v) in row.iter().enumerate() {
            let x = MARGIN + CELL * j as f64;
            let t = if max > 0.0 { v / max } else { 0.0 };
            let _ = writeln!(
                s,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{}\" stroke=\"#ddd\"><title>{v}</title></rect>",
                shade(t)
            );
        }
    }
    for (j, c) in cols.iter().enumerate() {
        let x = MARGIN + CELL * (j as f64 + 0.5);
        let _ = writeln!(s, "<text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{c}</text>", MARGIN - 6.0);
    }
    s.push_str("</svg>\n");
    s
}

/// Confusion heatmap (rows: true class, columns: predicted class).
pub fn confusion_plot(record: &RunRecord, dir: &Path) -> Result<Vec<PathBuf>> {
    let counts = record
        .confusion
        .as_ref()
        .ok_or_else(|| Error::MissingMetric("confusion".into()))?;
    let mut tsv = String::new();
    for row in counts {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        let _ = writeln!(tsv, "{}", cells.join("\t"));
    }
    let n = counts.len();
    let labels: Vec<String> = (0..n).map(|i| i.to_string()).collect();
    let values: Vec<Vec<f64>> = counts.iter().map(|r| r.iter().map(|&c| c as f64).collect()).collect();
    let max = values.iter().flatten().copied().fold(0.0, f64::max);
    let svg = heatmap_svg(&format!("confusion {}", record.run_id), &labels, &labels, &values, max);
    let tsv_path = dir.join(format!("confusion-{}.tsv", record.run_id));
    let svg_path = dir.join(format!("confusion-{}.svg", record.run_id));
    write(&tsv_path, &tsv)?;
    write(&svg_path, &svg)?;
    Ok(vec![tsv_path, svg_path])
}

/// Drift curves of every record that has any.
pub fn drift_plot(records: &[&RunRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    let with: Vec<&&RunRecord> = records.iter().filter(|r| !r.drift.is_empty()).collect();
    if with.is_empty() {
        return Err(Error::MissingMetric("drift".into()));
    }
    let mut tsv = String::from("run\tstep\tdrift\n");
    let (mut xmax, mut ymax) = (1.0f64, 1e-12f64);
    for r in &with {
        for (s, d) in r.drift.steps.iter().zip(&r.drift.d) {
            let _ = writeln!(tsv, "{}\t{s}\t{d:?}", r.run_id);
            xmax = xmax.max(*s as f64);
            ymax = ymax.max(*d);
        }
    }
    let (w, h) = (640.0, 360.0);
    let mut svg = svg_open(w, h);
    let pw = w - 2.0 * MARGIN;
    let ph = h - 2.0 * MARGIN;
    let _ = writeln!(svg, "<text x=\"{MARGIN}\" y=\"20\" font-size=\"12\">feature drift</text>");
    let _ = writeln!(
        svg,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#888\"/>"
    );
    for (i, r) in with.iter().enumerate() {
        let pts: Vec<String> = r
            .drift
            .steps
            .iter()
            .zip(&r.drift.d)
            .map(|(&s, &d)| format!("{:.1},{:.1}", MARGIN + pw * s as f64 / xmax, MARGIN + ph * (1.0 - d / ymax)))
            .collect();
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"{color}\" points=\"{}\"/>", pts.join(" "));
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" fill=\"{color}\">{}</text>",
            MARGIN + 6.0,
            MARGIN + 12.0 * (i + 1) as f64,
            r.run_id
        );
    }
    let _ = writeln!(svg, "<text x=\"{MARGIN}\" y=\"{:.1}\">step (max {xmax})</text>", h - 20.0);
    svg.push_str("</svg>\n");
    let tsv_path = dir.join("drift.tsv");
    let svg_path = dir.join("drift.svg");
    write(&tsv_path, &tsv)?;
    write(&svg_path, &svg)?;
    Ok(vec![tsv_path, svg_path])
}

/// Mean FAA over the alpha x lambda cells of a sweep.
pub fn alpha_lambda_plot(table: &SweepTable, dir: &Path) -> Result<Vec<PathBuf>> {
    let cells: Vec<_> = table.cells.iter().filter(|c| c.alpha.is_some() && c.lambda.is_some()).collect();
    if cells.is_empty() {
        return Err(Error::MissingMetric("alpha/lambda cells".into()));
    }
    let mut alphas: Vec<f64> = cells.iter().filter_map(|c| c.alpha).collect();
    let mut lambdas: Vec<f64> = cells.iter().filter_map(|c| c.lambda).collect();
    for v in [&mut alphas, &mut lambdas] {
        v.sort_by(f64::total_cmp);
        v.dedup();
    }
    let mut grid = vec![vec![f64::NAN; lambdas.len()]; alphas.len()];
    let mut tsv = String::from("alpha\tlambda\tfaa_mean\tfaa_std\n");
    for c in &cells {
        let (a, l) = (c.alpha.unwrap_or_default(), c.lambda.unwrap_or_default());
        let i = alphas.iter().position(|&x| x == a).unwrap_or_default();
        let j = lambdas.iter().position(|&x| x == l).unwrap_or_default();
        grid[i][j] = c.faa_mean;
        let _ = writeln!(tsv, "{a}\t{l}\t{:.6}\t{:.6}", c.faa_mean, c.faa_std);
    }
    let max = grid.iter().flatten().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let rows: Vec<String> = alphas.iter().map(|a| format!("{a}")).collect();
    let cols: Vec<String> = lambdas.iter().map(|l| format!("{l:.2}")).collect();
    let svg = heatmap_svg("final average accuracy (rows: alpha, columns: lambda)", &rows, &cols, &grid, max);
    let tsv_path = dir.join("alpha_lambda.tsv");
    let svg_path = dir.join("alpha_lambda.svg");
    write(&tsv_path, &tsv)?;
    write(&svg_path, &svg)?;
    Ok(vec![tsv_path, svg_path])
}

/// Writes the confusion heatmap of each record and a joint drift plot.
/// Figures whose metric is missing are skipped with a warning.
pub fn emit_plots(records: &[RunRecord], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut keep = |r: Result<Vec<PathBuf>>, what: &str| -> Result<()> {
        match r {
            Ok(p) => written.extend(p),
            Err(Error::MissingMetric(m)) => log::warn!("{what} plot skipped: missing {m}"),
            Err(e) => return Err(e),
        }
        Ok(())
    };
    for r in records {
        keep(confusion_plot(r, dir), "confusion")?;
    }
    let refs: Vec<&RunRecord> = records.iter().collect();
    keep(drift_plot(&refs, dir), "drift")?;
    Ok(written)
}
