//! Comparison tables and plot data from simulation batches.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::config::NormalizedRow;
use crate::error::{dim_err, Result};
use crate::sim::{BatchSummary, RunLog};

/// One column of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeColumn {
    pub label: String,
    pub mean_cost: f64,
    pub mean_true_cost: f64,
    /// Mean `x_1` at the report time over the runs that reached it.
    pub mean_x1_at_report: Option<f64>,
    pub offline_seconds: f64,
    pub mean_online_ms: f64,
}

impl SchemeColumn {
    pub fn from_summary(label: &str, s: &BatchSummary, offline_seconds: f64) -> Self {
        let n = s.runs.len().max(1) as f64;
        let x1: Vec<f64> = s.runs.iter().filter_map(|r| r.x1_at_report).collect();
        SchemeColumn {
            label: label.to_string(),
            mean_cost: s.runs.iter().map(|r| r.cost).sum::<f64>() / n,
            mean_true_cost: s.runs.iter().map(|r| r.true_cost).sum::<f64>() / n,
            mean_x1_at_report: (!x1.is_empty()).then(|| x1.iter().sum::<f64>() / x1.len() as f64),
            offline_seconds,
            mean_online_ms: s.mean_solve_ms.unwrap_or(0.0),
        }
    }
}

/// Seedwise ordering of two batches run on the same scenarios.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ordering {
    pub baseline: String,
    pub candidate: String,
    /// Seeds where the candidate costs more than the baseline.
    pub worse_seeds: Vec<u64>,
    pub mean_improvement: f64,
}

impl Ordering {
    pub fn holds(&self) -> bool {
        self.worse_seeds.is_empty() && self.mean_improvement > 0.0
    }
}

/// Compares per-seed costs; `tol` is relative to the baseline cost.
pub fn ordering(baseline: (&str, &BatchSummary), candidate: (&str, &BatchSummary), tol: f64) -> Result<Ordering> {
    let (b, c) = (baseline.1, candidate.1);
    if b.runs.len() != c.runs.len() || b.runs.iter().zip(&c.runs).any(|(x, y)| x.seed != y.seed) {
        return dim_err("batches do not cover the same seeds");
    }
    let worse_seeds = b
        .runs
        .iter()
        .zip(&c.runs)
        .filter(|(x, y)| y.cost > x.cost * (1.0 + tol))
        .map(|(x, _)| x.seed)
        .collect();
    let n = b.runs.len().max(1) as f64;
    let mean_improvement = b.runs.iter().zip(&c.runs).map(|(x, y)| x.cost - y.cost).sum::<f64>() / n;
    Ok(Ordering { baseline: baseline.0.to_string(), candidate: candidate.0.to_string(), worse_seeds, mean_improvement })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_time: usize,
    pub columns: Vec<SchemeColumn>,
    pub orderings: Vec<Ordering>,
}

impl Report {
    /// Markdown table with one column per scheme.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        let head: Vec<&str> = self.columns.iter().map(|c| c.label.as_str()).collect();
        out.push_str(&format!("| metric | {} |\n", head.join(" | ")));
        out.push_str(&format!("|---|{}\n", "---|".repeat(head.len())));
        let mut line = |name: String, f: &dyn Fn(&SchemeColumn) -> String| {
            let cells: Vec<String> = self.columns.iter().map(f).collect();
            out.push_str(&format!("| {name} | {} |\n", cells.join(" | ")));
        };
        line("closed-loop cost".into(), &|c| format!("{:.1}", c.mean_cost));
        line("closed-loop cost (true state)".into(), &|c| format!("{:.1}", c.mean_true_cost));
        line(format!("x1 at t={}", self.report_time), &|c| c.mean_x1_at_report.map_or("-".into(), |v| format!("{v:.3}")));
        line("offline time".into(), &|c| format!("{:.2}s", c.offline_seconds));
        line("mean online time".into(), &|c| format!("{:.1}ms", c.mean_online_ms));
        for o in &self.orderings {
            out.push_str(&format!(
                "\n{} <= {} in every seed: {} (mean improvement {:.3})\n",
                o.candidate,
                o.baseline,
                if o.worse_seeds.is_empty() { "yes".to_string() } else { format!("no, seeds {:?}", o.worse_seeds) },
                o.mean_improvement
            ));
        }
        out
    }
}

/// Tube cross-sections of one run in raw constraint units: the nominal
/// constraint signal and its tightening per row.
pub fn write_tube_csv<W: Write>(log: &RunLog, rows: &[NormalizedRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    for (i, r) in rows.iter().enumerate() {
        header.push(format!("row{i}_signal{}_nominal", r.source));
        header.push(format!("row{i}_radius"));
        header.push(format!("row{i}_actual"));
    }
    wr.write_record(&header)?;
    for s in &log.steps {
        if s.radii.len() != rows.len() || s.z.len() != rows.len() {
            return dim_err("run log and constraint rows differ in size");
        }
        let mut rec = vec![s.t.to_string()];
        let nominal = &s.z_nominal;
        for (i, r) in rows.iter().enumerate() {
            rec.push((nominal[i] * r.bound).to_string());
            rec.push((s.radii[i] * r.bound.abs()).to_string());
            rec.push((s.z[i] * r.bound).to_string());
        }
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}
