//! Plot data: one CSV per figure (metric against steps or a weight-space
//! axis, mean over seeds with a bootstrap 95% band and onset counts) plus a
//! JSON figure manifest.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use saslab_core::dynamics::CoordinateKind;
use saslab_core::rng::{rng_for, Stream};

use crate::analysis::{AnalysisReport, OnsetKind, CAPABILITIES_METRIC, LOSS_METRIC, STRUCTURE_METRIC, WEIGHT_AXES};
use crate::error::{io_err, LabResult};
use crate::store::write_json;

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
const BOOTSTRAP_SEED: u64 = 0x5a5;

/// Mean and percentile-bootstrap 95% interval of the mean.
///
/// The band is widened to include the sample mean when the percentiles of
/// a very skewed small sample would exclude it.
pub fn bootstrap_band(values: &[f64], resamples: usize, counter: u64) -> (f64, f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 || values.iter().all(|&v| v == values[0]) {
        return (mean, mean, mean);
    }
    let mut rng = rng_for(BOOTSTRAP_SEED, Stream::Eval, counter);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (mean, at(0.025).min(mean), at(0.975).max(mean))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureEntry {
    pub figure: String,
    pub file: String,
    pub metric: String,
    pub x: CoordinateKind,
    pub seeds: Vec<u64>,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureManifest {
    pub run: String,
    pub bootstrap_resamples: usize,
    pub figures: Vec<FigureEntry>,
}

pub const COLUMNS: [&str; 8] = [
    "t",
    "mean",
    "lo95",
    "hi95",
    "n_seeds",
    "structure_onset",
    "capabilities_onset",
    "alternative_onset",
];

/// Rows `(t, values over seeds, onset counts)` of one metric on one axis,
/// over the checkpoints every report shares. On a weight-space axis `t` is
/// the mean coordinate across seeds, and rows that would not increase it
/// are dropped.
fn figure_rows(reports: &[AnalysisReport], metric: &str, kind: CoordinateKind) -> Vec<(f64, Vec<f64>, [usize; 3])> {
    let Some(first) = reports.first().and_then(|r| r.series(metric)) else {
        return Vec::new();
    };
    let mut out: Vec<(f64, Vec<f64>, [usize; 3])> = Vec::new();
    for &step in &first.steps {
        let mut vals = Vec::with_capacity(reports.len());
        let mut coords = Vec::with_capacity(reports.len());
        let mut onsets = [0usize; 3];
        for r in reports {
            let Some(s) = r.series(metric) else { return Vec::new() };
            let Some(i) = s.steps.iter().position(|&x| x == step) else { break };
            vals.push(s.values[i]);
            let ci = r.steps.binary_search(&step).expect("series steps are checkpoints");
            coords.push(match kind {
                CoordinateKind::Step => step as f64,
                k => r.axis(k).map_or(f64::NAN, |a| a[ci]),
            });
            for (slot, which) in OnsetKind::ALL.iter().enumerate() {
                if r.onset_step(*which) == Some(step as f64) {
                    onsets[slot] += 1;
                }
            }
        }
        if vals.len() != reports.len() {
            continue;
        }
        let t = coords.iter().sum::<f64>() / coords.len() as f64;
        if !t.is_finite() || out.last().is_some_and(|last| t <= last.0) {
            continue;
        }
        out.push((t, vals, onsets));
    }
    out
}

fn axis_label(kind: CoordinateKind) -> &'static str {
    match kind {
        CoordinateKind::Step => "step",
        CoordinateKind::OriginDistance => "origin_distance",
        CoordinateKind::InitDistance => "init_distance",
        CoordinateKind::PathLength => "path_length",
    }
}

fn write_figure(path: &Path, rows: &[(f64, Vec<f64>, [usize; 3])]) -> LabResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(COLUMNS)?;
    for (k, (t, vals, onsets)) in rows.iter().enumerate() {
        let (mean, lo, hi) = bootstrap_band(vals, BOOTSTRAP_RESAMPLES, k as u64);
        w.write_record([
            t.to_string(),
            mean.to_string(),
            lo.to_string(),
            hi.to_string(),
            vals.len().to_string(),
            onsets[0].to_string(),
            onsets[1].to_string(),
            onsets[2].to_string(),
        ])?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes every figure for reports of one config across seeds into `out`:
/// each metric against steps, and loss, UAS and pair accuracy against each
/// weight-space axis.
pub fn emit_plot_data(reports: &[AnalysisReport], out: &Path) -> LabResult<FigureManifest> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let seeds: Vec<u64> = reports.iter().map(|r| r.seed).collect();
    let mut figures = Vec::new();
    let Some(first) = reports.first() else {
        return Ok(FigureManifest {
            run: String::new(),
            bootstrap_resamples: BOOTSTRAP_RESAMPLES,
            figures,
        });
    };
    let mut plan: Vec<(String, CoordinateKind)> = first
        .series
        .iter()
        .map(|s| (s.name.clone(), CoordinateKind::Step))
        .collect();
    for metric in [LOSS_METRIC, STRUCTURE_METRIC, CAPABILITIES_METRIC] {
        for kind in WEIGHT_AXES {
            plan.push((metric.to_string(), kind));
        }
    }
    for (metric, kind) in plan {
        let rows = figure_rows(reports, &metric, kind);
        if rows.is_empty() {
            continue;
        }
        let figure = format!("{metric}_vs_{}", axis_label(kind));
        let file = format!("{figure}.csv");
        let path: PathBuf = out.join(&file);
        write_figure(&path, &rows)?;
        figures.push(FigureEntry {
            figure,
            file,
            metric,
            x: kind,
            seeds: seeds.clone(),
            columns: COLUMNS.iter().map(|c| c.to_string()).collect(),
        });
    }
    let manifest = FigureManifest {
        run: first.name.clone(),
        bootstrap_resamples: BOOTSTRAP_RESAMPLES,
        figures,
    };
    write_json(&out.join("figures.json"), &manifest)?;
    Ok(manifest)
}
