//! Multistage release sweeps and correlations of metrics across seeds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use saslab_core::regularizer::RegularizerSchedule;

use crate::analysis::{analyze_run, collect_series, AnalysisConfig, AnalysisReport, CAPABILITIES_METRIC, LOSS_METRIC, STRUCTURE_METRIC};
use crate::config::ExperimentConfig;
use crate::error::{LabError, LabResult};
use crate::measure::{measure_run, Family};
use crate::store::RunManifest;
use crate::train::{run_experiment, RunOptions};

/// Config of the run that applies `lambda` until `release` and zero after.
pub fn release_config(base: &ExperimentConfig, lambda: f64, release: u64) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.name = format!("{}-release-{release}", base.name);
    cfg.regularizer.stages = RegularizerSchedule::release(lambda, release).stages;
    cfg
}

/// Trains, measures and analyzes one seed.
pub fn run_and_analyze(
    config: &ExperimentConfig,
    seed: u64,
    root: &Path,
    analysis: &AnalysisConfig,
    quiet: bool,
) -> LabResult<(RunManifest, AnalysisReport)> {
    let opts = RunOptions {
        quiet,
        ..RunOptions::default()
    };
    let mut m = run_experiment(config, seed, root, opts)?;
    measure_run(&mut m, &Family::ALL, quiet)?;
    let report = analyze_run(&m, analysis)?;
    Ok((m, report))
}

/// Loss, UAS and pair accuracy at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: u64,
    pub loss: f64,
    pub uas: f64,
    pub pair_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub release_step: u64,
    pub seed: u64,
    pub run: String,
    /// Metrics at the fixed evaluation step.
    pub at_step: Snapshot,
    /// Metrics a fixed number of steps after release, if that is reached.
    pub after_release: Option<Snapshot>,
    pub structure_onset: f64,
    pub structure_clear: bool,
    pub capabilities_onset: f64,
    pub spike_magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub lambda: f64,
    pub eval_step: u64,
    pub offset: u64,
    pub rows: Vec<SweepRow>,
}

/// Value of `metric` at the last checkpoint at or before `step`.
pub fn value_at(report: &AnalysisReport, metric: &str, step: u64) -> LabResult<(u64, f64)> {
    let s = report
        .series(metric)
        .ok_or_else(|| LabError::MissingSeries(metric.into()))?;
    let i = s.steps.partition_point(|&x| x <= step);
    if i == 0 {
        return Err(LabError::MissingSeries(format!("{metric} at step {step}")));
    }
    Ok((s.steps[i - 1], s.values[i - 1]))
}

pub fn snapshot(report: &AnalysisReport, step: u64) -> LabResult<Snapshot> {
    let (at, loss) = value_at(report, LOSS_METRIC, step)?;
    Ok(Snapshot {
        step: at,
        loss,
        uas: value_at(report, STRUCTURE_METRIC, step)?.1,
        pair_accuracy: value_at(report, CAPABILITIES_METRIC, step)?.1,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// λ applied before release.
    pub lambda: f64,
    pub releases: Vec<u64>,
    pub seeds: Vec<u64>,
    /// Fixed evaluation step.
    pub eval_step: u64,
    /// Second evaluation point, this many steps after release.
    pub offset: u64,
}

/// One run per (release step, seed). Rows report metrics at the fixed
/// evaluation step and at a fixed offset after release.
pub fn multistage_sweep(
    base: &ExperimentConfig,
    spec: &SweepSpec,
    root: &Path,
    analysis: &AnalysisConfig,
    quiet: bool,
) -> LabResult<SweepTable> {
    let SweepSpec {
        lambda,
        ref releases,
        ref seeds,
        eval_step,
        offset,
    } = *spec;
    if let Some(r) = releases.iter().find(|&&r| r > base.total_steps) {
        return Err(LabError::Invalid(format!(
            "release step {r} beyond {} total steps",
            base.total_steps
        )));
    }
    let mut rows = Vec::new();
    for &release in releases {
        let cfg = release_config(base, lambda, release);
        for &seed in seeds {
            let (_, report) = run_and_analyze(&cfg, seed, root, analysis, quiet)?;
            let after = release + offset;
            rows.push(SweepRow {
                release_step: release,
                seed,
                run: cfg.name.clone(),
                at_step: snapshot(&report, eval_step)?,
                after_release: (after <= base.total_steps).then(|| snapshot(&report, after)).transpose()?,
                structure_onset: report.structure_onset.report.t_star,
                structure_clear: report.structure_onset.clear,
                capabilities_onset: report.capabilities_onset.report.t_star,
                spike_magnitude: report.spike.magnitude,
            });
        }
    }
    Ok(SweepTable {
        lambda,
        eval_step,
        offset,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub metric_a: String,
    pub metric_b: String,
    pub step: u64,
    pub n: usize,
    pub pearson_r: f64,
    /// In-sample coefficient of determination of the least-squares fit of
    /// B on A.
    pub r_squared: f64,
    pub slope: f64,
    pub intercept: f64,
    /// Set when either metric is constant, so r is undefined (reported as 0).
    pub degenerate: bool,
    /// `(seed, a, b)`
    pub points: Vec<(u64, f64, f64)>,
}

/// Pearson r, least-squares fit and R² over `(seed, a, b)` points.
pub fn correlate(metric_a: &str, metric_b: &str, step: u64, points: Vec<(u64, f64, f64)>) -> LabResult<Correlation> {
    let n = points.len();
    if n < 3 {
        return Err(LabError::Invalid(format!("correlation needs at least 3 seeds, got {n}")));
    }
    if points.iter().any(|p| !p.1.is_finite() || !p.2.is_finite()) {
        return Err(LabError::Invalid("non-finite metric value".into()));
    }
    let nf = n as f64;
    let ma = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let mb = points.iter().map(|p| p.2).sum::<f64>() / nf;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for p in &points {
        let (da, db) = (p.1 - ma, p.2 - mb);
        saa += da * da;
        sab += da * db;
        sbb += db * db;
    }
    let tiny = |s: f64, m: f64| s <= 1e-24 * nf * (1.0 + m * m);
    let degenerate = tiny(saa, ma) || tiny(sbb, mb);
    let (r, slope) = if degenerate {
        (0.0, if tiny(saa, ma) { 0.0 } else { sab / saa })
    } else {
        ((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0), sab / saa)
    };
    Ok(Correlation {
        metric_a: metric_a.into(),
        metric_b: metric_b.into(),
        step,
        n,
        pearson_r: r,
        r_squared: r * r,
        slope,
        intercept: mb - slope * ma,
        degenerate,
        points,
    })
}

/// Correlates two metrics at a step across measured runs (one per seed).
pub fn correlate_across_seeds(manifests: &[RunManifest], metric_a: &str, metric_b: &str, step: u64) -> LabResult<Correlation> {
    let mut points = Vec::new();
    for m in manifests {
        let run = collect_series(m)?;
        let pick = |name: &str| -> LabResult<f64> {
            let s = run
                .series
                .iter()
                .find(|s| s.name == name)
                .ok_or_else(|| LabError::MissingSeries(name.into()))?;
            s.steps
                .iter()
                .position(|&x| x == step)
                .map(|i| s.values[i])
                .ok_or_else(|| LabError::MissingSeries(format!("{name} at step {step}")))
        };
        points.push((m.seed, pick(metric_a)?, pick(metric_b)?));
    }
    correlate(metric_a, metric_b, step, points)
}
