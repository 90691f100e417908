//! Onset analysis of one measured run: metric series, breaks per metric on
//! the step axis and on the weight-space axes, the structure and
//! capabilities onsets, their ordering and the UAS spike magnitude.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use saslab_core::dynamics::{default_delta, detect_break, impute, second_differences, BreakOptions, BreakReport, CoordinateKind, MetricSeries, Orientation};

use crate::error::{LabError, LabResult};
use crate::measure::{load_rows, AxesRow, ComplexityRow, EvalRow, Family, ProbeRow};
use crate::store::RunManifest;

pub const STRUCTURE_METRIC: &str = "uas";
pub const CAPABILITIES_METRIC: &str = "pair_accuracy";
pub const LOSS_METRIC: &str = "loss";

pub const WEIGHT_AXES: [CoordinateKind; 3] = [
    CoordinateKind::OriginDistance,
    CoordinateKind::InitDistance,
    CoordinateKind::PathLength,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    /// Break window; `None` uses five times the smallest sample spacing.
    pub delta: Option<f64>,
    /// Break candidates before this step are ignored.
    pub exclude_before: Option<f64>,
    /// Spike magnitude is `UAS` this many checkpoints after the structure
    /// onset minus `UAS` at the onset.
    pub spike_window: usize,
    /// An onset is clear when its second difference is at least this many
    /// times the median absolute second difference of the series.
    pub clear_factor: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            delta: None,
            exclude_before: None,
            spike_window: 10,
            clear_factor: 3.0,
        }
    }
}

/// One metric sampled at every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesData {
    pub name: String,
    pub orientation: Orientation,
    pub steps: Vec<u64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Onset {
    pub report: BreakReport,
    /// Median absolute second difference of the series at the same Δ.
    pub median_abs: f64,
    pub clear: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnsetOrder {
    StructureFirst,
    Simultaneous,
    CapabilitiesFirst,
}

impl OnsetOrder {
    pub fn of(structure: f64, capabilities: f64) -> Self {
        if structure < capabilities {
            Self::StructureFirst
        } else if structure > capabilities {
            Self::CapabilitiesFirst
        } else {
            Self::Simultaneous
        }
    }

    pub fn describe(self) -> &'static str {
        match self {
            Self::StructureFirst => "structure before capabilities",
            Self::Simultaneous => "structure and capabilities together",
            Self::CapabilitiesFirst => "capabilities before structure",
        }
    }
}

/// Onset ordering on one weight-space axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisOrdering {
    pub kind: CoordinateKind,
    /// Step onsets mapped onto the axis.
    pub structure_t: f64,
    pub capabilities_t: f64,
    pub order: OnsetOrder,
    /// Breaks detected afresh on the axis, where the series allows it.
    pub structure_break: Option<Onset>,
    pub capabilities_break: Option<Onset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub window: usize,
    pub step: u64,
    pub end_step: u64,
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBreak {
    pub metric: String,
    pub onset: Option<Onset>,
    /// Why no break could be computed, if so.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub steps: Vec<u64>,
    pub series: Vec<SeriesData>,
    /// Weight-space coordinate of every checkpoint, per axis.
    pub axes: Vec<(CoordinateKind, Vec<f64>)>,
    pub breaks: Vec<MetricBreak>,
    pub structure_onset: Onset,
    pub capabilities_onset: Onset,
    /// Loss break, reported for runs that suppress SAS at some point.
    pub alternative_onset: Option<Onset>,
    pub ordering: OnsetOrder,
    pub axis_orderings: Vec<AxisOrdering>,
    pub spike: Spike,
    pub notes: Vec<String>,
}

impl AnalysisReport {
    pub fn series(&self, name: &str) -> Option<&SeriesData> {
        self.series.iter().find(|s| s.name == name)
    }

    pub fn axis(&self, kind: CoordinateKind) -> Option<&[f64]> {
        self.axes.iter().find(|(k, _)| *k == kind).map(|(_, v)| v.as_slice())
    }

    /// Step of an onset, if the report has one of that kind.
    pub fn onset_step(&self, which: OnsetKind) -> Option<f64> {
        match which {
            OnsetKind::Structure => Some(self.structure_onset.report.t_star),
            OnsetKind::Capabilities => Some(self.capabilities_onset.report.t_star),
            OnsetKind::Alternative => self.alternative_onset.as_ref().map(|o| o.report.t_star),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnsetKind {
    Structure,
    Capabilities,
    Alternative,
}

impl OnsetKind {
    pub const ALL: [OnsetKind; 3] = [OnsetKind::Structure, OnsetKind::Capabilities, OnsetKind::Alternative];

    pub fn label(self) -> &'static str {
        match self {
            OnsetKind::Structure => "structure_onset",
            OnsetKind::Capabilities => "capabilities_onset",
            OnsetKind::Alternative => "alternative_onset",
        }
    }
}

/// Inputs of [`analyze`]: aligned per-checkpoint series and axes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunSeries {
    pub name: String,
    pub seed: u64,
    pub config_hash: String,
    pub steps: Vec<u64>,
    pub series: Vec<SeriesData>,
    pub axes: Vec<(CoordinateKind, Vec<f64>)>,
    /// Whether any stage of the run applies a positive λ.
    pub suppressed: bool,
}

fn by_step<T>(rows: Vec<T>, step_of: impl Fn(&T) -> u64) -> BTreeMap<u64, T> {
    rows.into_iter().map(|r| (step_of(&r), r)).collect()
}

fn column<T>(
    steps: &[u64],
    rows: &BTreeMap<u64, T>,
    name: &str,
    orientation: Orientation,
    f: impl Fn(&T) -> Option<f64>,
) -> LabResult<SeriesData> {
    let mut s = Vec::new();
    let mut v = Vec::new();
    for &step in steps {
        let row = rows.get(&step).ok_or_else(|| LabError::MissingSeries(format!("{name} at step {step}")))?;
        if let Some(x) = f(row) {
            s.push(step);
            v.push(x);
        }
    }
    Ok(SeriesData {
        name: name.into(),
        orientation,
        steps: s,
        values: v,
    })
}

/// Collects every metric series of a measured run, aligned on its
/// checkpoint steps.
pub fn collect_series(manifest: &RunManifest) -> LabResult<RunSeries> {
    use Orientation::{Drop, Rise};
    let steps = manifest.steps();
    if steps.is_empty() {
        return Err(LabError::MissingSeries("checkpoints".into()));
    }
    let probe = by_step(load_rows(manifest, Family::Probe, |r: &ProbeRow| r.step)?, |r| r.step);
    let eval = by_step(load_rows(manifest, Family::Eval, |r: &EvalRow| r.step)?, |r| r.step);
    let cx = by_step(load_rows(manifest, Family::Complexity, |r: &ComplexityRow| r.step)?, |r| r.step);
    let axes_rows = by_step(load_rows(manifest, Family::Axes, |r: &AxesRow| r.step)?, |r| r.step);

    let mut series = vec![
        column(&steps, &eval, LOSS_METRIC, Drop, |r| Some(r.heldout_loss))?,
        column(&steps, &probe, STRUCTURE_METRIC, Rise, |r| Some(r.uas))?,
        column(&steps, &probe, "continuous_sas", Rise, |r| Some(r.continuous_sas))?,
        column(&steps, &eval, CAPABILITIES_METRIC, Rise, |r| Some(r.pair_accuracy))?,
        column(&steps, &eval, "pair_continuous", Rise, |r| Some(r.pair_continuous))?,
        column(&steps, &eval, "pppl", Drop, |r| Some(r.pppl))?,
    ];
    let first = eval.get(&steps[0]).ok_or_else(|| LabError::MissingSeries("eval".into()))?;
    for (label, _) in &first.pair_by_phenomenon {
        series.push(column(&steps, &eval, &format!("pair_{label}"), Rise, |r| {
            r.pair_by_phenomenon.iter().find(|(l, _)| l == label).map(|p| p.1)
        })?);
    }
    for &(n, _) in &first.ngram {
        series.push(column(&steps, &eval, &format!("ngram_{n}"), Rise, |r| {
            r.ngram.iter().find(|p| p.0 == n).map(|p| p.1)
        })?);
    }
    series.extend([
        column(&steps, &cx, "twonn", Rise, |r| r.twonn)?,
        column(&steps, &cx, "weight_norm", Rise, |r| Some(r.weight_norm))?,
        column(&steps, &cx, "fisher", Drop, |r| Some(r.fisher))?,
        column(&steps, &cx, "attention_entropy", Drop, |r| Some(r.attention_entropy))?,
        column(&steps, &cx, "cka_prev", Drop, |r| r.cka_prev)?,
        column(&steps, &cx, "tvd_prev", Rise, |r| r.tvd_prev)?,
    ]);
    let axes = WEIGHT_AXES
        .iter()
        .map(|&k| {
            let col = column(&steps, &axes_rows, "axes", Rise, |r| {
                Some(match k {
                    CoordinateKind::OriginDistance => r.origin,
                    CoordinateKind::InitDistance => r.init,
                    _ => r.path,
                })
            })?;
            Ok((k, col.values))
        })
        .collect::<LabResult<_>>()?;
    Ok(RunSeries {
        name: manifest.name.clone(),
        seed: manifest.seed,
        config_hash: manifest.config_hash.clone(),
        steps,
        series,
        axes,
        suppressed: manifest.config.regularizer.stages.iter().any(|s| s.lambda > 0.0),
    })
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Break of a series plus the clear-onset flag.
pub fn onset(series: &MetricSeries, orientation: Orientation, cfg: &AnalysisConfig) -> LabResult<Onset> {
    let delta = match cfg.delta {
        Some(d) if series.kind == CoordinateKind::Step => d,
        _ => default_delta(series).ok_or_else(|| LabError::MissingSeries(format!("{} has < 2 samples", series.name)))?,
    };
    let exclude_before = if series.kind == CoordinateKind::Step { cfg.exclude_before } else { None };
    let report = detect_break(
        series,
        &BreakOptions {
            delta,
            orientation,
            exclude_before,
        },
    )?;
    let diffs: Vec<f64> = second_differences(series, delta, orientation)?
        .into_iter()
        .map(|(_, d)| d.abs())
        .collect();
    let median_abs = median(diffs);
    let scale = series.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let clear = report.magnitude > 1e-9 * (1.0 + scale) && report.magnitude >= cfg.clear_factor * median_abs;
    Ok(Onset {
        report,
        median_abs,
        clear,
    })
}

fn step_series(s: &SeriesData) -> LabResult<MetricSeries> {
    Ok(MetricSeries::new(
        &s.name,
        CoordinateKind::Step,
        s.steps.iter().map(|&x| x as f64).collect(),
        s.values.clone(),
    )?)
}

/// Coordinate of `step` on an axis sampled at `steps`.
fn axis_at(steps: &[u64], axis: &[f64], step: f64) -> LabResult<f64> {
    let t: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
    let s = MetricSeries::new("axis", CoordinateKind::Step, t, axis.to_vec())?;
    Ok(impute(&s, step)?)
}

/// Pure onset analysis of aligned series.
pub fn analyze(run: &RunSeries, cfg: &AnalysisConfig) -> LabResult<AnalysisReport> {
    let get = |name: &str| {
        run.series
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| LabError::MissingSeries(name.into()))
    };
    let uas = get(STRUCTURE_METRIC)?;
    let acc = get(CAPABILITIES_METRIC)?;
    let loss = get(LOSS_METRIC)?;

    let breaks = run
        .series
        .iter()
        .map(|s| match step_series(s).and_then(|m| onset(&m, s.orientation, cfg)) {
            Ok(o) => MetricBreak {
                metric: s.name.clone(),
                onset: Some(o),
                note: None,
            },
            Err(e) => MetricBreak {
                metric: s.name.clone(),
                onset: None,
                note: Some(e.to_string()),
            },
        })
        .collect::<Vec<_>>();
    let structure_onset = onset(&step_series(uas)?, uas.orientation, cfg)?;
    let capabilities_onset = onset(&step_series(acc)?, acc.orientation, cfg)?;
    let alternative_onset = if run.suppressed {
        Some(onset(&step_series(loss)?, loss.orientation, cfg)?)
    } else {
        None
    };
    let ordering = OnsetOrder::of(structure_onset.report.t_star, capabilities_onset.report.t_star);

    let mut axis_orderings = Vec::new();
    for (kind, coords) in &run.axes {
        if coords.len() != run.steps.len() {
            return Err(LabError::MissingSeries(format!("{kind:?} axis")));
        }
        let structure_t = axis_at(&run.steps, coords, structure_onset.report.t_star)?;
        let capabilities_t = axis_at(&run.steps, coords, capabilities_onset.report.t_star)?;
        let on_axis = |s: &SeriesData| -> Option<Onset> {
            let t: Vec<f64> = s
                .steps
                .iter()
                .map(|&st| coords[run.steps.binary_search(&st).expect("aligned")])
                .collect();
            let m = MetricSeries::monotone(&s.name, *kind, &t, &s.values).ok()?;
            onset(&m, s.orientation, cfg).ok()
        };
        axis_orderings.push(AxisOrdering {
            kind: *kind,
            structure_t,
            capabilities_t,
            order: OnsetOrder::of(structure_t, capabilities_t),
            structure_break: on_axis(uas),
            capabilities_break: on_axis(acc),
        });
    }

    let t = structure_onset.report.t_star as u64;
    let i = uas.steps.partition_point(|&s| s < t).min(uas.steps.len() - 1);
    let j = (i + cfg.spike_window).min(uas.steps.len() - 1);
    let spike = Spike {
        window: cfg.spike_window,
        step: uas.steps[i],
        end_step: uas.steps[j],
        magnitude: uas.values[j] - uas.values[i],
    };

    let mut notes = Vec::new();
    if !structure_onset.clear {
        notes.push("no clear structure onset".into());
    }
    if !capabilities_onset.clear {
        notes.push("no clear capabilities onset".into());
    }
    if i + cfg.spike_window >= uas.steps.len() {
        notes.push(format!("spike window truncated at step {}", uas.steps[j]));
    }
    Ok(AnalysisReport {
        name: run.name.clone(),
        seed: run.seed,
        config_hash: run.config_hash.clone(),
        steps: run.steps.clone(),
        series: run.series.clone(),
        axes: run.axes.clone(),
        breaks,
        structure_onset,
        capabilities_onset,
        alternative_onset,
        ordering,
        axis_orderings,
        spike,
        notes,
    })
}

/// Collects the series of a measured run and analyzes them.
pub fn analyze_run(manifest: &RunManifest, cfg: &AnalysisConfig) -> LabResult<AnalysisReport> {
    analyze(&collect_series(manifest)?, cfg)
}
