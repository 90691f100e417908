//! Breakthrough detection on metric trajectories: the point of largest
//! second difference of a (linearly imputed) series, plus the alternative
//! weight-space x-axes.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoordinateKind {
    Step,
    OriginDistance,
    InitDistance,
    PathLength,
}

/// Direction in which a metric improves; the detector looks for the
/// sharpest acceleration in that direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Rise,
    Drop,
}

impl Orientation {
    fn sign(self) -> f64 {
        match self {
            Orientation::Rise => 1.0,
            Orientation::Drop => -1.0,
        }
    }
}

/// Samples `(t, f(t))` with strictly increasing, finite coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub name: String,
    pub kind: CoordinateKind,
    pub t: Vec<f64>,
    pub values: Vec<f64>,
}

impl MetricSeries {
    pub fn new(name: &str, kind: CoordinateKind, t: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if t.len() != values.len() {
            return Err(Error::ShapeMismatch(format!("{} coordinates, {} values", t.len(), values.len())));
        }
        if t.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("metric series"));
        }
        if t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig(format!("coordinates of {name} not strictly increasing")));
        }
        Ok(Self {
            name: name.into(),
            kind,
            t,
            values,
        })
    }

    /// Keeps only samples whose coordinate exceeds every earlier one, so a
    /// non-monotone axis (e.g. weight norm under decay) still yields a
    /// valid series.
    pub fn monotone(name: &str, kind: CoordinateKind, t: &[f64], values: &[f64]) -> Result<Self> {
        let mut ct = Vec::new();
        let mut cv = Vec::new();
        for (&x, &y) in t.iter().zip(values) {
            if ct.last().is_none_or(|&last| x > last) {
                ct.push(x);
                cv.push(y);
            }
        }
        Self::new(name, kind, ct, cv)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn span(&self) -> f64 {
        match (self.t.first(), self.t.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }
}

/// Value at `t`: the sample itself, or linear interpolation between the two
/// bracketing samples.
pub fn impute(series: &MetricSeries, t: f64) -> Result<f64> {
    let (ts, vs) = (&series.t, &series.values);
    let (Some(&lo), Some(&hi)) = (ts.first(), ts.last()) else {
        return Err(Error::Empty("metric series"));
    };
    if !(t >= lo && t <= hi) {
        return Err(Error::OutOfRange(format!("{t} outside [{lo}, {hi}]")));
    }
    let k = ts.partition_point(|&x| x < t);
    if ts[k] == t {
        return Ok(vs[k]);
    }
    let (t0, t1, v0, v1) = (ts[k - 1], ts[k], vs[k - 1], vs[k]);
    let w = (t - t0) / (t1 - t0);
    Ok(v0 + w * (v1 - v0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreakOptions {
    pub delta: f64,
    pub orientation: Orientation,
    /// Candidates below this coordinate are ignored (e.g. warmup).
    pub exclude_before: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BreakReport {
    pub metric: String,
    pub kind: CoordinateKind,
    pub orientation: Orientation,
    pub t_star: f64,
    pub delta: f64,
    /// Second difference at `t_star`, measured in the improving direction.
    pub magnitude: f64,
    pub f_before: f64,
    pub f_at: f64,
    pub f_after: f64,
}

/// Second differences `[f(t+Δ)−f(t)] − [f(t)−f(t−Δ)]` over every sample
/// coordinate that admits both neighbours, oriented so improvements are
/// positive.
pub fn second_differences(series: &MetricSeries, delta: f64, orientation: Orientation) -> Result<Vec<(f64, f64)>> {
    if delta.is_nan() || delta <= 0.0 {
        return Err(Error::InvalidConfig(format!("delta {delta} must be positive")));
    }
    if series.span() < 2.0 * delta {
        return Err(Error::OutOfRange(format!(
            "{} spans {} < 2Δ = {}",
            series.name,
            series.span(),
            2.0 * delta
        )));
    }
    let (lo, hi) = (series.t[0], series.t[series.len() - 1]);
    let s = orientation.sign();
    let mut out = Vec::new();
    for &t in &series.t {
        if t - delta < lo || t + delta > hi {
            continue;
        }
        let a = impute(series, t - delta)?;
        let b = impute(series, t)?;
        let c = impute(series, t + delta)?;
        out.push((t, s * ((c - b) - (b - a))));
    }
    Ok(out)
}

/// Candidate with the largest oriented second difference; near-ties (within
/// rounding) go to the smallest coordinate.
pub fn detect_break(series: &MetricSeries, opts: &BreakOptions) -> Result<BreakReport> {
    let cands: Vec<(f64, f64)> = second_differences(series, opts.delta, opts.orientation)?
        .into_iter()
        .filter(|&(t, _)| opts.exclude_before.is_none_or(|x| t >= x))
        .collect();
    if cands.is_empty() {
        return Err(Error::OutOfRange(format!("no break candidates for {}", series.name)));
    }
    let scale = series.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * (1.0 + scale);
    let top = cands.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max);
    let &(t_star, _) = cands.iter().find(|c| c.1 >= top - tol).expect("non-empty");
    let f_before = impute(series, t_star - opts.delta)?;
    let f_at = impute(series, t_star)?;
    let f_after = impute(series, t_star + opts.delta)?;
    let magnitude = opts.orientation.sign() * ((f_after - f_at) - (f_at - f_before));
    Ok(BreakReport {
        metric: series.name.clone(),
        kind: series.kind,
        orientation: opts.orientation,
        t_star,
        delta: opts.delta,
        magnitude: if magnitude.abs() <= tol { 0.0 } else { magnitude },
        f_before,
        f_at,
        f_after,
    })
}

/// Default Δ: five times the smallest spacing between samples.
pub fn default_delta(series: &MetricSeries) -> Option<f64> {
    series
        .t
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(None, |m: Option<f64>, d| Some(m.map_or(d, |x| x.min(d))))
        .map(|d| 5.0 * d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisPoint {
    pub origin: f64,
    pub init: f64,
    pub path: f64,
}

impl AxisPoint {
    pub fn get(&self, kind: CoordinateKind, sqrt: bool) -> Option<f64> {
        let v = match kind {
            CoordinateKind::Step => return None,
            CoordinateKind::OriginDistance => self.origin,
            CoordinateKind::InitDistance => self.init,
            CoordinateKind::PathLength => self.path,
        };
        Some(if sqrt { libm::sqrt(v) } else { v })
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Streams checkpoints in step order and tracks the weight-space axes:
/// distance from the origin, from the first checkpoint, and the summed
/// length of the segments between consecutive checkpoints.
#[derive(Debug, Clone, Default)]
pub struct AxisTracker {
    init: Option<Vec<f64>>,
    prev: Option<Vec<f64>>,
    path: f64,
}

impl AxisTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// The first call must be the initial checkpoint.
    pub fn push(&mut self, w: &[f64]) -> Result<AxisPoint> {
        if let Some(init) = &self.init {
            if init.len() != w.len() {
                return Err(Error::ShapeMismatch(format!("{} weights vs {}", w.len(), init.len())));
            }
        }
        let origin = libm::sqrt(w.iter().map(|x| x * x).sum());
        if let Some(prev) = &self.prev {
            self.path += dist(prev, w);
        }
        let init = self.init.get_or_insert_with(|| w.to_vec());
        let point = AxisPoint {
            origin,
            init: dist(init, w),
            path: self.path,
        };
        self.prev = Some(w.to_vec());
        Ok(point)
    }
}

/// Axis coordinates for checkpoints given in step order, starting from the
/// initial checkpoint (`has_initial` guards against a missing one).
pub fn rescale_axis(checkpoints: &[&[f64]], kind: CoordinateKind, sqrt: bool, has_initial: bool) -> Result<Vec<f64>> {
    if kind == CoordinateKind::Step {
        return Err(Error::InvalidConfig("step is not a weight-space axis".into()));
    }
    if !has_initial && kind != CoordinateKind::OriginDistance {
        return Err(Error::Empty("initial checkpoint"));
    }
    let mut tr = AxisTracker::new();
    checkpoints
        .iter()
        .map(|w| Ok(tr.push(w)?.get(kind, sqrt).expect("weight axis")))
        .collect()
}
