//! Threshold calibration, causal median smoothing and detection metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Filter lengths evaluated for anomaly detection.
pub const FILTER_LENGTHS: [usize; 6] = [1, 15, 30, 60, 120, 240];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdConfig {
    /// Increment per iteration as a fraction of the initial threshold.
    pub step_fraction: f64,
    pub max_steps: usize,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            step_fraction: 0.01,
            max_steps: 10_000,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_fraction > 0.0) || self.max_steps == 0 {
            return Err(Error::config(
                "step_fraction must be > 0 and max_steps >= 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Normal,
    Anomaly,
}

impl Verdict {
    pub fn is_anomaly(self) -> bool {
        self == Verdict::Anomaly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Normal => "normal",
            Verdict::Anomaly => "anomaly",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub init: f64,
    pub threshold: f64,
    pub steps: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pop_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Starts at `mean(train) + std(calibration)` and raises the threshold by
/// `|init| * step_fraction` until no calibration error exceeds it.
pub fn calibrate_threshold(
    train_errors: &[f64],
    calibration_errors: &[f64],
    cfg: &ThresholdConfig,
) -> Result<Calibration> {
    cfg.validate()?;
    if train_errors.is_empty() {
        return Err(Error::EmptyInput("training errors"));
    }
    if calibration_errors.is_empty() {
        return Err(Error::EmptyInput("calibration errors"));
    }
    if train_errors
        .iter()
        .chain(calibration_errors)
        .any(|e| !e.is_finite())
    {
        return Err(Error::data("non-finite reconstruction error"));
    }
    let init = mean(train_errors) + pop_std(calibration_errors);
    let max_cal = calibration_errors
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let step = init.abs() * cfg.step_fraction;
    let mut threshold = init;
    let mut steps = 0;
    while max_cal > threshold {
        if steps == cfg.max_steps || step == 0.0 {
            return Err(Error::Calibration(format!(
                "threshold {threshold} still below calibration maximum {max_cal} after {steps} steps \
                 (init {init}, step {step})"
            )));
        }
        steps += 1;
        threshold = init + steps as f64 * step;
    }
    Ok(Calibration {
        init,
        threshold,
        steps,
    })
}

/// Trailing median over the last `len` values; the first `len - 1` outputs
/// use the available prefix. Even counts take the lower middle element.
pub fn median_smooth(errors: &[f64], len: usize) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("error series"));
    }
    if len == 0 {
        return Err(Error::config("filter length must be >= 1"));
    }
    if errors.iter().any(|e| e.is_nan()) {
        return Err(Error::data("NaN in error series"));
    }
    // Sorted copy of the current window, updated incrementally.
    let mut window: Vec<f64> = Vec::with_capacity(len);
    let mut out = Vec::with_capacity(errors.len());
    for (i, &x) in errors.iter().enumerate() {
        if i >= len {
            let old = errors[i - len];
            let pos = window.partition_point(|&v| v < old);
            window.remove(pos);
        }
        let pos = window.partition_point(|&v| v < x);
        window.insert(pos, x);
        out.push(window[(window.len() - 1) / 2]);
    }
    Ok(out)
}

/// Anomaly iff the value strictly exceeds the threshold.
pub fn classify(values: &[f64], threshold: f64) -> Vec<Verdict> {
    values
        .iter()
        .map(|&v| {
            if v > threshold {
                Verdict::Anomaly
            } else {
                Verdict::Normal
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Detection metrics; `None` where the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdMetrics {
    pub confusion: Confusion,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn ad_metrics(verdicts: &[Verdict], truth: &[Verdict]) -> Result<AdMetrics> {
    if verdicts.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} verdicts vs {} truth labels",
            verdicts.len(),
            truth.len()
        )));
    }
    let mut c = Confusion::default();
    for (v, t) in verdicts.iter().zip(truth) {
        match (v.is_anomaly(), t.is_anomaly()) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(AdMetrics {
        confusion: c,
        accuracy: ratio(c.tp + c.tn, c.total()),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
    })
}

/// Smooth, classify and score one error series.
pub fn evaluate_series(
    errors: &[f64],
    truth: &[Verdict],
    threshold: f64,
    len: usize,
) -> Result<(Vec<f64>, Vec<Verdict>, AdMetrics)> {
    let smoothed = median_smooth(errors, len)?;
    let verdicts = classify(&smoothed, threshold);
    let metrics = ad_metrics(&verdicts, truth)?;
    Ok((smoothed, verdicts, metrics))
}

/// `window_index,raw_error,smoothed_error,verdict,truth` rows.
pub fn verdicts_csv(
    errors: &[f64],
    smoothed: &[f64],
    verdicts: &[Verdict],
    truth: &[Verdict],
) -> String {
    let mut s = String::from("window_index,raw_error,smoothed_error,verdict,truth\n");
    for i in 0..errors.len() {
        let _ = writeln!(
            s,
            "{i},{},{},{},{}",
            errors[i],
            smoothed[i],
            verdicts[i].as_str(),
            truth[i].as_str()
        );
    }
    s
}
