//! Regression metrics, detection reports and the pretraining ablation.

use std::fmt::Write as _;

use ndarray::ArrayView2;

use crate::anomaly::{
    ad_metrics, calibrate_threshold, classify, median_smooth, AdMetrics, Calibration,
    ThresholdConfig, Verdict,
};
use crate::error::{Error, Result};
use crate::model::{eval_seed, MaeModel, ModelConfig};
use crate::signal::SpectrogramWindow;
use crate::synth::short_hash;
use crate::train::{finetune_tle, pretrain, TrainPlan};

/// Denominator of the percentage metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PercentBase {
    /// Mean of the predictions (the default).
    #[default]
    Predicted,
    /// Mean of the ground truth.
    True,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegressionMetrics {
    pub n: usize,
    pub mse: f64,
    pub mae: f64,
    /// `None` when the ground truth is constant.
    pub r2: Option<f64>,
    /// `None` when the percentage base is zero.
    pub mse_pct: Option<f64>,
    pub mae_pct: Option<f64>,
}

pub fn regression_metrics(pred: &[f64], truth: &[f64]) -> Result<RegressionMetrics> {
    regression_metrics_with(pred, truth, PercentBase::Predicted)
}

pub fn regression_metrics_with(
    pred: &[f64],
    truth: &[f64],
    base: PercentBase,
) -> Result<RegressionMetrics> {
    if pred.len() != truth.len() {
        return Err(Error::shape(format!(
            "{} predictions vs {} targets",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput("predictions"));
    }
    let n = pred.len() as f64;
    let mut se = 0.0;
    let mut ae = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        se += (p - t) * (p - t);
        ae += (p - t).abs();
    }
    let mse = se / n;
    let mae = ae / n;
    let mean_t = truth.iter().sum::<f64>() / n;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean_t) * (t - mean_t)).sum();
    let r2 = (ss_tot > 0.0).then(|| 1.0 - se / ss_tot);
    let denom = match base {
        PercentBase::Predicted => pred.iter().sum::<f64>() / n,
        PercentBase::True => mean_t,
    };
    let pct = |v: f64| (denom != 0.0).then(|| 100.0 * v / denom);
    Ok(RegressionMetrics {
        n: pred.len(),
        mse,
        mae,
        r2,
        mse_pct: pct(mse),
        mae_pct: pct(mae),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}"))
        .unwrap_or_else(|| "undefined".into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub task: String,
    pub model: String,
    pub samples: usize,
    pub regression: Option<RegressionMetrics>,
    /// Detection metrics per median-filter length.
    pub detection: Vec<(usize, AdMetrics)>,
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,model,samples,metric,filter_len,value\n");
        let mut row = |metric: &str, len: Option<usize>, v: Option<f64>| {
            let len = len.map(|l| l.to_string()).unwrap_or_default();
            let v = v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{metric},{len},{v}",
                self.task, self.model, self.samples
            );
        };
        if let Some(r) = &self.regression {
            row("mse", None, Some(r.mse));
            row("mae", None, Some(r.mae));
            row("r2", None, r.r2);
            row("mse_pct", None, r.mse_pct);
            row("mae_pct", None, r.mae_pct);
        }
        for (l, m) in &self.detection {
            row("accuracy", Some(*l), m.accuracy);
            row("sensitivity", Some(*l), m.sensitivity);
            row("specificity", Some(*l), m.specificity);
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{} / {} ({} samples)\n",
            self.task, self.model, self.samples
        );
        if let Some(r) = &self.regression {
            let _ = writeln!(s, "  MSE   {:>12.6}", r.mse);
            let _ = writeln!(s, "  MAE   {:>12.6}", r.mae);
            let _ = writeln!(s, "  R2    {:>12}", opt(r.r2));
            let _ = writeln!(s, "  MSE%  {:>12}", opt(r.mse_pct));
            let _ = writeln!(s, "  MAE%  {:>12}", opt(r.mae_pct));
        }
        if !self.detection.is_empty() {
            let _ = writeln!(
                s,
                "  {:>6} {:>12} {:>12} {:>12}",
                "L", "accuracy", "sensitivity", "specificity"
            );
            for (l, m) in &self.detection {
                let _ = writeln!(
                    s,
                    "  {l:>6} {:>12} {:>12} {:>12}",
                    opt(m.accuracy),
                    opt(m.sensitivity),
                    opt(m.specificity)
                );
            }
        }
        s
    }
}

/// `index,y_true,y_pred` rows.
pub fn predictions_csv(truth: &[f64], pred: &[f64]) -> String {
    let mut s = String::from("index,y_true,y_pred\n");
    for (i, (t, p)) in truth.iter().zip(pred).enumerate() {
        let _ = writeln!(s, "{i},{t},{p}");
    }
    s
}

/// Parses `predictions_csv` output back into `(truth, pred)`.
pub fn parse_predictions_csv(text: &str) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let parse = |s: &str| -> Result<f64> {
            s.trim()
                .parse()
                .map_err(|_| Error::format(format!("line {}: bad number `{s}`", i + 1)))
        };
        if cols.len() != 3 {
            return Err(Error::format(format!("line {}: expected 3 columns", i + 1)));
        }
        truth.push(parse(cols[1])?);
        pred.push(parse(cols[2])?);
    }
    Ok((truth, pred))
}

/// Result of one filter length.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterResult {
    pub len: usize,
    pub calibration: Calibration,
    /// Share of smoothed calibration windows at or below the threshold.
    pub calibration_specificity: f64,
    pub metrics: AdMetrics,
}

/// Everything produced by scoring one detector on a test series.
#[derive(Debug, Clone, PartialEq)]
pub struct AdReport {
    pub test_errors: Vec<f64>,
    pub per_filter: Vec<FilterResult>,
}

impl AdReport {
    pub fn at(&self, len: usize) -> Option<&FilterResult> {
        self.per_filter.iter().find(|r| r.len == len)
    }

    pub fn metrics_at(&self, len: usize) -> Option<&AdMetrics> {
        self.at(len).map(|r| &r.metrics)
    }

    pub fn detection(&self) -> Vec<(usize, AdMetrics)> {
        self.per_filter.iter().map(|r| (r.len, r.metrics)).collect()
    }
}

/// For each filter length the calibration series is smoothed like the test
/// series, the threshold is calibrated on it, and the smoothed test series
/// is classified and scored. The filter is part of the detector, so the
/// calibration day sees exactly what deployment would. Any detector that
/// yields per-window errors goes through this same path.
pub fn score_detector(
    train_errors: &[f64],
    calibration_errors: &[f64],
    test_errors: &[f64],
    truth: &[Verdict],
    filter_lengths: &[usize],
    cfg: &ThresholdConfig,
) -> Result<AdReport> {
    let mut per_filter = Vec::with_capacity(filter_lengths.len());
    for &len in filter_lengths {
        let cal = median_smooth(calibration_errors, len)?;
        let calibration = calibrate_threshold(train_errors, &cal, cfg)?;
        let cal_ok = classify(&cal, calibration.threshold)
            .iter()
            .filter(|v| !v.is_anomaly())
            .count();
        let smoothed = median_smooth(test_errors, len)?;
        let verdicts = classify(&smoothed, calibration.threshold);
        per_filter.push(FilterResult {
            len,
            calibration,
            calibration_specificity: cal_ok as f64 / cal.len() as f64,
            metrics: ad_metrics(&verdicts, truth)?,
        });
    }
    Ok(AdReport {
        test_errors: test_errors.to_vec(),
        per_filter,
    })
}

/// Per-window reconstruction errors with `eval_seed(global_seed, i)`.
pub fn model_errors(
    model: &MaeModel<f32>,
    windows: &[SpectrogramWindow],
    global_seed: u64,
) -> Result<Vec<f64>> {
    let images: Vec<ArrayView2<f32>> = windows.iter().map(|w| w.image.view()).collect();
    let seeds: Vec<u64> = (0..windows.len())
        .map(|i| eval_seed(global_seed, i))
        .collect();
    model.reconstruction_errors(&images, &seeds)
}

pub fn window_targets(windows: &[SpectrogramWindow]) -> Result<Vec<f64>> {
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            w.target
                .map(f64::from)
                .ok_or_else(|| Error::data(format!("window {i} has no target")))
        })
        .collect()
}

pub fn predict_windows(model: &MaeModel<f32>, windows: &[SpectrogramWindow]) -> Result<Vec<f64>> {
    let images: Vec<ArrayView2<f32>> = windows.iter().map(|w| w.image.view()).collect();
    Ok(model.predict(&images)?.into_iter().map(f64::from).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    NoPretrain,
    PretrainUc,
    PretrainAll,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::NoPretrain, Regime::PretrainUc, Regime::PretrainAll];

    pub fn parse(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown regime `{s}`")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::NoPretrain => "no_pretrain",
            Regime::PretrainUc => "pretrain_uc",
            Regime::PretrainAll => "pretrain_all",
        }
    }
}

/// Inputs of one ablation run. Fine-tuning uses `finetune` unchanged in
/// every regime; regimes differ only in what is pretrained on.
#[derive(Debug, Clone)]
pub struct AblationSetup<'a> {
    pub model: ModelConfig,
    pub pretrain: TrainPlan,
    pub finetune: TrainPlan,
    /// Labeled windows of the task, used for fine-tuning and, in the
    /// task-only regime, for pretraining.
    pub task_train: &'a [SpectrogramWindow],
    pub task_test: &'a [SpectrogramWindow],
    /// Unlabeled windows pooled in for the all-data regime.
    pub extra_pretrain: &'a [SpectrogramWindow],
    pub regimes: Vec<Regime>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub regime: Regime,
    pub seed: u64,
    pub metrics: Option<RegressionMetrics>,
    pub error: Option<String>,
    /// Digest of the fine-tuning plan; identical across regimes.
    pub finetune_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn mae_pct(&self, regime: Regime, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.regime == regime && r.seed == seed)
            .and_then(|r| r.metrics.and_then(|m| m.mae_pct))
    }

    /// One line per seed with the regimes side by side.
    pub fn to_table(&self) -> String {
        let mut regimes: Vec<Regime> = Vec::new();
        let mut seeds: Vec<u64> = Vec::new();
        for r in &self.rows {
            if !regimes.contains(&r.regime) {
                regimes.push(r.regime);
            }
            if !seeds.contains(&r.seed) {
                seeds.push(r.seed);
            }
        }
        let mut s = format!("{:>6}", "seed");
        for g in &regimes {
            let _ = write!(s, " {:>14}", g.as_str());
        }
        s.push('\n');
        for seed in seeds {
            let _ = write!(s, "{seed:>6}");
            for &g in &regimes {
                let row = self.rows.iter().find(|r| r.regime == g && r.seed == seed);
                let cell = match row {
                    Some(AblationRow { error: Some(_), .. }) => "failed".to_string(),
                    Some(r) => opt(r.metrics.and_then(|m| m.mae_pct)),
                    None => "-".into(),
                };
                let _ = write!(s, " {cell:>14}");
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("regime,seed,mse,mae,r2,mse_pct,mae_pct,finetune_hash,error\n");
        for r in &self.rows {
            let m = r.metrics;
            let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.regime.as_str(),
                r.seed,
                f(m.map(|m| m.mse)),
                f(m.map(|m| m.mae)),
                f(m.and_then(|m| m.r2)),
                f(m.and_then(|m| m.mse_pct)),
                f(m.and_then(|m| m.mae_pct)),
                r.finetune_hash,
                r.error.as_deref().unwrap_or("").replace(',', ";")
            );
        }
        s
    }
}

fn run_regime(setup: &AblationSetup<'_>, regime: Regime, seed: u64) -> Result<RegressionMetrics> {
    let mut model = MaeModel::<f32>::new(setup.model.clone(), seed)?;
    let pre_plan = TrainPlan {
        seed,
        ..setup.pretrain.clone()
    };
    match regime {
        Regime::NoPretrain => {}
        Regime::PretrainUc => {
            pretrain(&mut model, setup.task_train, &pre_plan)?;
        }
        Regime::PretrainAll => {
            let mut pool: Vec<SpectrogramWindow> = setup.task_train.to_vec();
            pool.extend(setup.extra_pretrain.iter().cloned());
            pretrain(&mut model, &pool, &pre_plan)?;
        }
    }
    let ft = TrainPlan {
        seed,
        ..setup.finetune.clone()
    };
    let (model, _) = finetune_tle(model, setup.task_train, &ft)?;
    let pred = predict_windows(&model, setup.task_test)?;
    regression_metrics(&pred, &window_targets(setup.task_test)?)
}

/// Runs every regime for every seed. A failing regime is recorded and the
/// others still run.
pub fn ablation_protocol(setup: &AblationSetup<'_>, seeds: &[u64]) -> AblationReport {
    let mut report = AblationReport::default();
    for &seed in seeds {
        let ft_hash = short_hash(&format!(
            "{:?}",
            TrainPlan {
                seed,
                ..setup.finetune.clone()
            }
        ));
        for &regime in &setup.regimes {
            let (metrics, error) = match run_regime(setup, regime, seed) {
                Ok(m) => (Some(m), None),
                Err(e) => (None, Some(e.to_string())),
            };
            report.rows.push(AblationRow {
                regime,
                seed,
                metrics,
                error,
                finetune_hash: ft_hash.clone(),
            });
        }
    }
    report
}

/// Every `1/fraction`-th window, keeping temporal spread.
pub fn shrink<T: Clone>(items: &[T], fraction: f64) -> Vec<T> {
    if items.is_empty() || !(fraction > 0.0) {
        return Vec::new();
    }
    let step = (1.0 / fraction.min(1.0)).round().max(1.0) as usize;
    items.iter().step_by(step).cloned().collect()
}
