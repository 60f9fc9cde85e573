//! Training phases: self-supervised pretraining, anomaly-detection
//! fine-tuning (same objective on normal data), supervised traffic
//! regression and distillation from a frozen teacher.

mod adamw;

use std::fs;
use std::path::Path;
use std::time::Instant;

use ndarray::ArrayView2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adamw::{adamw_update, clip_gradients, decays, AdamConfig, AdamW};

use crate::error::{Error, Result};
use crate::model::layers::cast;
use crate::model::{MaeModel, MaskPlan, Real};
use crate::signal::{SpectrogramWindow, Tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    FinetuneAd,
    FinetuneTle,
    FinetuneKd,
}

impl Phase {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "pretrain" => Ok(Self::Pretrain),
            "finetune_ad" => Ok(Self::FinetuneAd),
            "finetune_tle" => Ok(Self::FinetuneTle),
            "finetune_kd" | "distill" => Ok(Self::FinetuneKd),
            other => Err(Error::config(format!("unknown phase `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::FinetuneAd => "finetune_ad",
            Self::FinetuneTle => "finetune_tle",
            Self::FinetuneKd => "finetune_kd",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub phase: Phase,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub mask_ratio: f64,
    pub seed: u64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub adam: AdamConfig,
}

impl TrainPlan {
    /// Per-phase defaults. Traffic fine-tuning uses the 500-epoch, batch-8
    /// setting; see [`TrainPlan::finetune_tle_large`] for the other one.
    pub fn defaults(phase: Phase) -> Self {
        let base = Self {
            phase,
            base_lr: 2.5e-4,
            weight_decay: 0.05,
            epochs: 200,
            batch_size: 128,
            warmup_epochs: 100,
            mask_ratio: 0.8,
            seed: 0,
            clip_norm: 1.0,
            adam: AdamConfig::default(),
        };
        match phase {
            Phase::Pretrain => base,
            Phase::FinetuneAd => Self {
                base_lr: 2.5e-3,
                epochs: 400,
                batch_size: 64,
                warmup_epochs: 0,
                ..base
            },
            Phase::FinetuneTle | Phase::FinetuneKd => Self {
                base_lr: 2.5e-6,
                epochs: 500,
                batch_size: 8,
                warmup_epochs: 0,
                ..base
            },
        }
    }

    /// Traffic fine-tuning on the large weigh-in-motion set: 200 epochs,
    /// batch 128.
    pub fn finetune_tle_large() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            ..Self::defaults(Phase::FinetuneTle)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base_lr must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::config("warmup_epochs exceeds epochs"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config("mask_ratio outside [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::config("weight_decay must be >= 0 and clip_norm > 0"));
        }
        Ok(())
    }
}

/// Learning rate for `epoch`: linear ramp from 0 over the warmup epochs,
/// then a half cosine from `base_lr` towards 0.
pub fn lr_at(plan: &TrainPlan, epoch: usize) -> Result<f64> {
    if epoch >= plan.epochs {
        return Err(Error::config(format!(
            "epoch {epoch} outside 0..{}",
            plan.epochs
        )));
    }
    let w = plan.warmup_epochs;
    if epoch < w {
        return Ok(plan.base_lr * epoch as f64 / w as f64);
    }
    let progress = (epoch - w) as f64 / (plan.epochs - w) as f64;
    Ok(plan.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Weights of the distillation objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdConfig {
    pub alpha_task: f64,
    pub alpha_kd: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            alpha_task: 0.5,
            alpha_kd: 0.5,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if (self.alpha_task + self.alpha_kd - 1.0).abs() > 1e-12
            || self.alpha_task < 0.0
            || self.alpha_kd < 0.0
        {
            return Err(Error::config(format!(
                "alpha_task {} + alpha_kd {} must be non-negative and sum to 1",
                self.alpha_task, self.alpha_kd
            )));
        }
        Ok(())
    }
}

/// Loss used by supervised fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegressionLoss {
    Mse,
    Mae,
    Distill(KdConfig),
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `alpha_task * MAE(student, truth) + alpha_kd * RMSE(student, teacher)`
/// and its gradient w.r.t. the student predictions.
pub fn kd_loss(student: &[f64], teacher: &[f64], truth: &[f64], kd: &KdConfig) -> (f64, Vec<f64>) {
    let n = student.len() as f64;
    let mae = student
        .iter()
        .zip(truth)
        .map(|(s, t)| (s - t).abs())
        .sum::<f64>()
        / n;
    let mse_kd = student
        .iter()
        .zip(teacher)
        .map(|(s, t)| (s - t) * (s - t))
        .sum::<f64>()
        / n;
    let rmse = mse_kd.sqrt();
    let grad = student
        .iter()
        .zip(teacher)
        .zip(truth)
        .map(|((s, tch), tr)| {
            let task = kd.alpha_task * sign(s - tr) / n;
            let distill = if rmse > 0.0 {
                kd.alpha_kd * (s - tch) / (n * rmse)
            } else {
                0.0
            };
            task + distill
        })
        .collect();
    (kd.alpha_task * mae + kd.alpha_kd * rmse, grad)
}

fn regression_loss(
    loss: RegressionLoss,
    preds: &[f64],
    truth: &[f64],
    teacher: &[f64],
) -> (f64, Vec<f64>) {
    let n = preds.len() as f64;
    match loss {
        RegressionLoss::Mse => {
            let l = preds
                .iter()
                .zip(truth)
                .map(|(p, t)| (p - t) * (p - t))
                .sum::<f64>()
                / n;
            let g = preds
                .iter()
                .zip(truth)
                .map(|(p, t)| 2.0 * (p - t) / n)
                .collect();
            (l, g)
        }
        RegressionLoss::Mae => {
            let l = preds
                .iter()
                .zip(truth)
                .map(|(p, t)| (p - t).abs())
                .sum::<f64>()
                / n;
            let g = preds
                .iter()
                .zip(truth)
                .map(|(p, t)| sign(p - t) / n)
                .collect();
            (l, g)
        }
        RegressionLoss::Distill(kd) => kd_loss(preds, teacher, truth, &kd),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_metric: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimization step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,loss,val_metric,seconds\n");
        for r in &self.epochs {
            let val = r.val_metric.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{:e},{},{},{:.3}\n",
                r.epoch, r.lr, r.loss, val, r.seconds
            ));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.loss)
    }
}

/// Optional callbacks during training.
pub struct Hooks<'a, F: Real> {
    /// Computes a validation metric after each epoch.
    pub validate: Option<Box<dyn FnMut(&MaeModel<F>) -> Result<f64> + 'a>>,
    pub on_epoch: Option<Box<dyn FnMut(&EpochRecord) + 'a>>,
}

impl<F: Real> Default for Hooks<'_, F> {
    fn default() -> Self {
        Self {
            validate: None,
            on_epoch: None,
        }
    }
}

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const MASK_STREAM: u64 = 0x4d41_534b;

/// SplitMix64 finalizer over a seed and a sequence of words.
pub fn derive_seed(seed: u64, words: &[u64]) -> u64 {
    let mut z = seed;
    for &w in words {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(w);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SHUFFLE_STREAM, epoch as u64]));
    order.shuffle(&mut rng);
    order
}

struct Loop<'h, 'a, F: Real> {
    plan: &'h TrainPlan,
    hooks: &'h mut Hooks<'a, F>,
    log: TrainLog,
}

impl<'h, 'a, F: Real> Loop<'h, 'a, F> {
    /// Shared epoch/step driver; `step` computes loss and gradients for one
    /// batch of indices.
    fn run(
        mut self,
        model: &mut MaeModel<F>,
        n: usize,
        mut step: impl FnMut(
            &MaeModel<F>,
            &[usize],
            usize,
            usize,
            &mut crate::model::MaeParams<F>,
        ) -> Result<F>,
    ) -> Result<TrainLog> {
        let plan = self.plan;
        let mut opt = AdamW::new(&model.params, plan.adam);
        let mut grads = model.params.zeros_like();
        for epoch in 0..plan.epochs {
            let t0 = Instant::now();
            let lr = lr_at(plan, epoch)?;
            let order = epoch_order(n, plan.seed, epoch);
            let mut loss_sum = 0.0;
            let mut batches = 0usize;
            for (bi, batch) in order.chunks(plan.batch_size).enumerate() {
                grads.fill(F::zero());
                let loss = step(model, batch, epoch, bi * plan.batch_size, &mut grads)?
                    .to_f64()
                    .unwrap_or(f64::NAN);
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "loss became {loss} at epoch {epoch}, batch {bi} (lr {lr:e})"
                    )));
                }
                let mut views: Vec<_> = grads.tensors_mut().into_iter().map(|(_, t)| t).collect();
                clip_gradients(&mut views, plan.clip_norm)?;
                drop(views);
                opt.step(&mut model.params, &grads, lr, plan.weight_decay);
                self.log.step_losses.push(loss);
                loss_sum += loss;
                batches += 1;
            }
            let val_metric = match self.hooks.validate.as_mut() {
                Some(v) => Some(v(model)?),
                None => None,
            };
            let rec = EpochRecord {
                epoch,
                lr,
                loss: loss_sum / batches as f64,
                val_metric,
                seconds: t0.elapsed().as_secs_f64(),
            };
            if let Some(cb) = self.hooks.on_epoch.as_mut() {
                cb(&rec);
            }
            self.log.epochs.push(rec);
        }
        Ok(self.log)
    }
}

fn masked_objective<F: Real>(
    model: &mut MaeModel<F>,
    windows: &[SpectrogramWindow],
    plan: &TrainPlan,
    hooks: &mut Hooks<'_, F>,
) -> Result<TrainLog> {
    plan.validate()?;
    if windows.is_empty() {
        return Err(Error::EmptyInput("no training windows"));
    }
    if !model.has_decoder() {
        return Err(Error::Mode(
            "masked reconstruction needs the decoder".into(),
        ));
    }
    let np = model.config.num_patches();
    let lp = Loop {
        plan,
        hooks,
        log: TrainLog::default(),
    };
    lp.run(model, windows.len(), |m, batch, epoch, offset, grads| {
        let images: Vec<ArrayView2<f32>> = batch.iter().map(|&i| windows[i].image.view()).collect();
        let plans = (0..batch.len())
            .map(|k| {
                let s = derive_seed(plan.seed, &[MASK_STREAM, epoch as u64, (offset + k) as u64]);
                MaskPlan::sample(np, plan.mask_ratio, s)
            })
            .collect::<Result<Vec<_>>>()?;
        m.pretrain_step(&images, &plans, grads)
    })
}

/// Self-supervised pretraining on unlabeled windows; targets are ignored.
pub fn pretrain<F: Real>(
    model: &mut MaeModel<F>,
    windows: &[SpectrogramWindow],
    plan: &TrainPlan,
) -> Result<TrainLog> {
    pretrain_with(model, windows, plan, &mut Hooks::default())
}

pub fn pretrain_with<F: Real>(
    model: &mut MaeModel<F>,
    windows: &[SpectrogramWindow],
    plan: &TrainPlan,
    hooks: &mut Hooks<'_, F>,
) -> Result<TrainLog> {
    masked_objective(model, windows, plan, hooks)
}

/// Continues the masked objective on normal windows only.
pub fn finetune_ad<F: Real>(
    model: &mut MaeModel<F>,
    windows: &[SpectrogramWindow],
    plan: &TrainPlan,
) -> Result<TrainLog> {
    finetune_ad_with(model, windows, plan, &mut Hooks::default())
}

pub fn finetune_ad_with<F: Real>(
    model: &mut MaeModel<F>,
    windows: &[SpectrogramWindow],
    plan: &TrainPlan,
    hooks: &mut Hooks<'_, F>,
) -> Result<TrainLog> {
    if let Some(i) = windows.iter().position(|w| w.tag == Some(Tag::Anomaly)) {
        return Err(Error::data(format!(
            "window {i} is tagged anomalous; anomaly fine-tuning uses normal data only"
        )));
    }
    masked_objective(model, windows, plan, hooks)
}

fn targets(windows: &[SpectrogramWindow]) -> Result<Vec<f64>> {
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| {
            w.target
                .map(|t| t as f64)
                .ok_or_else(|| Error::data(format!("window {i} has no regression target")))
        })
        .collect()
}

/// Replaces the decoder with a regression head whose bias starts at the mean
/// training target. A model that already has a head is left unchanged.
pub fn attach_regression_head<F: Real>(
    model: MaeModel<F>,
    windows: &[SpectrogramWindow],
    seed: u64,
) -> Result<MaeModel<F>> {
    if model.has_reg_head() {
        return Ok(model);
    }
    let t = targets(windows)?;
    let mean = if t.is_empty() {
        0.0
    } else {
        t.iter().sum::<f64>() / t.len() as f64
    };
    Ok(model.into_regressor(derive_seed(seed, &[0x4845_4144]), mean))
}

/// Supervised fine-tuning of encoder and head with the given loss.
pub fn finetune_regression<F: Real>(
    model: &mut MaeModel<F>,
    windows: &[SpectrogramWindow],
    teacher_preds: Option<&[f64]>,
    loss: RegressionLoss,
    plan: &TrainPlan,
    hooks: &mut Hooks<'_, F>,
) -> Result<TrainLog> {
    plan.validate()?;
    if windows.is_empty() {
        return Err(Error::EmptyInput("no training windows"));
    }
    if !model.has_reg_head() {
        return Err(Error::Mode(
            "regression fine-tuning needs a regression head".into(),
        ));
    }
    let truth = targets(windows)?;
    let teacher = match (loss, teacher_preds) {
        (RegressionLoss::Distill(_), Some(t)) if t.len() == windows.len() => t.to_vec(),
        (RegressionLoss::Distill(_), _) => {
            return Err(Error::config(
                "distillation needs one teacher prediction per window",
            ))
        }
        _ => Vec::new(),
    };
    let lp = Loop {
        plan,
        hooks,
        log: TrainLog::default(),
    };
    lp.run(model, windows.len(), |m, batch, _, _, grads| {
        let images: Vec<ArrayView2<f32>> = batch.iter().map(|&i| windows[i].image.view()).collect();
        let y: Vec<f64> = batch.iter().map(|&i| truth[i]).collect();
        let yt: Vec<f64> = if teacher.is_empty() {
            Vec::new()
        } else {
            batch.iter().map(|&i| teacher[i]).collect()
        };
        let (l, _) = m.regress_step(&images, grads, |preds| {
            let p: Vec<f64> = preds.iter().map(|v| v.to_f64().unwrap()).collect();
            let (l, g) = regression_loss(loss, &p, &y, &yt);
            (cast::<F>(l), g.into_iter().map(cast::<F>).collect())
        })?;
        Ok(l)
    })
}

/// Traffic fine-tuning with squared error. A pretrained encoder-decoder has
/// its decoder swapped for the regression head first.
pub fn finetune_tle<F: Real>(
    model: MaeModel<F>,
    windows: &[SpectrogramWindow],
    plan: &TrainPlan,
) -> Result<(MaeModel<F>, TrainLog)> {
    finetune_tle_with(model, windows, plan, &mut Hooks::default())
}

pub fn finetune_tle_with<F: Real>(
    model: MaeModel<F>,
    windows: &[SpectrogramWindow],
    plan: &TrainPlan,
    hooks: &mut Hooks<'_, F>,
) -> Result<(MaeModel<F>, TrainLog)> {
    let mut model = attach_regression_head(model, windows, plan.seed)?;
    let log = finetune_regression(&mut model, windows, None, RegressionLoss::Mse, plan, hooks)?;
    Ok((model, log))
}

/// Distillation fine-tuning of `student` against a frozen `teacher`.
pub fn finetune_kd<F: Real>(
    student: MaeModel<F>,
    teacher: &MaeModel<f32>,
    windows: &[SpectrogramWindow],
    plan: &TrainPlan,
    kd: &KdConfig,
) -> Result<(MaeModel<F>, TrainLog)> {
    finetune_kd_with(student, teacher, windows, plan, kd, &mut Hooks::default())
}

pub fn finetune_kd_with<F: Real>(
    student: MaeModel<F>,
    teacher: &MaeModel<f32>,
    windows: &[SpectrogramWindow],
    plan: &TrainPlan,
    kd: &KdConfig,
    hooks: &mut Hooks<'_, F>,
) -> Result<(MaeModel<F>, TrainLog)> {
    kd.validate()?;
    if !teacher.has_reg_head() {
        return Err(Error::config("teacher has no regression head"));
    }
    let images: Vec<ArrayView2<f32>> = windows.iter().map(|w| w.image.view()).collect();
    let teacher_preds: Vec<f64> = teacher
        .predict(&images)?
        .into_iter()
        .map(f64::from)
        .collect();
    let mut student = attach_regression_head(student, windows, plan.seed)?;
    let log = finetune_regression(
        &mut student,
        windows,
        Some(&teacher_preds),
        RegressionLoss::Distill(*kd),
        plan,
        hooks,
    )?;
    Ok((student, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let plan = TrainPlan::defaults(Phase::Pretrain);
        assert_eq!(lr_at(&plan, 0).unwrap(), 0.0);
        assert_eq!(lr_at(&plan, 100).unwrap(), 2.5e-4);
        assert!((lr_at(&plan, 50).unwrap() - 1.25e-4).abs() < 1e-18);
        let last = lr_at(&plan, 199).unwrap();
        let expect = 2.5e-4 * 0.5 * (1.0 + (std::f64::consts::PI * 99.0 / 100.0).cos());
        assert!((last - expect).abs() < 1e-18);
        assert!(lr_at(&plan, 200).is_err());
    }

    #[test]
    fn phase_defaults() {
        let ad = TrainPlan::defaults(Phase::FinetuneAd);
        assert_eq!((ad.base_lr, ad.epochs, ad.batch_size), (2.5e-3, 400, 64));
        let tle = TrainPlan::defaults(Phase::FinetuneTle);
        assert_eq!((tle.base_lr, tle.epochs, tle.batch_size), (2.5e-6, 500, 8));
        let big = TrainPlan::finetune_tle_large();
        assert_eq!((big.epochs, big.batch_size), (200, 128));
        for p in [Phase::FinetuneAd, Phase::FinetuneTle, Phase::FinetuneKd] {
            assert_eq!(TrainPlan::defaults(p).weight_decay, 0.05);
        }
        let pre = TrainPlan::defaults(Phase::Pretrain);
        assert_eq!(
            (
                pre.epochs,
                pre.batch_size,
                pre.warmup_epochs,
                pre.mask_ratio
            ),
            (200, 128, 100, 0.8)
        );
    }

    #[test]
    fn kd_loss_closed_forms() {
        let kd = KdConfig::default();
        let (l, g) = kd_loss(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0], &kd);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let (l, _) = kd_loss(&[2.0], &[2.0], &[0.0], &kd);
        assert_eq!(l, 1.0);
        let (l, _) = kd_loss(&[1.0, 3.0], &[2.0, 1.0], &[0.0, 3.0], &kd);
        let expect = 0.5 * 0.5 + 0.5 * (2.5f64).sqrt();
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 1.0406).abs() < 1e-4);
    }

    #[test]
    fn kd_gradient_matches_differences() {
        let kd = KdConfig {
            alpha_task: 0.3,
            alpha_kd: 0.7,
        };
        let s = [0.4, -1.2, 2.5];
        let t = [0.1, -0.5, 2.0];
        let y = [0.0, -1.0, 3.0];
        let (_, g) = kd_loss(&s, &t, &y, &kd);
        for i in 0..3 {
            let h = 1e-7;
            let mut sp = s;
            sp[i] += h;
            let mut sm = s;
            sm[i] -= h;
            let fd = (kd_loss(&sp, &t, &y, &kd).0 - kd_loss(&sm, &t, &y, &kd).0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn kd_weights_must_sum_to_one() {
        assert!(KdConfig {
            alpha_task: 0.5,
            alpha_kd: 0.6
        }
        .validate()
        .is_err());
        assert!(KdConfig {
            alpha_task: 1.0,
            alpha_kd: 0.0
        }
        .validate()
        .is_ok());
    }

    #[test]
    fn seeds_are_spread() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(9, &[3, 4]), derive_seed(9, &[3, 4]));
    }
}
