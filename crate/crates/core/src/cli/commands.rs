//! Subcommand bodies. Every stage reads its inputs from config paths and
//! writes outputs that the next stage accepts unchanged.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::{CliError, RunCtx};
use crate::anomaly::{classify, median_smooth, verdicts_csv, Verdict, FILTER_LENGTHS};
use crate::baselines::{
    feature_rows, raw_windows, KnnRegressor, LinearRegressor, PcaModel, DEFAULT_CF, DEFAULT_K,
};
use crate::error::Error;
use crate::eval::{
    ablation_protocol, model_errors, predict_windows, predictions_csv, regression_metrics_with,
    score_detector, shrink, window_targets, AblationSetup, AdReport, MetricsReport, Regime,
};
use crate::model::{load_checkpoint_with_meta, save_checkpoint_with, CheckpointMeta, MaeModel};
use crate::signal::io::{read_dataset, read_recording, write_dataset, write_recording_bin};
use crate::signal::{
    build_dataset, Dataset, PipelineConfig, RawRecording, SpectrogramWindow, Tag, VehicleClass,
};
use crate::synth::{gen_ambient, gen_traffic, BridgeConfig, TrafficConfig};
use crate::train::{
    derive_seed, finetune_ad_with, finetune_kd_with, finetune_tle_with, pretrain_with, Hooks,
    Phase, TrainLog, TrainPlan,
};

type Res<T> = std::result::Result<T, CliError>;

const CHECKPOINT_FILE: &str = "model.maec";
const MANIFEST_FILE: &str = "manifest.csv";

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn existing_checkpoint(cfg: &ExperimentConfig, section: &str, key: &str) -> Res<PathBuf> {
    let p = cfg.require_path(section, key)?;
    if !p.is_file() {
        return Err(CliError::MissingCheckpoint(p));
    }
    Ok(p)
}

fn load_model(path: &Path) -> Res<(MaeModel<f32>, CheckpointMeta)> {
    if !path.is_file() {
        return Err(CliError::MissingCheckpoint(path.to_path_buf()));
    }
    Ok(load_checkpoint_with_meta(path)?)
}

/// Dataset directories listed under `[section] key`, all checked up front.
fn dataset_dirs(
    cfg: &ExperimentConfig,
    section: &str,
    key: &str,
    required: bool,
) -> Res<Vec<PathBuf>> {
    let dirs = cfg.paths(section, key)?;
    if required && dirs.is_empty() {
        return Err(bad(format!("missing required key [{section}] {key}")));
    }
    for d in &dirs {
        if !d.is_dir() {
            return Err(bad(format!(
                "[{section}] {key}: dataset {} does not exist",
                d.display()
            )));
        }
    }
    Ok(dirs)
}

fn load_datasets(dirs: &[PathBuf]) -> Res<Vec<SpectrogramWindow>> {
    let mut out = Vec::new();
    for d in dirs {
        out.extend(read_dataset(d)?.windows);
    }
    Ok(out)
}

fn save_model(ctx: &RunCtx, model: &MaeModel<f32>, adam: crate::train::AdamConfig) -> Res<PathBuf> {
    let meta = CheckpointMeta {
        adam,
        provenance: ctx.provenance(),
    };
    let path = ctx.path(CHECKPOINT_FILE);
    save_checkpoint_with(model, &meta, &path)?;
    ctx.log(format!(
        "checkpoint {} ({} parameters)",
        path.display(),
        model.param_count()
    ));
    Ok(path)
}

fn write_log(ctx: &RunCtx, log: &TrainLog) -> Res<()> {
    ctx.write("train_log.csv", log.to_csv())?;
    let mut s = String::from("step,loss\n");
    for (i, l) in log.step_losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l}");
    }
    ctx.write("step_losses.csv", s)?;
    Ok(())
}

fn epoch_logger<'a>(
    ctx: &'a RunCtx,
    phase: &'a str,
) -> Box<dyn FnMut(&crate::train::EpochRecord) + 'a> {
    Box::new(move |r| {
        let val = r
            .val_metric
            .map(|v| format!(" val={v:.6}"))
            .unwrap_or_default();
        ctx.log(format!(
            "{phase} epoch {} lr={:.3e} loss={:.6}{val} ({:.1}s)",
            r.epoch, r.lr, r.loss, r.seconds
        ));
    })
}

fn plan_for(ctx: &RunCtx, section: &str, phase: Phase, module: &str) -> Res<TrainPlan> {
    Ok(TrainPlan {
        seed: ctx.module_seed(module),
        ..ctx.config.train_plan(section, phase)?
    })
}

// ---------------------------------------------------------------- synth-gen

struct ManifestRow {
    file: String,
    role: String,
    state: String,
    seed: u64,
}

fn write_manifest(ctx: &RunCtx, rows: &[ManifestRow]) -> Res<PathBuf> {
    let path = ctx.path(MANIFEST_FILE);
    let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
    w.write_record(["file", "role", "state", "seed", "config_hash"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.file.as_str(),
            &r.role,
            &r.state,
            &r.seed.to_string(),
            &ctx.config_hash,
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(path)
}

fn read_manifest(path: &Path) -> Res<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            CliError::Run(Error::format(format!(
                "{}: no `{name}` column",
                path.display()
            )))
        })
    };
    let (f, ro, st, se) = (col("file")?, col("role")?, col("state")?, col("seed")?);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        rows.push(ManifestRow {
            file: rec[f].to_string(),
            role: rec[ro].to_string(),
            state: rec[st].to_string(),
            seed: rec[se].parse().unwrap_or(0),
        });
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Run(Error::format(e.to_string()))
}

/// Ambient recordings for the anomaly roles, traffic recordings for the
/// load roles, and a manifest listing both.
pub fn synth_gen(ctx: &RunCtx) -> Res<()> {
    let cfg = &ctx.config;
    let bridge = cfg.bridge()?;
    let traffic = cfg.traffic()?;
    let n_train = cfg.get_or("synth", "ad_train_count", 2usize)?;
    let ad_train_s = cfg.get_or("synth", "ad_train_s", 400.0)?;
    let ad_cal_s = cfg.get_or("synth", "ad_calibration_s", 800.0)?;
    let ad_test_s = cfg.get_or("synth", "ad_test_s", 800.0)?;
    let tle_train_s = cfg.get_or("synth", "tle_train_s", 1800.0)?;
    let tle_test_s = cfg.get_or("synth", "tle_test_s", 1200.0)?;
    let base = ctx.module_seed("synth");
    fs::create_dir_all(ctx.path("recordings"))?;

    let mut rows = Vec::new();
    let mut idx = 0u64;
    let emit = |role: &str,
                state: &str,
                seed: u64,
                rec: &RawRecording,
                rows: &mut Vec<ManifestRow>|
     -> Res<()> {
        let file = format!(
            "recordings/{role}_{:02}.bin",
            rows.iter()
                .filter(|r: &&ManifestRow| r.role == role)
                .count()
        );
        write_recording_bin(rec, &ctx.path(&file))?;
        ctx.log(format!("{file}: {} samples", rec.len()));
        rows.push(ManifestRow {
            file,
            role: role.into(),
            state: state.into(),
            seed,
        });
        Ok(())
    };
    let mut ambient =
        |role: &str, dur: f64, damaged: bool, rows: &mut Vec<ManifestRow>| -> Res<()> {
            idx += 1;
            let seed = derive_seed(base, &[idx]);
            let rec = gen_ambient(
                &BridgeConfig {
                    seed,
                    ..bridge.clone()
                },
                dur,
                damaged,
            )?;
            emit(
                role,
                if damaged { "damaged" } else { "normal" },
                seed,
                &rec,
                rows,
            )
        };
    for _ in 0..n_train {
        ambient("ad_train", ad_train_s, false, &mut rows)?;
    }
    ambient("ad_calibration", ad_cal_s, false, &mut rows)?;
    ambient("ad_test_normal", ad_test_s, false, &mut rows)?;
    ambient("ad_test_damaged", ad_test_s, true, &mut rows)?;
    for (role, dur) in [("tle_train", tle_train_s), ("tle_test", tle_test_s)] {
        idx += 1;
        let seed = derive_seed(base, &[idx]);
        let t = gen_traffic(
            &BridgeConfig {
                seed,
                ..bridge.clone()
            },
            &TrafficConfig {
                seed,
                ..traffic.clone()
            },
            dur,
        )?;
        emit(role, "normal", seed, &t.recording, &mut rows)?;
        let mut v = String::from("arrival,class,label_start,label_len\n");
        for x in &t.vehicles {
            let _ = writeln!(
                v,
                "{},{},{},{}",
                x.arrival, x.class, x.label_start, x.label_len
            );
        }
        ctx.write(&format!("recordings/{role}_vehicles.csv"), v)?;
    }
    write_manifest(ctx, &rows)?;
    let mut meta = format!(
        "config_hash={}\nbridge_hash={}\ntraffic_hash={}\n",
        ctx.config_hash,
        bridge.hash(),
        traffic.hash()
    );
    let _ = writeln!(meta, "recordings={}", rows.len());
    ctx.write("synth.txt", meta)?;
    Ok(())
}

// --------------------------------------------------------------- preprocess

fn manifest_recordings(
    cfg: &ExperimentConfig,
    section: &str,
) -> Res<(PathBuf, Vec<(ManifestRow, PathBuf)>)> {
    let manifest = cfg.require_path(section, "manifest")?;
    if !manifest.is_file() {
        return Err(bad(format!(
            "[{section}] manifest {} does not exist",
            manifest.display()
        )));
    }
    let dir = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let rows = read_manifest(&manifest)?;
    let mut out = Vec::with_capacity(rows.len());
    for r in rows {
        let p = dir.join(&r.file);
        if !p.is_file() {
            return Err(bad(format!(
                "manifest entry {} does not exist",
                p.display()
            )));
        }
        out.push((r, p));
    }
    Ok((manifest, out))
}

fn recordings_for(rows: &[(ManifestRow, PathBuf)], role: &str) -> Res<Vec<RawRecording>> {
    rows.iter()
        .filter(|(r, _)| r.role == role)
        .map(|(_, p)| read_recording(p).map_err(CliError::from))
        .collect()
}

fn pipelines(cfg: &ExperimentConfig) -> Res<(PipelineConfig, PipelineConfig)> {
    Ok((
        cfg.pipeline("pipeline_ad", PipelineConfig::uc1())?,
        cfg.pipeline("pipeline_tle", PipelineConfig::uc2(VehicleClass::Any))?,
    ))
}

fn state_tag(state: &str) -> Res<Option<Tag>> {
    match state {
        "normal" => Ok(Some(Tag::Normal)),
        "damaged" | "anomaly" => Ok(Some(Tag::Anomaly)),
        "" | "unknown" => Ok(None),
        other => Err(CliError::Run(Error::format(format!(
            "unknown state `{other}` in manifest"
        )))),
    }
}

/// One dataset per manifest role under `datasets/<role>`. Roles starting
/// with `tle` use `[pipeline_tle]`, the rest `[pipeline_ad]`.
pub fn preprocess(ctx: &RunCtx) -> Res<()> {
    let (_, rows) = manifest_recordings(&ctx.config, "preprocess")?;
    let (ad, tle) = pipelines(&ctx.config)?;
    let mut roles: Vec<String> = Vec::new();
    for (r, _) in &rows {
        if !roles.contains(&r.role) {
            roles.push(r.role.clone());
        }
    }
    for role in roles {
        let pcfg = if role.starts_with("tle") { &tle } else { &ad };
        let mut ds = Dataset::default();
        for (r, p) in rows.iter().filter(|(r, _)| r.role == role) {
            let mut part = build_dataset(&[read_recording(p)?], pcfg)?;
            if let Some(tag) = state_tag(&r.state)? {
                part = part.with_tag(tag);
            }
            ds.extend(part);
        }
        let dir = ctx.path(&format!("datasets/{role}"));
        let extra = [
            ("role", role.clone()),
            ("config_hash", ctx.config_hash.clone()),
            ("window_s", pcfg.window_s.to_string()),
            ("stride_s", pcfg.stride_s.to_string()),
            ("energy_threshold", pcfg.energy_threshold.to_string()),
            ("vehicle_class", pcfg.vehicle_class.as_str().to_string()),
        ];
        write_dataset(&ds, &dir, &extra)?;
        ctx.log(format!(
            "{role}: {} windows kept of {} ({} dropped by the energy filter)",
            ds.len(),
            ds.candidates,
            ds.dropped
        ));
    }
    Ok(())
}

// ----------------------------------------------------------------- training

/// Pretrains a fresh model, or continues from `[pretrain] checkpoint`.
pub fn pretrain(ctx: &RunCtx) -> Res<()> {
    let cfg = &ctx.config;
    let dirs = dataset_dirs(cfg, "pretrain", "datasets", true)?;
    let plan = plan_for(ctx, "pretrain", Phase::Pretrain, "pretrain")?;
    let mut model = match cfg.path("pretrain", "checkpoint") {
        Some(p) => load_model(&p)?.0,
        None => MaeModel::new(cfg.model("model")?, ctx.module_seed("init"))?,
    };
    let windows = load_datasets(&dirs)?;
    ctx.log(format!(
        "pretraining on {} windows, {} parameters",
        windows.len(),
        model.param_count()
    ));
    let mut hooks = Hooks {
        on_epoch: Some(epoch_logger(ctx, "pretrain")),
        ..Default::default()
    };
    let log = pretrain_with(&mut model, &windows, &plan, &mut hooks)?;
    write_log(ctx, &log)?;
    save_model(ctx, &model, plan.adam)?;
    Ok(())
}

pub fn finetune_ad(ctx: &RunCtx) -> Res<()> {
    let cfg = &ctx.config;
    let ckpt = existing_checkpoint(cfg, "finetune_ad", "checkpoint")?;
    let dirs = dataset_dirs(cfg, "finetune_ad", "datasets", true)?;
    let plan = plan_for(ctx, "finetune_ad", Phase::FinetuneAd, "finetune_ad")?;
    let (mut model, _) = load_model(&ckpt)?;
    let windows = load_datasets(&dirs)?;
    ctx.log(format!(
        "anomaly fine-tuning on {} normal windows",
        windows.len()
    ));
    let mut hooks = Hooks {
        on_epoch: Some(epoch_logger(ctx, "finetune-ad")),
        ..Default::default()
    };
    let log = finetune_ad_with(&mut model, &windows, &plan, &mut hooks)?;
    write_log(ctx, &log)?;
    save_model(ctx, &model, plan.adam)?;
    Ok(())
}

fn r2_validator<'a>(
    windows: &'a [SpectrogramWindow],
) -> Res<Box<dyn FnMut(&MaeModel<f32>) -> crate::Result<f64> + 'a>> {
    let truth = window_targets(windows)?;
    Ok(Box::new(move |m: &MaeModel<f32>| {
        let pred = predict_windows(m, windows)?;
        let r = crate::eval::regression_metrics(&pred, &truth)?;
        Ok(r.r2.unwrap_or(f64::NAN))
    }))
}

/// Regression fine-tuning; `[finetune_tle] validation` datasets, if given,
/// are scored (R²) after every epoch.
pub fn finetune_tle(ctx: &RunCtx) -> Res<()> {
    let cfg = &ctx.config;
    let ckpt = existing_checkpoint(cfg, "finetune_tle", "checkpoint")?;
    let dirs = dataset_dirs(cfg, "finetune_tle", "datasets", true)?;
    let val_dirs = dataset_dirs(cfg, "finetune_tle", "validation", false)?;
    let plan = plan_for(ctx, "finetune_tle", Phase::FinetuneTle, "finetune_tle")?;
    let (model, _) = load_model(&ckpt)?;
    let windows = load_datasets(&dirs)?;
    let val = load_datasets(&val_dirs)?;
    ctx.log(format!("traffic fine-tuning on {} windows", windows.len()));
    let mut hooks = Hooks {
        on_epoch: Some(epoch_logger(ctx, "finetune-tle")),
        validate: if val.is_empty() {
            None
        } else {
            Some(r2_validator(&val)?)
        },
    };
    let (model, log) = finetune_tle_with(model, &windows, &plan, &mut hooks)?;
    write_log(ctx, &log)?;
    save_model(ctx, &model, plan.adam)?;
    Ok(())
}

/// Distils `[distill] teacher` into `[distill] student` with the `[kd]`
/// weights.
pub fn distill(ctx: &RunCtx) -> Res<()> {
    let cfg = &ctx.config;
    let teacher_path = existing_checkpoint(cfg, "distill", "teacher")?;
    let student_path = existing_checkpoint(cfg, "distill", "student")?;
    let dirs = dataset_dirs(cfg, "distill", "datasets", true)?;
    let val_dirs = dataset_dirs(cfg, "distill", "validation", false)?;
    let plan = plan_for(ctx, "distill", Phase::FinetuneKd, "distill")?;
    let kd = cfg.kd()?;
    let (teacher, _) = load_model(&teacher_path)?;
    let (student, _) = load_model(&student_path)?;
    let windows = load_datasets(&dirs)?;
    let val = load_datasets(&val_dirs)?;
    ctx.log(format!(
        "distilling {} -> {} parameters on {} windows (alpha_task={}, alpha_kd={})",
        teacher.param_count(),
        student.param_count(),
        windows.len(),
        kd.alpha_task,
        kd.alpha_kd
    ));
    let mut hooks = Hooks {
        on_epoch: Some(epoch_logger(ctx, "distill")),
        validate: if val.is_empty() {
            None
        } else {
            Some(r2_validator(&val)?)
        },
    };
    let (model, log) = finetune_kd_with(student, &teacher, &windows, &plan, &kd, &mut hooks)?;
    write_log(ctx, &log)?;
    save_model(ctx, &model, plan.adam)?;
    Ok(())
}

// --------------------------------------------------------------- evaluation

fn filter_lengths(cfg: &ExperimentConfig, section: &str) -> Res<Vec<usize>> {
    let lens = cfg
        .get_list(section, "filter_lengths")?
        .unwrap_or_else(|| FILTER_LENGTHS.to_vec());
    if lens.is_empty() || lens.contains(&0) {
        return Err(bad(format!("[{section}] filter_lengths must be positive")));
    }
    Ok(lens)
}

fn truth_of(windows: &[SpectrogramWindow]) -> Res<Vec<Verdict>> {
    windows
        .iter()
        .enumerate()
        .map(|(i, w)| match w.tag {
            Some(Tag::Normal) => Ok(Verdict::Normal),
            Some(Tag::Anomaly) => Ok(Verdict::Anomaly),
            None => Err(CliError::Run(Error::data(format!(
                "test window {i} has no normal/anomaly tag"
            )))),
        })
        .collect()
}

fn write_ad_report(
    ctx: &RunCtx,
    model_name: &str,
    report: &AdReport,
    truth: &[Verdict],
) -> Res<()> {
    let metrics = MetricsReport {
        task: "anomaly_detection".into(),
        model: model_name.into(),
        samples: truth.len(),
        regression: None,
        detection: report.detection(),
    };
    ctx.write("metrics.csv", metrics.to_csv())?;
    let mut text = format!("config_hash={}\n{}", ctx.config_hash, metrics.to_table());
    let _ = writeln!(
        text,
        "  {:>6} {:>14} {:>14} {:>6} {:>10}",
        "L", "init", "threshold", "steps", "cal_spec"
    );
    for f in &report.per_filter {
        let _ = writeln!(
            text,
            "  {:>6} {:>14.6} {:>14.6} {:>6} {:>10.4}",
            f.len,
            f.calibration.init,
            f.calibration.threshold,
            f.calibration.steps,
            f.calibration_specificity
        );
        let smoothed = median_smooth(&report.test_errors, f.len)?;
        let verdicts = classify(&smoothed, f.calibration.threshold);
        ctx.write(
            &format!("verdicts_L{}.csv", f.len),
            verdicts_csv(&report.test_errors, &smoothed, &verdicts, truth),
        )?;
    }
    ctx.write("report.txt", &text)?;
    print!("{text}");
    Ok(())
}

/// Reconstruction-error detector: errors on the training and calibration
/// windows fix one threshold per filter length, which then classifies the
/// test windows (truth from their tags).
pub fn eval_ad(ctx: &RunCtx) -> Res<()> {
    let cfg = &ctx.config;
    let ckpt = existing_checkpoint(cfg, "eval_ad", "checkpoint")?;
    let train = load_datasets(&dataset_dirs(cfg, "eval_ad", "train", true)?)?;
    let cal = load_datasets(&dataset_dirs(cfg, "eval_ad", "calibration", true)?)?;
    let test = load_datasets(&dataset_dirs(cfg, "eval_ad", "test", true)?)?;
    let lens = filter_lengths(cfg, "eval_ad")?;
    let tcfg = cfg.threshold()?;
    let (model, _) = load_model(&ckpt)?;
    if !model.has_decoder() {
        return Err(CliError::Run(Error::Mode(
            "anomaly evaluation needs a model with a decoder".into(),
        )));
    }
    let truth = truth_of(&test)?;
    let e_train = model_errors(&model, &train, ctx.module_seed("eval_ad.train"))?;
    let e_cal = model_errors(&model, &cal, ctx.module_seed("eval_ad.calibration"))?;
    let e_test = model_errors(&model, &test, ctx.module_seed("eval_ad.test"))?;
    let report = score_detector(&e_train, &e_cal, &e_test, &truth, &lens, &tcfg)?;
    write_ad_report(ctx, "mae", &report, &truth)
}

fn write_regression(
    ctx: &RunCtx,
    model_name: &str,
    pred: &[f64],
    truth: &[f64],
    prefix: &str,
) -> Res<String> {
    let base = ctx.config.percent_base()?;
    let m = regression_metrics_with(pred, truth, base)?;
    let report = MetricsReport {
        task: "traffic_load".into(),
        model: model_name.into(),
        samples: truth.len(),
        regression: Some(m),
        detection: Vec::new(),
    };
    ctx.write(
        &format!("{prefix}predictions.csv"),
        predictions_csv(truth, pred),
    )?;
    ctx.write(&format!("{prefix}metrics.csv"), report.to_csv())?;
    Ok(report.to_table())
}

pub fn eval_tle(ctx: &RunCtx) -> Res<()> {
    let cfg = &ctx.config;
    let ckpt = existing_checkpoint(cfg, "eval_tle", "checkpoint")?;
    let test = load_datasets(&dataset_dirs(cfg, "eval_tle", "test", true)?)?;
    let (model, _) = load_model(&ckpt)?;
    if !model.has_reg_head() {
        return Err(CliError::Run(Error::Mode(
            "traffic evaluation needs a regression checkpoint".into(),
        )));
    }
    let truth = window_targets(&test)?;
    let pred = predict_windows(&model, &test)?;
    let table = write_regression(ctx, "mae", &pred, &truth, "")?;
    let text = format!("config_hash={}\n{table}", ctx.config_hash);
    ctx.write("report.txt", &text)?;
    print!("{text}");
    Ok(())
}

/// Runs the pretraining regimes on a fine-tune set shrunk to `fraction`.
/// The all-data regime pretrains on the full training set plus
/// `[ablation] extra`.
pub fn ablation(ctx: &RunCtx) -> Res<()> {
    let cfg = &ctx.config;
    let train = load_datasets(&dataset_dirs(cfg, "ablation", "train", true)?)?;
    let test = load_datasets(&dataset_dirs(cfg, "ablation", "test", true)?)?;
    let extra = load_datasets(&dataset_dirs(cfg, "ablation", "extra", false)?)?;
    let fraction = cfg.get_or("ablation", "fraction", 0.1)?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(bad("[ablation] fraction must lie in (0, 1]"));
    }
    let seeds: Vec<u64> = cfg
        .get_list("ablation", "seeds")?
        .unwrap_or_else(|| (0..5).collect());
    let regimes = match cfg.get_list::<String>("ablation", "regimes")? {
        Some(names) => names
            .iter()
            .map(|n| Regime::parse(n))
            .collect::<crate::Result<Vec<_>>>()?,
        None => Regime::ALL.to_vec(),
    };
    let task_train = shrink(&train, fraction);
    let mut pool = train.clone();
    pool.extend(extra);
    let setup = AblationSetup {
        model: cfg.model("model")?,
        pretrain: cfg.train_plan("pretrain", Phase::Pretrain)?,
        finetune: cfg.train_plan("finetune_tle", Phase::FinetuneTle)?,
        task_train: &task_train,
        task_test: &test,
        extra_pretrain: &pool,
        regimes,
    };
    ctx.log(format!(
        "ablation: {} fine-tune windows ({} of {}), {} extra pretraining windows, seeds {seeds:?}",
        task_train.len(),
        fraction,
        train.len(),
        pool.len()
    ));
    let seeds: Vec<u64> = seeds
        .iter()
        .map(|s| derive_seed(ctx.module_seed("ablation"), &[*s]))
        .collect();
    let report = ablation_protocol(&setup, &seeds);
    ctx.write("ablation.csv", report.to_csv())?;
    let text = format!(
        "config_hash={}\nMAE% by regime\n{}",
        ctx.config_hash,
        report.to_table()
    );
    ctx.write("report.txt", &text)?;
    print!("{text}");
    Ok(())
}

/// `[baseline] kind` is `pca`, `knn`, `linreg` or `all` (default). PCA
/// scores the anomaly roles of the manifest, the regressors the load roles.
pub fn baseline(ctx: &RunCtx) -> Res<()> {
    let cfg = &ctx.config;
    let kind = cfg.get_str("baseline", "kind").unwrap_or("all").to_string();
    if !["pca", "knn", "linreg", "all"].contains(&kind.as_str()) {
        return Err(bad(format!(
            "[baseline] kind `{kind}` must be pca, knn, linreg or all"
        )));
    }
    let (_, rows) = manifest_recordings(cfg, "baseline")?;
    let (ad, tle) = pipelines(cfg)?;
    let mut text = format!("config_hash={}\n", ctx.config_hash);
    if kind == "pca" || kind == "all" {
        let cf = cfg.get_or("baseline", "cf", DEFAULT_CF)?;
        let lens = filter_lengths(cfg, "baseline")?;
        let values = |role: &str| -> Res<Vec<Vec<f64>>> {
            Ok(raw_windows(&recordings_for(&rows, role)?, &ad)?
                .into_iter()
                .map(|w| w.values)
                .collect())
        };
        let train = values("ad_train")?;
        let pca = PcaModel::fit(&train, cf)?;
        pca.save(&ctx.path("pca.pcam"))?;
        let normal = values("ad_test_normal")?;
        let damaged = values("ad_test_damaged")?;
        let mut truth = vec![Verdict::Normal; normal.len()];
        truth.extend(vec![Verdict::Anomaly; damaged.len()]);
        let mut test = normal;
        test.extend(damaged);
        let report = score_detector(
            &pca.errors(&train)?,
            &pca.errors(&values("ad_calibration")?)?,
            &pca.errors(&test)?,
            &truth,
            &lens,
            &cfg.threshold()?,
        )?;
        let metrics = MetricsReport {
            task: "anomaly_detection".into(),
            model: format!("pca_cf{cf}"),
            samples: truth.len(),
            regression: None,
            detection: report.detection(),
        };
        ctx.write("pca_metrics.csv", metrics.to_csv())?;
        text.push_str(&metrics.to_table());
    }
    if kind != "pca" {
        let train = raw_windows(&recordings_for(&rows, "tle_train")?, &tle)?;
        let test = raw_windows(&recordings_for(&rows, "tle_test")?, &tle)?;
        let target = |ws: &[crate::baselines::RawWindow]| -> Res<Vec<f64>> {
            ws.iter()
                .map(|w| {
                    w.target
                        .ok_or_else(|| CliError::Run(Error::data("traffic window without labels")))
                })
                .collect()
        };
        let (x_train, y_train) = (feature_rows(&train)?, target(&train)?);
        let (x_test, y_test) = (feature_rows(&test)?, target(&test)?);
        if kind == "knn" || kind == "all" {
            let k = cfg.get_or("baseline", "k", DEFAULT_K)?;
            let knn = KnnRegressor::fit(&x_train, &y_train, k)?;
            let pred = x_test
                .iter()
                .map(|x| knn.predict(x))
                .collect::<crate::Result<Vec<_>>>()?;
            text.push_str(&write_regression(
                ctx,
                &format!("knn_k{k}"),
                &pred,
                &y_test,
                "knn_",
            )?);
        }
        if kind == "linreg" || kind == "all" {
            let lr = LinearRegressor::fit(&x_train, &y_train)?;
            let pred: Vec<f64> = x_test.iter().map(|x| lr.predict(x)).collect();
            text.push_str(&write_regression(ctx, "linreg", &pred, &y_test, "linreg_")?);
        }
    }
    ctx.write("report.txt", &text)?;
    print!("{text}");
    Ok(())
}

// ----------------------------------------------------------------- describe

pub fn describe(path: &Path) -> Res<String> {
    let (model, meta) = load_model(path)?;
    let bytes = fs::metadata(path)?.len();
    let c = &model.config;
    let mut s = String::new();
    let _ = writeln!(s, "checkpoint   {}", path.display());
    let _ = writeln!(s, "dims         ({}, {})", c.e_dim, c.d_dim);
    let _ = writeln!(s, "blocks       {}", c.n_blocks);
    let _ = writeln!(s, "heads        {} / {}", c.e_heads, c.d_heads);
    let _ = writeln!(s, "patch_size   {}", c.patch_size);
    let _ = writeln!(s, "mask_ratio   {}", c.mask_ratio);
    let _ = writeln!(s, "mlp_ratio    {}", c.mlp_ratio);
    let head = match (model.has_decoder(), model.has_reg_head()) {
        (true, _) => "decoder",
        (false, true) => "regression",
        (false, false) => "encoder only",
    };
    let _ = writeln!(s, "head         {head}");
    let _ = writeln!(s, "parameters   {}", model.param_count());
    let _ = writeln!(s, "bytes        {bytes} ({:.3} MB)", bytes as f64 / 1e6);
    let _ = writeln!(s, "provenance   {}", meta.provenance);
    Ok(s)
}
