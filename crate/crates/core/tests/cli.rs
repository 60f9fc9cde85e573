use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use shm_fomo::model::load_checkpoint_with_meta;
use shm_fomo::signal::io::read_dataset;

const BIN: &str = env!("CARGO_BIN_EXE_shm-fomo");

struct Sandbox {
    tmp: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Self {
            tmp: tempfile::tempdir().unwrap(),
        }
    }

    fn out(&self) -> PathBuf {
        self.tmp.path().join("runs")
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.tmp.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(BIN)
            .args(args)
            .arg("--out")
            .arg(self.out())
            .env_remove("SHM_FOMO_OUT")
            .output()
            .unwrap()
    }

    /// Runs a stage that must succeed and returns its run directory.
    fn stage(&self, cmd: &str, cfg: &Path, extra: &[&str]) -> PathBuf {
        let mut args = vec![cmd, "--config", cfg.to_str().unwrap()];
        args.extend_from_slice(extra);
        let o = self.run(&args);
        assert!(
            o.status.success(),
            "{cmd} failed: {}\n{}",
            o.status,
            String::from_utf8_lossy(&o.stderr)
        );
        let stdout = String::from_utf8(o.stdout).unwrap();
        let dir = PathBuf::from(stdout.lines().last().unwrap());
        assert!(dir.join("DONE").is_file());
        assert!(dir.join("config.ini").is_file());
        dir
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let sb = Sandbox::new();
    let o = sb.run(&["pretrain"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&sb.run(&["pretrain", "--bogus"])), 2);
    assert_eq!(code(&sb.run(&["no-such-command"])), 2);
    assert_eq!(code(&sb.run(&[])), 2);
    assert_eq!(code(&sb.run(&["--help"])), 0);
}

#[test]
fn malformed_config_exits_3() {
    let sb = Sandbox::new();
    let cfg = sb.config(
        "bad.ini",
        "[model]\ne_dim = lots\n[pretrain]\ndatasets = .\n",
    );
    assert_eq!(
        code(&sb.run(&["pretrain", "--config", cfg.to_str().unwrap()])),
        3
    );
    let cfg = sb.config("missing.ini", "[pretrain]\nepochs = 1\n");
    assert_eq!(
        code(&sb.run(&["pretrain", "--config", cfg.to_str().unwrap()])),
        3
    );
    let o = sb.run(&["pretrain", "--config", "/definitely/not/here.ini"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn missing_checkpoint_exits_4() {
    let sb = Sandbox::new();
    let cfg = sb.config(
        "ft.ini",
        "[finetune_ad]\ncheckpoint = nowhere.maec\ndatasets = .\n",
    );
    assert_eq!(
        code(&sb.run(&["finetune-ad", "--config", cfg.to_str().unwrap()])),
        4
    );
    assert_eq!(code(&sb.run(&["describe", "nowhere.maec"])), 4);
}

const SMALL: &str = "\
[run]
seed = 11
[synth]
ad_train_count = 1
ad_train_s = 60
ad_calibration_s = 60
ad_test_s = 60
tle_train_s = 180
tle_test_s = 120
[pipeline_ad]
stride_s = 2.5
[pipeline_tle]
stride_s = 10
";

fn train_section(name: &str) -> String {
    format!("[{name}]\nepochs = 2\nwarmup_epochs = 1\nbatch_size = 8\nbase_lr = 1e-3\n")
}

#[test]
fn composable_recipe() {
    let sb = Sandbox::new();
    let gen_cfg = sb.config("gen.ini", SMALL);
    let synth = sb.stage("synth-gen", &gen_cfg, &[]);
    let manifest = fs::read_to_string(synth.join("manifest.csv")).unwrap();
    let hash = fs::read_to_string(synth.join("run.txt"))
        .unwrap()
        .lines()
        .find_map(|l| l.strip_prefix("config_hash=").map(str::to_string))
        .unwrap();
    assert!(manifest.starts_with("file,role,state,seed,config_hash"));
    assert!(manifest.lines().skip(1).all(|l| l.ends_with(&hash)));
    assert_eq!(manifest.lines().count(), 1 + 6);

    let m = synth.join("manifest.csv");
    let pre_cfg = sb.config(
        "pre.ini",
        &format!("{SMALL}[preprocess]\nmanifest = {}\n", m.display()),
    );
    let pre = sb.stage("preprocess", &pre_cfg, &[]);
    let ds = |role: &str| pre.join("datasets").join(role);
    let meta = fs::read_to_string(ds("ad_train").join("meta.txt")).unwrap();
    assert!(meta.contains("config_hash="));
    assert!(read_dataset(&ds("ad_test_damaged"))
        .unwrap()
        .windows
        .iter()
        .all(|w| w.tag.is_some()));
    assert!(read_dataset(&ds("tle_train"))
        .unwrap()
        .windows
        .iter()
        .all(|w| w.target.is_some()));

    let p = |role: &str| ds(role).display().to_string();
    let pt_cfg = sb.config(
        "pt.ini",
        &format!(
            "[model]\ne_dim = 24\nd_dim = 16\n{}datasets = {}, {}\n",
            train_section("pretrain"),
            p("ad_train"),
            p("tle_train")
        ),
    );
    let pt = sb.stage("pretrain", &pt_cfg, &["--threads", "1"]);
    let ckpt = pt.join("model.maec");
    let (_, meta) = load_checkpoint_with_meta(&ckpt).unwrap();
    assert!(meta.provenance.contains(':'));
    assert!(
        fs::read_to_string(pt.join("step_losses.csv"))
            .unwrap()
            .lines()
            .count()
            > 1
    );

    // Same config and seed at one thread: identical loss trajectory.
    let pt2 = sb.stage("pretrain", &pt_cfg, &["--threads", "1"]);
    assert_ne!(pt, pt2);
    assert_eq!(
        fs::read(pt.join("step_losses.csv")).unwrap(),
        fs::read(pt2.join("step_losses.csv")).unwrap()
    );

    let fa_cfg = sb.config(
        "fa.ini",
        &format!(
            "{}checkpoint = {}\ndatasets = {}\n",
            train_section("finetune_ad"),
            ckpt.display(),
            p("ad_train")
        ),
    );
    let fa = sb.stage("finetune-ad", &fa_cfg, &[]);
    let ea_cfg = sb.config(
        "ea.ini",
        &format!(
            "[eval_ad]\ncheckpoint = {}\ntrain = {}\ncalibration = {}\ntest = {}, {}\nfilter_lengths = 1, 3\n",
            fa.join("model.maec").display(),
            p("ad_train"),
            p("ad_calibration"),
            p("ad_test_normal"),
            p("ad_test_damaged")
        ),
    );
    let ea = sb.stage("eval-ad", &ea_cfg, &[]);
    assert!(ea.join("verdicts_L3.csv").is_file());
    assert!(fs::read_to_string(ea.join("metrics.csv"))
        .unwrap()
        .contains("accuracy"));
    // Anomaly fine-tuning refuses damaged windows.
    let bad = sb.config(
        "fa_bad.ini",
        &format!(
            "[finetune_ad]\ncheckpoint = {}\ndatasets = {}\nepochs = 1\n",
            ckpt.display(),
            p("ad_test_damaged")
        ),
    );
    assert_eq!(
        code(&sb.run(&["finetune-ad", "--config", bad.to_str().unwrap()])),
        1
    );

    let ft_cfg = sb.config(
        "ft.ini",
        &format!(
            "{}checkpoint = {}\ndatasets = {}\nvalidation = {}\n",
            train_section("finetune_tle"),
            ckpt.display(),
            p("tle_train"),
            p("tle_test")
        ),
    );
    let ft = sb.stage("finetune-tle", &ft_cfg, &[]);
    let teacher = ft.join("model.maec");
    let et_cfg = sb.config(
        "et.ini",
        &format!(
            "[eval_tle]\ncheckpoint = {}\ntest = {}\n",
            teacher.display(),
            p("tle_test")
        ),
    );
    let et = sb.stage("eval-tle", &et_cfg, &[]);
    assert!(
        fs::read_to_string(et.join("predictions.csv"))
            .unwrap()
            .lines()
            .count()
            > 1
    );

    let kd_cfg = sb.config(
        "kd.ini",
        &format!(
            "{}teacher = {}\nstudent = {}\ndatasets = {}\n[kd]\nalpha_task = 0.25\nalpha_kd = 0.75\n",
            train_section("distill"),
            teacher.display(),
            ckpt.display(),
            p("tle_train")
        ),
    );
    let kd = sb.stage("distill", &kd_cfg, &[]);
    let desc = Command::new(BIN)
        .arg("describe")
        .arg(kd.join("model.maec"))
        .output()
        .unwrap();
    assert!(desc.status.success());
    let text = String::from_utf8(desc.stdout).unwrap();
    assert!(
        text.contains("regression") && text.contains("(24, 16)"),
        "{text}"
    );

    let bl_cfg = sb.config(
        "bl.ini",
        &format!(
            "{SMALL}[baseline]\nmanifest = {}\nfilter_lengths = 1\nk = 3\n",
            m.display()
        ),
    );
    let bl = sb.stage("baseline", &bl_cfg, &[]);
    for f in [
        "pca.pcam",
        "pca_metrics.csv",
        "knn_metrics.csv",
        "linreg_metrics.csv",
    ] {
        assert!(bl.join(f).is_file(), "{f}");
    }

    let ab_cfg = sb.config(
        "ab.ini",
        &format!(
            "[model]\ne_dim = 24\nd_dim = 16\n{}{}[ablation]\ntrain = {}\ntest = {}\nextra = {}\nfraction = 0.5\nseeds = 1\n",
            train_section("pretrain").replace("epochs = 2", "epochs = 1").replace("warmup_epochs = 1", "warmup_epochs = 0"),
            train_section("finetune_tle"),
            p("tle_train"),
            p("tle_test"),
            p("ad_train")
        ),
    );
    let ab = sb.stage("ablation", &ab_cfg, &[]);
    let csv = fs::read_to_string(ab.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3, "{csv}");
}

#[test]
fn tampered_checkpoint_fails_describe() {
    let sb = Sandbox::new();
    let model = shm_fomo::model::MaeModel::<f32>::new(shm_fomo::model::ModelConfig::new(24, 16), 0)
        .unwrap();
    let p = sb.tmp.path().join("m.maec");
    shm_fomo::model::save_checkpoint(&model, &p).unwrap();
    let ok = Command::new(BIN).arg("describe").arg(&p).output().unwrap();
    assert!(ok.status.success());
    let mut bytes = fs::read(&p).unwrap();
    bytes.truncate(bytes.len() - 17);
    fs::write(&p, bytes).unwrap();
    let o = Command::new(BIN).arg("describe").arg(&p).output().unwrap();
    assert_eq!(code(&o), 1);
}
