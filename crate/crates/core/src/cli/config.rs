//! INI experiment configs. Sections mirror the library types; every key is
//! optional and falls back to the type's default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use sha2::{Digest, Sha256};

use crate::anomaly::ThresholdConfig;
use crate::eval::PercentBase;
use crate::model::ModelConfig;
use crate::signal::{PipelineConfig, VehicleClass};
use crate::synth::{BridgeConfig, TrafficConfig};
use crate::train::{AdamConfig, KdConfig, Phase, TrainPlan};

use super::CliError;

type Res<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
    /// Directory relative paths are resolved against.
    base_dir: PathBuf,
    source: PathBuf,
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Res<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut cfg = Self::parse(&text, &base)?;
        cfg.source = path.to_path_buf();
        Ok(cfg)
    }

    pub fn parse(text: &str, base_dir: &Path) -> Res<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| bad(format!("malformed config: {e}")))?;
        let mut sections = BTreeMap::new();
        for (name, props) in ini.iter() {
            let name = name.unwrap_or("").trim().to_ascii_lowercase();
            let entry: &mut BTreeMap<String, String> = sections.entry(name).or_default();
            for (k, v) in props.iter() {
                entry.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
            }
        }
        Ok(Self {
            sections,
            base_dir: base_dir.to_path_buf(),
            source: PathBuf::new(),
        })
    }

    pub fn source(&self) -> &Path {
        &self.source
    }

    /// Canonical text: sorted sections and keys.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        for (name, props) in &self.sections {
            if props.is_empty() {
                continue;
            }
            s.push_str(&format!("[{name}]\n"));
            for (k, v) in props {
                s.push_str(&format!("{k} = {v}\n"));
            }
        }
        s
    }

    /// SHA-256 over the canonical text, hex.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn has_section(&self, section: &str) -> bool {
        self.sections.get(section).is_some_and(|s| !s.is_empty())
    }

    pub fn get_str(&self, section: &str, key: &str) -> Option<&str> {
        self.sections.get(section)?.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, section: &str, key: &str) -> Res<Option<T>> {
        match self.get_str(section, key) {
            None => Ok(None),
            Some(raw) => raw
                .parse()
                .map(Some)
                .map_err(|_| bad(format!("[{section}] {key} = `{raw}` is not a valid value"))),
        }
    }

    pub fn get_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Res<T> {
        Ok(self.get(section, key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, section: &str, key: &str) -> Res<T> {
        self.get(section, key)?
            .ok_or_else(|| bad(format!("missing required key [{section}] {key}")))
    }

    pub fn get_list<T: FromStr>(&self, section: &str, key: &str) -> Res<Option<Vec<T>>> {
        let Some(raw) = self.get_str(section, key) else {
            return Ok(None);
        };
        raw.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse()
                    .map_err(|_| bad(format!("[{section}] {key}: `{s}` is not a valid list item")))
            })
            .collect::<Res<Vec<T>>>()
            .map(Some)
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let path = PathBuf::from(p);
        if path.is_absolute() {
            path
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn path(&self, section: &str, key: &str) -> Option<PathBuf> {
        self.get_str(section, key).map(|p| self.resolve(p))
    }

    pub fn require_path(&self, section: &str, key: &str) -> Res<PathBuf> {
        self.path(section, key)
            .ok_or_else(|| bad(format!("missing required key [{section}] {key}")))
    }

    pub fn paths(&self, section: &str, key: &str) -> Res<Vec<PathBuf>> {
        Ok(self
            .get_list::<String>(section, key)?
            .unwrap_or_default()
            .iter()
            .map(|p| self.resolve(p))
            .collect())
    }

    pub fn seed(&self) -> Res<Option<u64>> {
        self.get("run", "seed")
    }

    pub fn model(&self, section: &str) -> Res<ModelConfig> {
        let e = self.get_or(section, "e_dim", 24usize)?;
        let d = self.get_or(section, "d_dim", 16usize)?;
        let mut m = ModelConfig::new(e, d);
        m.n_blocks = self.get_or(section, "n_blocks", m.n_blocks)?;
        m.patch_size = self.get_or(section, "patch_size", m.patch_size)?;
        m.mask_ratio = self.get_or(section, "mask_ratio", m.mask_ratio)?;
        m.e_heads = self.get_or(section, "e_heads", m.e_heads)?;
        m.d_heads = self.get_or(section, "d_heads", m.d_heads)?;
        m.mlp_ratio = self.get_or(section, "mlp_ratio", m.mlp_ratio)?;
        m.validate().map_err(|e| bad(e.to_string()))?;
        Ok(m)
    }

    pub fn train_plan(&self, section: &str, phase: Phase) -> Res<TrainPlan> {
        let d = if phase == Phase::FinetuneTle && self.get_str(section, "preset") == Some("large") {
            TrainPlan::finetune_tle_large()
        } else {
            TrainPlan::defaults(phase)
        };
        let adam = AdamConfig {
            beta1: self.get_or(section, "beta1", d.adam.beta1)?,
            beta2: self.get_or(section, "beta2", d.adam.beta2)?,
            eps: self.get_or(section, "eps", d.adam.eps)?,
        };
        let plan = TrainPlan {
            phase,
            base_lr: self.get_or(section, "base_lr", d.base_lr)?,
            weight_decay: self.get_or(section, "weight_decay", d.weight_decay)?,
            epochs: self.get_or(section, "epochs", d.epochs)?,
            batch_size: self.get_or(section, "batch_size", d.batch_size)?,
            warmup_epochs: self.get_or(section, "warmup_epochs", d.warmup_epochs)?,
            mask_ratio: self.get_or(section, "mask_ratio", d.mask_ratio)?,
            seed: 0,
            clip_norm: self.get_or(section, "clip_norm", d.clip_norm)?,
            adam,
        };
        plan.validate()
            .map_err(|e| bad(format!("[{section}]: {e}")))?;
        Ok(plan)
    }

    pub fn kd(&self) -> Res<KdConfig> {
        let d = KdConfig::default();
        let kd = KdConfig {
            alpha_task: self.get_or("kd", "alpha_task", d.alpha_task)?,
            alpha_kd: self.get_or("kd", "alpha_kd", d.alpha_kd)?,
        };
        kd.validate().map_err(|e| bad(e.to_string()))?;
        Ok(kd)
    }

    pub fn threshold(&self) -> Res<ThresholdConfig> {
        let d = ThresholdConfig::default();
        let t = ThresholdConfig {
            step_fraction: self.get_or("threshold", "step_fraction", d.step_fraction)?,
            max_steps: self.get_or("threshold", "max_steps", d.max_steps)?,
        };
        t.validate().map_err(|e| bad(e.to_string()))?;
        Ok(t)
    }

    pub fn percent_base(&self) -> Res<PercentBase> {
        match self.get_str("eval", "percent_base").unwrap_or("predicted") {
            "predicted" => Ok(PercentBase::Predicted),
            "true" => Ok(PercentBase::True),
            other => Err(bad(format!(
                "[eval] percent_base `{other}` must be predicted or true"
            ))),
        }
    }

    /// `[section]` with an optional `preset` of uc1, uc2 or uc3 overridden
    /// key by key.
    pub fn pipeline(&self, section: &str, default: PipelineConfig) -> Res<PipelineConfig> {
        let class = match self.get_str(section, "vehicle_class") {
            Some(c) => VehicleClass::parse(c).map_err(|e| bad(e.to_string()))?,
            None => default.vehicle_class,
        };
        let base = match self.get_str(section, "preset") {
            None => default,
            Some("uc1") => PipelineConfig::uc1(),
            Some("uc2") => PipelineConfig::uc2(class),
            Some("uc3") => PipelineConfig::uc3(),
            Some(other) => return Err(bad(format!("[{section}] unknown preset `{other}`"))),
        };
        let cfg = PipelineConfig {
            window_s: self.get_or(section, "window_s", base.window_s)?,
            stride_s: self.get_or(section, "stride_s", base.stride_s)?,
            energy_threshold: self.get_or(section, "energy_threshold", base.energy_threshold)?,
            vehicle_class: class,
        };
        cfg.validate()
            .map_err(|e| bad(format!("[{section}]: {e}")))?;
        Ok(cfg)
    }

    pub fn bridge(&self) -> Res<BridgeConfig> {
        let d = BridgeConfig::default();
        let cfg = BridgeConfig {
            fs: self.get_or("bridge", "fs", d.fs)?,
            modal_freqs: self
                .get_list("bridge", "modal_freqs")?
                .unwrap_or(d.modal_freqs),
            modal_amps: self
                .get_list("bridge", "modal_amps")?
                .unwrap_or(d.modal_amps),
            damping: self.get_list("bridge", "damping")?.unwrap_or(d.damping),
            reexcite_rate: self.get_or("bridge", "reexcite_rate", d.reexcite_rate)?,
            freq_jitter: self.get_or("bridge", "freq_jitter", d.freq_jitter)?,
            noise_std: self.get_or("bridge", "noise_std", d.noise_std)?,
            anomaly_shift: self.get_or("bridge", "anomaly_shift", d.anomaly_shift)?,
            seed: 0,
        };
        cfg.validate().map_err(|e| bad(format!("[bridge]: {e}")))?;
        Ok(cfg)
    }

    pub fn traffic(&self) -> Res<TrafficConfig> {
        let d = match self.get_str("traffic", "preset") {
            None | Some("sparse") => TrafficConfig::sparse(),
            Some("dense") => TrafficConfig::dense(),
            Some("idle") => TrafficConfig::idle(),
            Some(other) => return Err(bad(format!("[traffic] unknown preset `{other}`"))),
        };
        let cfg = TrafficConfig {
            rate_light: self.get_or("traffic", "rate_light", d.rate_light)?,
            rate_heavy: self.get_or("traffic", "rate_heavy", d.rate_heavy)?,
            pulse_amp_light: self.get_or("traffic", "pulse_amp_light", d.pulse_amp_light)?,
            pulse_amp_heavy: self.get_or("traffic", "pulse_amp_heavy", d.pulse_amp_heavy)?,
            pulse_dur_s: self.get_or("traffic", "pulse_dur_s", d.pulse_dur_s)?,
            seed: 0,
        };
        cfg.validate().map_err(|e| bad(format!("[traffic]: {e}")))?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::parse(text, Path::new("/base")).unwrap()
    }

    #[test]
    fn hash_ignores_order_and_whitespace() {
        let a = cfg("[model]\ne_dim = 48\nd_dim=32\n[train]\nepochs=3\n");
        let b = cfg("[train]\nepochs = 3\n\n[model]\nd_dim = 32\ne_dim=48\n");
        assert_eq!(a.hash(), b.hash());
        let c = cfg("[model]\ne_dim = 48\nd_dim=16\n");
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn typed_sections() {
        let c = cfg("[model]\ne_dim=48\nd_dim=32\n[pretrain]\nepochs=7\nbase_lr=1e-3\nwarmup_epochs=2\n[paths]\ntrain=a,/abs/b\n");
        let m = c.model("model").unwrap();
        assert_eq!((m.e_dim, m.d_dim), (48, 32));
        let p = c.train_plan("pretrain", Phase::Pretrain).unwrap();
        assert_eq!((p.epochs, p.base_lr, p.batch_size), (7, 1e-3, 128));
        assert_eq!(
            c.paths("paths", "train").unwrap(),
            vec![PathBuf::from("/base/a"), PathBuf::from("/abs/b")]
        );
    }

    #[test]
    fn malformed_values_are_config_errors() {
        let c = cfg("[model]\ne_dim=abc\n");
        assert!(matches!(c.model("model"), Err(CliError::Config(_))));
        let c = cfg("[pretrain]\nepochs=5\nwarmup_epochs=9\n");
        assert!(c.train_plan("pretrain", Phase::Pretrain).is_err());
        let c = cfg("[kd]\nalpha_task=0.7\nalpha_kd=0.7\n");
        assert!(c.kd().is_err());
    }

    #[test]
    fn pipeline_presets() {
        let c = cfg("[pipeline]\npreset=uc2\nvehicle_class=heavy\nstride_s=6\n");
        let p = c.pipeline("pipeline", PipelineConfig::uc1()).unwrap();
        assert_eq!(
            (p.window_s, p.stride_s, p.vehicle_class),
            (60.0, 6.0, VehicleClass::Heavy)
        );
        let p = cfg("").pipeline("pipeline", PipelineConfig::uc1()).unwrap();
        assert_eq!(p, PipelineConfig::uc1());
    }
}
