//! Synthetic bridge vibration: damped modal responses re-excited at random
//! times plus sensor noise, an optional stiffness-loss frequency shift, and
//! vehicle passages with camera-style labels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::signal::{RawRecording, VehicleClass};
use crate::train::derive_seed;

/// Samples per camera frame; every label group spans this many samples.
pub const LABEL_GROUP: usize = 10;

const NOISE_STREAM: u64 = 1;
const EXCITE_STREAM: u64 = 2;
const TRAFFIC_STREAM: u64 = 3;
/// Excitations are dropped once their envelope falls below this factor.
const DECAY_CUTOFF: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeConfig {
    pub fs: u32,
    pub modal_freqs: Vec<f64>,
    pub modal_amps: Vec<f64>,
    /// Exponential decay rate per mode (1/s).
    pub damping: Vec<f64>,
    /// Mean ambient re-excitations per second; 0 keeps a single excitation.
    pub reexcite_rate: f64,
    /// Relative standard deviation of a per-excitation frequency
    /// perturbation (environmental variability).
    pub freq_jitter: f64,
    pub noise_std: f64,
    /// Frequency multiplier applied in the damaged state.
    pub anomaly_shift: f64,
    pub seed: u64,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            fs: 100,
            modal_freqs: vec![3.1, 7.4, 12.9, 21.5],
            modal_amps: vec![0.010, 0.006, 0.004, 0.003],
            damping: vec![0.35, 0.5, 0.7, 0.9],
            reexcite_rate: 0.6,
            freq_jitter: 0.01,
            noise_std: 0.001,
            anomaly_shift: 0.93,
            seed: 0,
        }
    }
}

impl BridgeConfig {
    /// One undamped, never re-excited mode without noise.
    pub fn pure_tone(freq: f64, amp: f64) -> Self {
        Self {
            modal_freqs: vec![freq],
            modal_amps: vec![amp],
            damping: vec![0.0],
            reexcite_rate: 0.0,
            freq_jitter: 0.0,
            noise_std: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.modal_freqs.len();
        if self.fs == 0 {
            return Err(Error::config("fs must be positive"));
        }
        if self.modal_amps.len() != n || self.damping.len() != n {
            return Err(Error::config(
                "modal_freqs, modal_amps and damping differ in length",
            ));
        }
        let nyquist = self.fs as f64 / 2.0;
        if self.modal_freqs.iter().any(|&f| !(f > 0.0 && f < nyquist)) {
            return Err(Error::config(format!(
                "modal frequencies must lie in (0, {nyquist})"
            )));
        }
        if self.damping.iter().any(|&d| !(d >= 0.0)) || self.modal_amps.iter().any(|&a| !(a >= 0.0))
        {
            return Err(Error::config("damping and amplitudes must be non-negative"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std must be non-negative"));
        }
        if !(self.anomaly_shift > 0.0 && self.anomaly_shift <= 1.0) {
            return Err(Error::config("anomaly_shift must lie in (0, 1]"));
        }
        if !(self.freq_jitter >= 0.0 && self.freq_jitter < 0.1) {
            return Err(Error::config("freq_jitter must lie in [0, 0.1)"));
        }
        if !(self.reexcite_rate >= 0.0) {
            return Err(Error::config("reexcite_rate must be non-negative"));
        }
        if self.reexcite_rate > 0.0 && self.damping.iter().any(|&d| d == 0.0) {
            return Err(Error::config("re-excited modes need positive damping"));
        }
        Ok(())
    }

    /// Short hex digest of every field, for manifests.
    pub fn hash(&self) -> String {
        short_hash(&format!("{self:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficConfig {
    /// Vehicles per minute.
    pub rate_light: f64,
    pub rate_heavy: f64,
    pub pulse_amp_light: f64,
    pub pulse_amp_heavy: f64,
    pub pulse_dur_s: f64,
    pub seed: u64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self::sparse()
    }
}

impl TrafficConfig {
    /// Low-traffic regime, a handful of crossings per minute.
    pub fn sparse() -> Self {
        Self {
            rate_light: 1.2,
            rate_heavy: 0.4,
            pulse_amp_light: 0.03,
            pulse_amp_heavy: 0.06,
            pulse_dur_s: 3.0,
            seed: 0,
        }
    }

    /// Dense regime with frequent overlaps.
    pub fn dense() -> Self {
        Self {
            rate_light: 8.0,
            rate_heavy: 3.0,
            ..Self::sparse()
        }
    }

    pub fn idle() -> Self {
        Self {
            rate_light: 0.0,
            rate_heavy: 0.0,
            ..Self::sparse()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_light >= 0.0 && self.rate_heavy >= 0.0) {
            return Err(Error::config("arrival rates must be non-negative"));
        }
        if !(self.pulse_amp_heavy > self.pulse_amp_light && self.pulse_amp_light >= 0.0) {
            return Err(Error::config(
                "heavy pulse amplitude must exceed the light one",
            ));
        }
        if !(self.pulse_dur_s >= 0.5) {
            return Err(Error::config("pulse_dur_s must be at least 0.5 s"));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        short_hash(&format!("{self:?}"))
    }
}

pub(crate) fn short_hash(s: &str) -> String {
    let digest = Sha256::digest(s.as_bytes());
    digest[..6].iter().map(|b| format!("{b:02x}")).collect()
}

fn add_damped_mode(
    out: &mut [f64],
    fs: f64,
    start: usize,
    freq: f64,
    amp: f64,
    decay: f64,
    phase: f64,
) {
    let span = if decay > 0.0 {
        ((-DECAY_CUTOFF.ln() / decay) * fs).ceil() as usize
    } else {
        usize::MAX
    };
    let end = start.saturating_add(span).min(out.len());
    let w = std::f64::consts::TAU * freq / fs;
    let k = (-decay / fs).exp();
    let mut env = amp;
    for (i, v) in out[start..end].iter_mut().enumerate() {
        *v += env * (w * i as f64 + phase).sin();
        env *= k;
    }
}

/// Modal response plus noise; the noise and excitation streams depend
/// only on the seed, so normal and damaged recordings differ only in
/// frequency.
fn ambient_signal(cfg: &BridgeConfig, n: usize, damaged: bool) -> Vec<f64> {
    let fs = cfg.fs as f64;
    let shift = if damaged { cfg.anomaly_shift } else { 1.0 };
    let mut out = vec![0.0f64; n];
    let mut ex_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[EXCITE_STREAM]));
    for (m, &f) in cfg.modal_freqs.iter().enumerate() {
        let (amp, decay) = (cfg.modal_amps[m], cfg.damping[m]);
        let mut t = 0.0f64;
        loop {
            let start = (t * fs).round() as usize;
            if start >= n {
                break;
            }
            let scale = ex_rng.gen_range(0.5..1.5);
            let phase = ex_rng.gen_range(0.0..std::f64::consts::TAU);
            let jitter: f64 = ex_rng.sample(rand_distr::StandardNormal);
            let a = if cfg.reexcite_rate > 0.0 {
                amp * scale
            } else {
                amp
            };
            let f_k = f * shift * (1.0 + cfg.freq_jitter * jitter);
            add_damped_mode(&mut out, fs, start, f_k, a, decay, phase);
            if cfg.reexcite_rate <= 0.0 {
                break;
            }
            t += Exp::new(cfg.reexcite_rate)
                .expect("positive rate")
                .sample(&mut ex_rng);
        }
    }
    if cfg.noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[NOISE_STREAM]));
        let normal = Normal::new(0.0, cfg.noise_std).expect("valid std");
        for v in out.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    out
}

fn samples_for(fs: u32, duration_s: f64) -> usize {
    (duration_s * fs as f64).round() as usize
}

/// Ambient vibration; `damaged` scales every modal frequency.
pub fn gen_ambient(cfg: &BridgeConfig, duration_s: f64, damaged: bool) -> Result<RawRecording> {
    cfg.validate()?;
    if !(duration_s >= 1.0) {
        return Err(Error::config("duration must be at least 1 s"));
    }
    let n = samples_for(cfg.fs, duration_s);
    let x = ambient_signal(cfg, n, damaged);
    RawRecording::new(x.into_iter().map(|v| v as f32).collect(), cfg.fs, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vehicle {
    /// Sample index of the crossing start.
    pub arrival: usize,
    /// 1 light, 2 heavy.
    pub class: u8,
    /// First labeled sample; a multiple of [`LABEL_GROUP`].
    pub label_start: usize,
    /// Labeled samples, clipped at the recording end.
    pub label_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrafficRecording {
    pub recording: RawRecording,
    pub vehicles: Vec<Vehicle>,
}

fn arrivals(rate_per_min: f64, duration_s: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::new();
    if rate_per_min <= 0.0 {
        return out;
    }
    let exp = Exp::new(rate_per_min / 60.0).expect("positive rate");
    let mut t = exp.sample(rng);
    while t < duration_s {
        out.push(t);
        t += exp.sample(rng);
    }
    out
}

/// Ambient vibration plus vehicle passages. Each vehicle adds a half-sine
/// modulated pulse lasting `pulse_dur_s` and labels `round(pulse_dur_s)`
/// ten-sample groups starting at the group containing its arrival; where
/// labels overlap the heavier class is kept.
pub fn gen_traffic(
    bridge: &BridgeConfig,
    traffic: &TrafficConfig,
    duration_s: f64,
) -> Result<TrafficRecording> {
    bridge.validate()?;
    traffic.validate()?;
    if !(duration_s >= 60.0) {
        return Err(Error::config("traffic recordings must last at least 60 s"));
    }
    let fs = bridge.fs as f64;
    let n = samples_for(bridge.fs, duration_s);
    let mut x = ambient_signal(bridge, n, false);
    let mut labels = vec![0u8; n];
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed(traffic.seed, &[TRAFFIC_STREAM, bridge.seed]));
    let mut events: Vec<(f64, u8)> = arrivals(traffic.rate_light, duration_s, &mut rng)
        .into_iter()
        .map(|t| (t, 1))
        .chain(
            arrivals(traffic.rate_heavy, duration_s, &mut rng)
                .into_iter()
                .map(|t| (t, 2)),
        )
        .collect();
    events.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let pulse_len = (traffic.pulse_dur_s * fs).round() as usize;
    let label_len = traffic.pulse_dur_s.round() as usize * LABEL_GROUP;
    let carrier = bridge.modal_freqs.first().copied().unwrap_or(3.0);
    let mut vehicles = Vec::with_capacity(events.len());
    for (t, class) in events {
        let arrival = ((t * fs).floor() as usize).min(n - 1);
        let amp = if class == 2 {
            traffic.pulse_amp_heavy
        } else {
            traffic.pulse_amp_light
        } * rng.gen_range(0.8..1.2);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let end = (arrival + pulse_len).min(n);
        for i in arrival..end {
            let tau = (i - arrival) as f64 / pulse_len as f64;
            let env = (std::f64::consts::PI * tau).sin();
            let osc = (std::f64::consts::TAU * carrier * (i - arrival) as f64 / fs + phase).sin();
            x[i] += amp * env * (0.6 + 0.4 * osc);
        }
        let label_start = arrival / LABEL_GROUP * LABEL_GROUP;
        let label_end = (label_start + label_len).min(n);
        for l in &mut labels[label_start..label_end] {
            *l = (*l).max(class);
        }
        vehicles.push(Vehicle {
            arrival,
            class,
            label_start,
            label_len: label_end - label_start,
        });
    }
    let recording = RawRecording::new(
        x.into_iter().map(|v| v as f32).collect(),
        bridge.fs,
        Some(labels),
    )?;
    Ok(TrafficRecording {
        recording,
        vehicles,
    })
}

/// Union length of half-open intervals clipped to `[lo, hi)`.
fn union_len(mut iv: Vec<(usize, usize)>, lo: usize, hi: usize) -> usize {
    iv.retain(|&(a, b)| b > lo && a < hi && b > a);
    iv.sort_unstable();
    let mut total = 0;
    let mut cur: Option<(usize, usize)> = None;
    for (a, b) in iv {
        let (a, b) = (a.max(lo), b.min(hi));
        match cur {
            Some((ca, cb)) if a <= cb => cur = Some((ca, cb.max(b))),
            Some((ca, cb)) => {
                total += cb - ca;
                cur = Some((a, b));
            }
            None => cur = Some((a, b)),
        }
    }
    if let Some((a, b)) = cur {
        total += b - a;
    }
    total
}

/// Target of the window `[start, start + len)` from the vehicle list alone,
/// without looking at the label array.
pub fn expected_target(vehicles: &[Vehicle], start: usize, len: usize, class: VehicleClass) -> f64 {
    let end = start + len;
    let spans = |c: Option<u8>| -> Vec<(usize, usize)> {
        vehicles
            .iter()
            .filter(|v| c.map_or(true, |c| v.class == c))
            .map(|v| (v.label_start, v.label_start + v.label_len))
            .collect()
    };
    let count = match class {
        VehicleClass::Any => union_len(spans(None), start, end),
        VehicleClass::Heavy => union_len(spans(Some(2)), start, end),
        // Light samples are the light union minus whatever a heavy label covers.
        VehicleClass::Light => {
            union_len(spans(None), start, end) - union_len(spans(Some(2)), start, end)
        }
    };
    count as f64 / 10.0
}
