//! Pre-processing of raw acceleration recordings into model inputs.
//!
//! The pipeline is: windowing, energy filter (on the raw window), per-window
//! standardization, a 100x100 log-magnitude spectrogram and, for labelled
//! recordings, the per-window traffic target.

pub mod io;

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::Array2;
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Side of the square time-frequency image fed to the model.
pub const SPEC_SIZE: usize = 100;
/// FFT length; `FFT_SIZE / 2 + 1 == SPEC_SIZE` one-sided bins.
pub const FFT_SIZE: usize = 198;
/// Smallest window for which 100 frames with a hop of at least one sample exist.
pub const MIN_SPECTROGRAM_LEN: usize = FFT_SIZE + SPEC_SIZE - 1;

const NORMALIZE_EPS: f64 = 1e-8;

/// A uniformly sampled single-axis acceleration series.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub samples: Vec<f32>,
    pub fs: u32,
    /// Per-sample traffic labels in {0, 1, 2}: none, light, heavy.
    pub labels: Option<Vec<u8>>,
}

impl RawRecording {
    pub fn new(samples: Vec<f32>, fs: u32, labels: Option<Vec<u8>>) -> Result<Self> {
        if fs == 0 {
            return Err(Error::config("sampling rate must be positive"));
        }
        if let Some(l) = &labels {
            if l.len() != samples.len() {
                return Err(Error::data(format!(
                    "{} labels for {} samples",
                    l.len(),
                    samples.len()
                )));
            }
        }
        Ok(Self {
            samples,
            fs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Which vehicle class a traffic target counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VehicleClass {
    Light,
    Heavy,
    #[default]
    Any,
}

impl VehicleClass {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "light" | "1" => Ok(Self::Light),
            "heavy" | "2" => Ok(Self::Heavy),
            "any" | "all" => Ok(Self::Any),
            other => Err(Error::config(format!("unknown vehicle class `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Light => "light",
            Self::Heavy => "heavy",
            Self::Any => "any",
        }
    }

    fn matches(self, label: u8) -> bool {
        match self {
            Self::Light => label == 1,
            Self::Heavy => label == 2,
            Self::Any => label != 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub window_s: f64,
    pub stride_s: f64,
    /// Mean squared de-meaned amplitude below which a window is discarded.
    pub energy_threshold: f64,
    pub vehicle_class: VehicleClass,
}

impl PipelineConfig {
    /// Anomaly-detection setting: 5 s windows, 2 s stride.
    pub fn uc1() -> Self {
        Self {
            window_s: 5.0,
            stride_s: 2.0,
            energy_threshold: 3.125e-5,
            vehicle_class: VehicleClass::Any,
        }
    }

    /// Camera-labelled traffic setting: 60 s windows, 2 s stride.
    pub fn uc2(class: VehicleClass) -> Self {
        Self {
            window_s: 60.0,
            stride_s: 2.0,
            energy_threshold: 1.25e-6,
            vehicle_class: class,
        }
    }

    /// Weigh-in-motion setting: 60 s windows, 15 s stride.
    pub fn uc3() -> Self {
        Self {
            window_s: 60.0,
            stride_s: 15.0,
            energy_threshold: 1.25e-6,
            vehicle_class: VehicleClass::Any,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.stride_s > 0.0) || self.window_s < self.stride_s {
            return Err(Error::config(format!(
                "need window_s >= stride_s > 0, got window {} stride {}",
                self.window_s, self.stride_s
            )));
        }
        if !(self.energy_threshold >= 0.0) {
            return Err(Error::config("energy threshold must be non-negative"));
        }
        Ok(())
    }

    /// Window length in samples.
    pub fn window_len(&self, fs: u32) -> usize {
        (self.window_s * fs as f64).round() as usize
    }

    /// Stride in samples.
    pub fn stride_len(&self, fs: u32) -> usize {
        (self.stride_s * fs as f64).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeWindow {
    pub values: Vec<f64>,
    pub start_index: usize,
    pub raw_energy: f64,
}

impl TimeWindow {
    pub fn from_slice(values: &[f32], start_index: usize) -> Self {
        let values: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        let raw_energy = mean_sq_demeaned(&values);
        Self {
            values,
            start_index,
            raw_energy,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Normal,
    Anomaly,
}

impl Tag {
    pub fn is_anomaly(self) -> bool {
        matches!(self, Tag::Anomaly)
    }
}

/// One model input: a standardized log-magnitude spectrogram, rows are time
/// frames and columns frequency bins.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramWindow {
    pub image: Array2<f32>,
    pub target: Option<f32>,
    pub tag: Option<Tag>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub windows: Vec<SpectrogramWindow>,
    /// Windows produced by slicing, before the energy filter.
    pub candidates: usize,
    /// Windows discarded by the energy filter.
    pub dropped: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn with_tag(mut self, tag: Tag) -> Self {
        for w in &mut self.windows {
            w.tag = Some(tag);
        }
        self
    }

    pub fn images(&self) -> Vec<&Array2<f32>> {
        self.windows.iter().map(|w| &w.image).collect()
    }

    pub fn extend(&mut self, other: Dataset) {
        self.windows.extend(other.windows);
        self.candidates += other.candidates;
        self.dropped += other.dropped;
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn mean_sq_demeaned(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64
}

/// Slices a recording into fixed-length windows; the trailing partial window
/// is dropped.
pub fn make_windows(rec: &RawRecording, cfg: &PipelineConfig) -> Result<Vec<TimeWindow>> {
    if rec.is_empty() {
        return Err(Error::EmptyInput("recording has no samples"));
    }
    cfg.validate()?;
    let len = cfg.window_len(rec.fs);
    let stride = cfg.stride_len(rec.fs);
    if len == 0 || stride == 0 {
        return Err(Error::config("window or stride shorter than one sample"));
    }
    let n = rec.len();
    if n < len {
        return Ok(Vec::new());
    }
    let count = (n - len) / stride + 1;
    Ok((0..count)
        .map(|i| {
            let start = i * stride;
            TimeWindow::from_slice(&rec.samples[start..start + len], start)
        })
        .collect())
}

pub fn energy_keep(w: &TimeWindow, threshold: f64) -> bool {
    w.raw_energy >= threshold
}

/// Standardizes a window to zero mean and unit (population) standard
/// deviation. `raw_energy` is carried over unchanged.
pub fn normalize(w: &TimeWindow) -> TimeWindow {
    if w.is_empty() {
        return w.clone();
    }
    let m = mean(&w.values);
    let std = mean_sq_demeaned(&w.values).sqrt();
    let denom = if std < NORMALIZE_EPS {
        NORMALIZE_EPS
    } else {
        std
    };
    let values = if std < NORMALIZE_EPS {
        vec![0.0; w.len()]
    } else {
        w.values.iter().map(|v| (v - m) / denom).collect()
    };
    TimeWindow {
        values,
        start_index: w.start_index,
        raw_energy: w.raw_energy,
    }
}

/// Short-time Fourier transform engine producing the 100x100 model input.
pub struct Stft {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("size", &FFT_SIZE).finish()
    }
}

impl Default for Stft {
    fn default() -> Self {
        Self::new()
    }
}

impl Stft {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(FFT_SIZE);
        Self {
            fft,
            window: hann(FFT_SIZE),
        }
    }

    /// Hop between frames for a window of `len` samples.
    pub fn hop(len: usize) -> Result<usize> {
        if len < MIN_SPECTROGRAM_LEN {
            return Err(Error::config(format!(
                "window of {len} samples cannot produce {SPEC_SIZE} frames (need >= {MIN_SPECTROGRAM_LEN})"
            )));
        }
        Ok((len - FFT_SIZE) / (SPEC_SIZE - 1))
    }

    /// One-sided magnitude spectra `|X|` of the first 100 frames.
    pub fn magnitudes(&self, values: &[f64]) -> Result<Array2<f64>> {
        let hop = Self::hop(values.len())?;
        let mut out = Array2::<f64>::zeros((SPEC_SIZE, SPEC_SIZE));
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        for frame in 0..SPEC_SIZE {
            let start = frame * hop;
            for (k, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(values[start + k] * self.window[k], 0.0);
            }
            self.fft.process(&mut buf);
            for bin in 0..SPEC_SIZE {
                out[[frame, bin]] = buf[bin].norm();
            }
        }
        Ok(out)
    }

    /// `log(1 + |X|)` standardized over the whole image.
    pub fn spectrogram(&self, values: &[f64]) -> Result<Array2<f32>> {
        let mag = self.magnitudes(values)?;
        let logmag = mag.mapv(f64::ln_1p);
        let n = logmag.len() as f64;
        let m = logmag.sum() / n;
        let var = logmag.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let std = var.sqrt().max(NORMALIZE_EPS);
        Ok(logmag.mapv(|v| ((v - m) / std) as f32))
    }
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

thread_local! {
    static STFT: RefCell<Option<Stft>> = const { RefCell::new(None) };
}

/// Spectrogram of a (normalized) time window using a per-thread cached plan.
pub fn spectrogram(values: &[f64]) -> Result<Array2<f32>> {
    STFT.with(|cell| {
        let mut slot = cell.borrow_mut();
        slot.get_or_insert_with(Stft::new).spectrogram(values)
    })
}

/// Traffic target: number of samples carrying the selected class, divided by 10.
pub fn compute_target(labels: &[u8], class: VehicleClass) -> Result<f64> {
    let mut count = 0usize;
    for &l in labels {
        if l > 2 {
            return Err(Error::data(format!("label {l} outside {{0, 1, 2}}")));
        }
        if class.matches(l) {
            count += 1;
        }
    }
    Ok(count as f64 / 10.0)
}

/// Windows that survive the energy filter, standardized, in temporal order.
/// Returns the kept windows and the number of candidates.
pub fn filtered_windows(
    rec: &RawRecording,
    cfg: &PipelineConfig,
) -> Result<(Vec<TimeWindow>, usize)> {
    let windows = make_windows(rec, cfg)?;
    let candidates = windows.len();
    let kept = windows
        .iter()
        .filter(|w| energy_keep(w, cfg.energy_threshold))
        .map(normalize)
        .collect();
    Ok((kept, candidates))
}

/// Window, filter, normalize, transform and attach targets for every
/// recording, preserving temporal order.
pub fn build_dataset(recs: &[RawRecording], cfg: &PipelineConfig) -> Result<Dataset> {
    let mut out = Dataset::default();
    if let Some(first) = recs.first() {
        if recs.iter().any(|r| r.fs != first.fs) {
            return Err(Error::config("recordings have different sampling rates"));
        }
    }
    for rec in recs {
        let (kept, candidates) = filtered_windows(rec, cfg)?;
        out.candidates += candidates;
        out.dropped += candidates - kept.len();
        let windows = kept
            .par_iter()
            .map(|w| {
                let image = spectrogram(&w.values)?;
                let target = match &rec.labels {
                    Some(labels) => Some(compute_target(
                        &labels[w.start_index..w.start_index + w.len()],
                        cfg.vehicle_class,
                    )? as f32),
                    None => None,
                };
                Ok(SpectrogramWindow {
                    image,
                    target,
                    tag: None,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.windows.extend(windows);
    }
    Ok(out)
}

/// Chronological split: the first `floor(n * train_fraction)` items train.
pub fn chronological_split<T>(mut items: Vec<T>, train_fraction: f64) -> (Vec<T>, Vec<T>) {
    let n_train = ((items.len() as f64) * train_fraction.clamp(0.0, 1.0)).floor() as usize;
    let test = items.split_off(n_train);
    (items, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rec(n: usize) -> RawRecording {
        RawRecording::new((0..n).map(|i| i as f32).collect(), 100, None).unwrap()
    }

    #[test]
    fn window_offsets_and_count() {
        let cfg = PipelineConfig::uc1();
        let w = make_windows(&rec(900), &cfg).unwrap();
        assert_eq!(
            w.iter().map(|w| w.start_index).collect::<Vec<_>>(),
            vec![0, 200, 400]
        );
        assert!(w.iter().all(|w| w.len() == 500));
        assert!(make_windows(&rec(400), &cfg).unwrap().is_empty());
        assert!(matches!(
            make_windows(&rec(0), &cfg),
            Err(Error::EmptyInput(_))
        ));
    }

    #[test]
    fn paper_window_settings() {
        assert_eq!(PipelineConfig::uc1().window_len(100), 500);
        assert_eq!(PipelineConfig::uc1().stride_len(100), 200);
        assert_eq!(
            PipelineConfig::uc2(VehicleClass::Light).window_len(100),
            6000
        );
        assert_eq!(PipelineConfig::uc3().stride_len(100), 1500);
        assert_eq!(PipelineConfig::uc1().energy_threshold, 3.125e-5);
        assert_eq!(
            PipelineConfig::uc2(VehicleClass::Heavy).energy_threshold,
            1.25e-6
        );
    }

    #[test]
    fn uc2_candidate_count() {
        // 31 minutes at 100 Hz, 60 s windows, 2 s stride: (186000-6000)/200 + 1.
        let r = RawRecording::new(vec![0.0; 186_000], 100, None).unwrap();
        let w = make_windows(&r, &PipelineConfig::uc2(VehicleClass::Any)).unwrap();
        assert_eq!(w.len(), 901);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = PipelineConfig::uc1();
        cfg.stride_s = 6.0;
        assert!(cfg.validate().is_err());
        cfg.stride_s = 0.0;
        assert!(cfg.validate().is_err());
        cfg = PipelineConfig::uc1();
        cfg.energy_threshold = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn energy_filter_closed_forms() {
        let zero = TimeWindow::from_slice(&[0.0; 500], 0);
        assert!(!energy_keep(&zero, 1e-12));
        let a = 0.01f32;
        let alt: Vec<f32> = (0..500).map(|i| if i % 2 == 0 { a } else { -a }).collect();
        let w = TimeWindow::from_slice(&alt, 0);
        let e = (a as f64) * (a as f64);
        assert_abs_diff_eq!(w.raw_energy, e, epsilon = 1e-15);
        assert!(energy_keep(&w, w.raw_energy));
        assert!(energy_keep(&w, e * 0.9999));
        assert!(!energy_keep(&w, e * 1.0001));
    }

    #[test]
    fn normalize_cases() {
        let w = TimeWindow::from_slice(&[1.0, 3.0, 1.0, 3.0, 1.0, 3.0], 0);
        let n = normalize(&w);
        for (i, v) in n.values.iter().enumerate() {
            let expect = if i % 2 == 0 { -1.0 } else { 1.0 };
            assert_abs_diff_eq!(*v, expect, epsilon = 1e-12);
        }
        let again = normalize(&n);
        for (a, b) in n.values.iter().zip(&again.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
        let c = normalize(&TimeWindow::from_slice(&[4.2; 10], 0));
        assert!(c.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spectrogram_shape_and_short_input() {
        for len in [500usize, 6000, 400] {
            let x: Vec<f64> = (0..len)
                .map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0)
                .collect();
            let s = spectrogram(&x).unwrap();
            assert_eq!(s.dim(), (SPEC_SIZE, SPEC_SIZE));
            assert!(s.iter().all(|v| v.is_finite()));
        }
        assert!(matches!(
            spectrogram(&vec![0.0; 200]),
            Err(Error::Config(_))
        ));
        assert_eq!(Stft::hop(500).unwrap(), 3);
        assert_eq!(Stft::hop(6000).unwrap(), 58);
    }

    #[test]
    fn target_counts() {
        let mut labels = vec![0u8; 500];
        labels[100..130].fill(1);
        assert_eq!(compute_target(&labels, VehicleClass::Light).unwrap(), 3.0);
        assert_eq!(compute_target(&labels, VehicleClass::Heavy).unwrap(), 0.0);
        assert_eq!(compute_target(&labels, VehicleClass::Any).unwrap(), 3.0);
        let zeros = vec![0u8; 500];
        for c in [VehicleClass::Light, VehicleClass::Heavy, VehicleClass::Any] {
            assert_eq!(compute_target(&zeros, c).unwrap(), 0.0);
        }
        // A window edge cutting a 10-sample heavy group in half.
        let mut cut = vec![0u8; 500];
        cut[495..].fill(2);
        assert_eq!(compute_target(&cut, VehicleClass::Heavy).unwrap(), 0.5);
        assert!(compute_target(&[0, 3], VehicleClass::Any).is_err());
    }

    #[test]
    fn dataset_with_labels_and_split() {
        let n = 100 * 60;
        let samples: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37).sin() * 0.1).collect();
        let mut labels = vec![0u8; n];
        labels[0..30].fill(1);
        let r = RawRecording::new(samples, 100, Some(labels)).unwrap();
        let ds = build_dataset(&[r], &PipelineConfig::uc1()).unwrap();
        assert_eq!(ds.candidates, (6000 - 500) / 200 + 1);
        assert_eq!(ds.dropped, 0);
        assert_eq!(ds.windows[0].target, Some(3.0));
        assert_eq!(ds.windows[1].target, Some(0.0));
        let (train, test) = chronological_split(ds.windows, 0.7);
        assert_eq!(train.len(), (28.0f64 * 0.7).floor() as usize);
        assert_eq!(test.len(), 28 - 19);
    }

    #[test]
    fn all_quiet_windows_dropped() {
        let r = RawRecording::new(vec![1e-5; 2000], 100, None).unwrap();
        let ds = build_dataset(&[r], &PipelineConfig::uc1()).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.dropped, ds.candidates);
        assert!(ds.candidates > 0);
    }

    #[test]
    fn mismatched_labels_rejected() {
        assert!(RawRecording::new(vec![0.0; 3], 100, Some(vec![0; 2])).is_err());
        assert!(RawRecording::new(vec![0.0; 3], 0, None).is_err());
    }
}
