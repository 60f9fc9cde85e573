//! Classical comparison methods: PCA reconstruction error for anomaly
//! detection, and k-nearest-neighbour and least-squares regression over
//! per-window statistics for traffic estimation.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::signal::{compute_target, filtered_windows, PipelineConfig, RawRecording};
use crate::tensorio::{Container, NamedTensor};

pub const PCA_MAGIC: &[u8; 4] = b"PCAM";
/// Compression factor: components = window length / CF.
pub const DEFAULT_CF: usize = 32;
pub const DEFAULT_K: usize = 7;
pub const NUM_FEATURES: usize = 8;
const RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// `T x n_comp`, orthonormal columns, descending variance.
    pub components: DMatrix<f64>,
    pub explained_variance: Vec<f64>,
}

/// Flips each column so its largest-magnitude entry is positive.
fn canonical_signs(m: &mut DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        let val = col
            .iter()
            .fold(0.0f64, |a, &v| if v.abs() > a.abs() { v } else { a });
        if val < 0.0 {
            col.neg_mut();
        }
    }
}

fn sorted_eigen(eig: SymmetricEigen<f64, nalgebra::Dyn>) -> (Vec<f64>, DMatrix<f64>) {
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vecs = DMatrix::from_fn(eig.eigenvectors.nrows(), n, |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (vals, vecs)
}

impl PcaModel {
    /// Fits `T / cf` components on normal windows of common length `T`.
    pub fn fit(windows: &[Vec<f64>], cf: usize) -> Result<Self> {
        if cf == 0 {
            return Err(Error::config("compression factor must be >= 1"));
        }
        let t = windows
            .first()
            .map(Vec::len)
            .ok_or(Error::EmptyInput("no windows"))?;
        let n_comp = Self::components_for(t, cf)?;
        Self::fit_components(windows, n_comp)
    }

    pub fn components_for(window_len: usize, cf: usize) -> Result<usize> {
        let n = window_len / cf.max(1);
        if n == 0 {
            return Err(Error::config(format!(
                "window length {window_len} too short for compression factor {cf}"
            )));
        }
        Ok(n)
    }

    pub fn fit_components(windows: &[Vec<f64>], n_comp: usize) -> Result<Self> {
        let n = windows.len();
        let t = windows
            .first()
            .map(Vec::len)
            .ok_or(Error::EmptyInput("no windows"))?;
        if windows.iter().any(|w| w.len() != t) {
            return Err(Error::shape("windows differ in length".to_string()));
        }
        if n_comp == 0 || n_comp > t {
            return Err(Error::config(format!("n_comp {n_comp} outside 1..={t}")));
        }
        if n < n_comp {
            return Err(Error::InsufficientSamples {
                need: n_comp,
                got: n,
            });
        }
        let x = DMatrix::from_fn(n, t, |r, c| windows[r][c]);
        let mean = DVector::from_fn(t, |c, _| x.column(c).mean());
        let mut xc = x;
        for mut row in xc.row_iter_mut() {
            row -= mean.transpose();
        }
        let (vals, mut comps) = if n < t {
            // Dual route: eigenvectors of the n x n Gram matrix mapped back.
            let gram = &xc * xc.transpose();
            let (vals, u) = sorted_eigen(SymmetricEigen::new(gram));
            let mut comps = DMatrix::zeros(t, n_comp);
            for k in 0..n_comp {
                let v = xc.transpose() * u.column(k);
                let norm = v.norm();
                if norm > 1e-12 {
                    comps.set_column(k, &(v / norm));
                }
            }
            // Rank-deficient data: complete the basis deterministically.
            complete_basis(&mut comps);
            (vals, comps)
        } else {
            let cov = xc.transpose() * &xc;
            let (vals, v) = sorted_eigen(SymmetricEigen::new(cov));
            (vals, v.columns(0, n_comp).into_owned())
        };
        canonical_signs(&mut comps);
        let explained_variance = vals
            .iter()
            .take(n_comp)
            .map(|v| v.max(0.0) / n as f64)
            .collect();
        Ok(Self {
            mean,
            components: comps,
            explained_variance,
        })
    }

    pub fn window_len(&self) -> usize {
        self.mean.len()
    }

    pub fn n_comp(&self) -> usize {
        self.components.ncols()
    }

    /// Residual after projecting onto the component span.
    pub fn residual(&self, window: &[f64]) -> Result<DVector<f64>> {
        if window.len() != self.window_len() {
            return Err(Error::shape(format!(
                "window length {} vs model {}",
                window.len(),
                self.window_len()
            )));
        }
        let x = DVector::from_column_slice(window) - &self.mean;
        let coef = self.components.transpose() * &x;
        Ok(&x - &self.components * coef)
    }

    /// Mean squared residual.
    pub fn error(&self, window: &[f64]) -> Result<f64> {
        let r = self.residual(window)?;
        Ok(r.norm_squared() / r.len() as f64)
    }

    pub fn errors(&self, windows: &[Vec<f64>]) -> Result<Vec<f64>> {
        windows.iter().map(|w| self.error(w)).collect()
    }

    pub fn to_container(&self) -> Container {
        let t = self.window_len();
        let k = self.n_comp();
        let mut c = Container::default();
        c.header.insert("window_len".into(), t.to_string());
        c.header.insert("n_comp".into(), k.to_string());
        c.tensors.push(NamedTensor {
            name: "mean".into(),
            shape: vec![t],
            data: self.mean.iter().map(|&v| v as f32).collect(),
        });
        // Row-major T x k.
        let mut data = Vec::with_capacity(t * k);
        for r in 0..t {
            for c in 0..k {
                data.push(self.components[(r, c)] as f32);
            }
        }
        c.tensors.push(NamedTensor {
            name: "components".into(),
            shape: vec![t, k],
            data,
        });
        c.tensors.push(NamedTensor {
            name: "explained_variance".into(),
            shape: vec![k],
            data: self.explained_variance.iter().map(|&v| v as f32).collect(),
        });
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let t: usize = c.parse_header("window_len")?;
        let k: usize = c.parse_header("n_comp")?;
        let get = |name: &str, shape: &[usize]| -> Result<&NamedTensor> {
            let tensor = c
                .tensors
                .iter()
                .find(|x| x.name == name)
                .ok_or_else(|| Error::Integrity(format!("missing tensor `{name}`")))?;
            if tensor.shape != shape || tensor.data.len() != shape.iter().product::<usize>() {
                return Err(Error::Integrity(format!(
                    "tensor `{name}` has shape {:?}",
                    tensor.shape
                )));
            }
            Ok(tensor)
        };
        let mean = get("mean", &[t])?;
        let comps = get("components", &[t, k])?;
        let ev = get("explained_variance", &[k])?;
        Ok(Self {
            mean: DVector::from_iterator(t, mean.data.iter().map(|&v| v as f64)),
            components: DMatrix::from_row_iterator(t, k, comps.data.iter().map(|&v| v as f64)),
            explained_variance: ev.data.iter().map(|&v| v as f64).collect(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(PCA_MAGIC, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(PCA_MAGIC, path)?)
    }
}

/// Gram-Schmidt fill for zero columns left by a rank-deficient fit.
fn complete_basis(comps: &mut DMatrix<f64>) {
    let t = comps.nrows();
    let mut next_axis = 0;
    for k in 0..comps.ncols() {
        if comps.column(k).norm() > 0.5 {
            continue;
        }
        while next_axis < t {
            let mut v = DVector::zeros(t);
            v[next_axis] = 1.0;
            next_axis += 1;
            for j in 0..comps.ncols() {
                if j != k && comps.column(j).norm() > 0.5 {
                    let d = comps.column(j).dot(&v);
                    v -= comps.column(j) * d;
                }
            }
            let n = v.norm();
            if n > 1e-6 {
                comps.set_column(k, &(v / n));
                break;
            }
        }
    }
}

/// `[mean, std, min, max, skewness, kurtosis, rms, zero_crossings]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureVector {
    pub values: [f64; NUM_FEATURES],
    /// Set when the window has zero variance and the moments are defined as 0.
    pub degenerate: bool,
}

pub const FEATURE_NAMES: [&str; NUM_FEATURES] = [
    "mean",
    "std",
    "min",
    "max",
    "skewness",
    "kurtosis",
    "rms",
    "zero_crossings",
];

pub fn extract_features(window: &[f64]) -> Result<FeatureVector> {
    if window.is_empty() {
        return Err(Error::EmptyInput("window"));
    }
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &x in window {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let std = m2.sqrt();
    let min = window.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = window.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let rms = (window.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    let crossings = window
        .windows(2)
        .filter(|p| (p[0] < 0.0 && p[1] >= 0.0) || (p[0] >= 0.0 && p[1] < 0.0))
        .count() as f64;
    let degenerate = m2 <= f64::EPSILON * mean.abs().max(1.0);
    let (skew, kurt) = if degenerate {
        (0.0, 0.0)
    } else {
        (m3 / (m2 * std), m4 / (m2 * m2))
    };
    Ok(FeatureVector {
        values: [mean, std, min, max, skew, kurt, rms, crossings],
        degenerate,
    })
}

/// Per-dimension standardization fitted on training features.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows
            .first()
            .map(Vec::len)
            .ok_or(Error::EmptyInput("feature rows"))?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n;
            }
        }
        let mut scale = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in scale.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        // Constant columns are centered but not scaled.
        let scale = scale
            .into_iter()
            .map(|v| if v > 0.0 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnRegressor {
    pub k: usize,
    standardizer: Standardizer,
    points: Vec<Vec<f64>>,
    targets: Vec<f64>,
}

impl KnnRegressor {
    pub fn fit(features: &[Vec<f64>], targets: &[f64], k: usize) -> Result<Self> {
        if features.len() != targets.len() {
            return Err(Error::shape(
                "features and targets differ in length".to_string(),
            ));
        }
        if k == 0 {
            return Err(Error::config("k must be >= 1"));
        }
        if features.len() < k {
            return Err(Error::InsufficientSamples {
                need: k,
                got: features.len(),
            });
        }
        let standardizer = Standardizer::fit(features)?;
        let points = features.iter().map(|f| standardizer.apply(f)).collect();
        Ok(Self {
            k,
            standardizer,
            points,
            targets: targets.to_vec(),
        })
    }

    /// Mean target of the `k` nearest training points; equal distances go to
    /// the lower training index.
    pub fn predict(&self, query: &[f64]) -> Result<f64> {
        let q = self.standardizer.apply(query);
        if q.len() != self.standardizer.mean.len() {
            return Err(Error::shape("query dimension mismatch".to_string()));
        }
        let mut d: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                (
                    p.iter()
                        .zip(&q)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>(),
                    i,
                )
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(d.iter()
            .take(self.k)
            .map(|&(_, i)| self.targets[i])
            .sum::<f64>()
            / self.k as f64)
    }
}

/// Convenience wrapper: fit and predict in one call.
pub fn knn_predict(
    train_features: &[Vec<f64>],
    train_targets: &[f64],
    query: &[f64],
    k: usize,
) -> Result<f64> {
    KnnRegressor::fit(train_features, train_targets, k)?.predict(query)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearRegressor {
    /// Intercept first, then one coefficient per feature.
    pub coef: Vec<f64>,
}

impl LinearRegressor {
    /// Least squares with intercept through the normal equations, with a
    /// small ridge term so rank-deficient designs stay solvable.
    pub fn fit(features: &[Vec<f64>], targets: &[f64]) -> Result<Self> {
        if features.len() != targets.len() {
            return Err(Error::shape(
                "features and targets differ in length".to_string(),
            ));
        }
        let d = features
            .first()
            .map(Vec::len)
            .ok_or(Error::EmptyInput("feature rows"))?;
        if features.len() < d + 1 {
            return Err(Error::InsufficientSamples {
                need: d + 1,
                got: features.len(),
            });
        }
        let x = DMatrix::from_fn(features.len(), d + 1, |r, c| {
            if c == 0 {
                1.0
            } else {
                features[r][c - 1]
            }
        });
        let y = DVector::from_column_slice(targets);
        let mut xtx = x.transpose() * &x;
        for i in 0..=d {
            xtx[(i, i)] += RIDGE;
        }
        let xty = x.transpose() * y;
        let sol = xtx
            .clone()
            .cholesky()
            .map(|c| c.solve(&xty))
            .or_else(|| xtx.lu().solve(&xty))
            .ok_or_else(|| Error::data("normal equations are singular"))?;
        Ok(Self {
            coef: sol.iter().cloned().collect(),
        })
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        self.coef[0]
            + self.coef[1..]
                .iter()
                .zip(features)
                .map(|(c, x)| c * x)
                .sum::<f64>()
    }
}

/// One normalized time window with its optional regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct RawWindow {
    pub values: Vec<f64>,
    pub target: Option<f64>,
}

/// The windows the spectrogram pipeline would keep, as standardized time
/// series, in the same order.
pub fn raw_windows(recs: &[RawRecording], cfg: &PipelineConfig) -> Result<Vec<RawWindow>> {
    let mut out = Vec::new();
    for rec in recs {
        let (kept, _) = filtered_windows(rec, cfg)?;
        for w in kept {
            let target = match &rec.labels {
                Some(l) => Some(compute_target(
                    &l[w.start_index..w.start_index + w.len()],
                    cfg.vehicle_class,
                )?),
                None => None,
            };
            out.push(RawWindow {
                values: w.values,
                target,
            });
        }
    }
    Ok(out)
}

pub fn feature_rows(windows: &[RawWindow]) -> Result<Vec<Vec<f64>>> {
    windows
        .iter()
        .map(|w| extract_features(&w.values).map(|f| f.values.to_vec()))
        .collect()
}
