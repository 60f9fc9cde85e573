//! On-disk formats for raw recordings and pre-processed datasets.
//!
//! * Recording CSV: header `timestamp,accel_z,label`, one sample per row; the
//!   label column may be empty for unlabelled data.
//! * Recording binary (little-endian): `b"SHM1"`, `u32` fs, `u64` count,
//!   `u8` has_labels, `count` x `f32` samples, then `count` x `u8` labels when
//!   has_labels is 1.
//! * Dataset directory: `records.bin` holding fixed-size records (10000 `f32`
//!   row-major image, `f32` target with NaN for none, `u8` tag with 0 normal,
//!   1 anomaly, 255 none) and a `meta.txt` key=value summary.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use super::{Dataset, RawRecording, SpectrogramWindow, Tag, SPEC_SIZE};
use crate::error::{Error, Result};

pub const RECORDING_MAGIC: &[u8; 4] = b"SHM1";
pub const RECORD_BYTES: usize = SPEC_SIZE * SPEC_SIZE * 4 + 4 + 1;
const RECORDS_FILE: &str = "records.bin";
const META_FILE: &str = "meta.txt";
const TAG_NONE: u8 = 255;

pub fn write_recording_bin(rec: &RawRecording, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(RECORDING_MAGIC)?;
    w.write_u32::<LittleEndian>(rec.fs)?;
    w.write_u64::<LittleEndian>(rec.samples.len() as u64)?;
    w.write_u8(rec.labels.is_some() as u8)?;
    for &s in &rec.samples {
        w.write_f32::<LittleEndian>(s)?;
    }
    if let Some(labels) = &rec.labels {
        w.write_all(labels)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_recording_bin(path: &Path) -> Result<RawRecording> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != RECORDING_MAGIC {
        return Err(Error::format(format!(
            "{}: bad magic {:?}, expected SHM1",
            path.display(),
            magic
        )));
    }
    let fs = r.read_u32::<LittleEndian>().map_err(truncated)?;
    let count = r.read_u64::<LittleEndian>().map_err(truncated)? as usize;
    let has_labels = match r.read_u8().map_err(truncated)? {
        0 => false,
        1 => true,
        other => return Err(Error::format(format!("invalid has_labels flag {other}"))),
    };
    let mut samples = vec![0f32; count];
    r.read_f32_into::<LittleEndian>(&mut samples)
        .map_err(truncated)?;
    let labels = if has_labels {
        let mut labels = vec![0u8; count];
        r.read_exact(&mut labels).map_err(truncated)?;
        Some(labels)
    } else {
        None
    };
    RawRecording::new(samples, fs, labels)
}

pub fn write_recording_csv(rec: &RawRecording, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["timestamp", "accel_z", "label"])
        .map_err(csv_err)?;
    for (i, s) in rec.samples.iter().enumerate() {
        let t = i as f64 / rec.fs as f64;
        let label = rec
            .labels
            .as_ref()
            .map(|l| l[i].to_string())
            .unwrap_or_default();
        w.write_record([format!("{t:.4}"), s.to_string(), label])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a recording CSV. The sampling rate is recovered from the first two
/// timestamps, so at least two rows are required.
pub fn read_recording_csv(path: &Path) -> Result<RawRecording> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut times = Vec::new();
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut any_label = false;
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let t: f64 = field(0)
            .parse()
            .map_err(|_| Error::format(format!("row {row}: bad timestamp `{}`", field(0))))?;
        let a: f32 = field(1)
            .parse()
            .map_err(|_| Error::format(format!("row {row}: bad accel_z `{}`", field(1))))?;
        let l = match field(2) {
            "" => 0,
            s => {
                any_label = true;
                s.parse::<u8>()
                    .map_err(|_| Error::format(format!("row {row}: bad label `{s}`")))?
            }
        };
        times.push(t);
        samples.push(a);
        labels.push(l);
    }
    if times.len() < 2 {
        return Err(Error::EmptyInput("CSV recording needs at least two rows"));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) {
        return Err(Error::format("timestamps must be increasing"));
    }
    let fs = (1.0 / dt).round() as u32;
    RawRecording::new(samples, fs, any_label.then_some(labels))
}

/// Reads a recording, choosing the format by extension (`.csv` or binary).
pub fn read_recording(path: &Path) -> Result<RawRecording> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("csv") => read_recording_csv(path),
        _ => read_recording_bin(path),
    }
}

fn tag_byte(tag: Option<Tag>) -> u8 {
    match tag {
        Some(Tag::Normal) => 0,
        Some(Tag::Anomaly) => 1,
        None => TAG_NONE,
    }
}

fn byte_tag(b: u8) -> Result<Option<Tag>> {
    match b {
        0 => Ok(Some(Tag::Normal)),
        1 => Ok(Some(Tag::Anomaly)),
        TAG_NONE => Ok(None),
        other => Err(Error::format(format!("invalid tag byte {other}"))),
    }
}

/// Writes `records.bin` and `meta.txt` into `dir` (created if missing).
/// `extra_meta` lines are appended to the metadata verbatim.
pub fn write_dataset(ds: &Dataset, dir: &Path, extra_meta: &[(&str, String)]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(RECORDS_FILE))?);
    for win in &ds.windows {
        if win.image.dim() != (SPEC_SIZE, SPEC_SIZE) {
            return Err(Error::shape(format!("image {:?}", win.image.dim())));
        }
        for &v in win.image.iter() {
            w.write_f32::<LittleEndian>(v)?;
        }
        w.write_f32::<LittleEndian>(win.target.unwrap_or(f32::NAN))?;
        w.write_u8(tag_byte(win.tag))?;
    }
    w.flush()?;
    let mut meta = String::new();
    meta.push_str(&format!("count={}\n", ds.len()));
    meta.push_str(&format!("candidates={}\n", ds.candidates));
    meta.push_str(&format!("dropped={}\n", ds.dropped));
    meta.push_str(&format!("record_bytes={RECORD_BYTES}\n"));
    for (k, v) in extra_meta {
        meta.push_str(&format!("{k}={v}\n"));
    }
    fs::write(dir.join(META_FILE), meta)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let bytes = fs::read(dir.join(RECORDS_FILE))?;
    if bytes.len() % RECORD_BYTES != 0 {
        return Err(Error::format(format!(
            "{}: {} bytes is not a multiple of the {RECORD_BYTES}-byte record",
            dir.display(),
            bytes.len()
        )));
    }
    let mut candidates = None;
    let mut dropped = 0;
    if let Ok(meta) = fs::read_to_string(dir.join(META_FILE)) {
        for line in meta.lines() {
            if let Some((k, v)) = line.split_once('=') {
                match k.trim() {
                    "candidates" => candidates = v.trim().parse().ok(),
                    "dropped" => dropped = v.trim().parse().unwrap_or(0),
                    _ => {}
                }
            }
        }
    }
    let mut windows = Vec::with_capacity(bytes.len() / RECORD_BYTES);
    for chunk in bytes.chunks_exact(RECORD_BYTES) {
        let mut r = chunk;
        let mut pixels = vec![0f32; SPEC_SIZE * SPEC_SIZE];
        r.read_f32_into::<LittleEndian>(&mut pixels)?;
        let target = r.read_f32::<LittleEndian>()?;
        let tag = byte_tag(r.read_u8()?)?;
        let image = Array2::from_shape_vec((SPEC_SIZE, SPEC_SIZE), pixels)
            .map_err(|e| Error::shape(e.to_string()))?;
        windows.push(SpectrogramWindow {
            image,
            target: (!target.is_nan()).then_some(target),
            tag,
        });
    }
    let n = windows.len();
    Ok(Dataset {
        windows,
        candidates: candidates.unwrap_or(n + dropped),
        dropped,
    })
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("file is truncated")
    } else {
        Error::Io(e)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::format(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rec(labels: bool) -> RawRecording {
        let samples: Vec<f32> = (0..257).map(|i| (i as f32 * 0.1).sin()).collect();
        let labels = labels.then(|| (0..257).map(|i| (i / 10 % 3) as u8).collect());
        RawRecording::new(samples, 100, labels).unwrap()
    }

    #[test]
    fn binary_recording_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for labels in [false, true] {
            let rec = sample_rec(labels);
            let p = dir.path().join("r.bin");
            write_recording_bin(&rec, &p).unwrap();
            assert_eq!(read_recording(&p).unwrap(), rec);
        }
    }

    #[test]
    fn binary_header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.bin");
        write_recording_bin(&sample_rec(true), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"SHM1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 100);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 257);
        assert_eq!(bytes[16], 1);
        assert_eq!(bytes.len(), 17 + 257 * 4 + 257);
    }

    #[test]
    fn corrupt_recording_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.bin");
        write_recording_bin(&sample_rec(true), &p).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(100);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_recording_bin(&p), Err(Error::Format(_))));
        bytes[0] = b'X';
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_recording_bin(&p), Err(Error::Format(_))));
    }

    #[test]
    fn csv_recording_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for labels in [false, true] {
            let rec = sample_rec(labels);
            let p = dir.path().join("r.csv");
            write_recording_csv(&rec, &p).unwrap();
            assert_eq!(read_recording(&p).unwrap(), rec);
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Array2::from_shape_fn((SPEC_SIZE, SPEC_SIZE), |(i, j)| (i * 3 + j) as f32 * 0.01);
        let ds = Dataset {
            windows: vec![
                SpectrogramWindow {
                    image: img.clone(),
                    target: Some(2.5),
                    tag: None,
                },
                SpectrogramWindow {
                    image: -img,
                    target: None,
                    tag: Some(Tag::Anomaly),
                },
            ],
            candidates: 5,
            dropped: 3,
        };
        write_dataset(&ds, dir.path(), &[("config_hash", "abc".into())]).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.windows, ds.windows);
        assert_eq!(back.candidates, 5);
        assert_eq!(back.dropped, 3);
        let size = fs::metadata(dir.path().join(RECORDS_FILE)).unwrap().len();
        assert_eq!(size as usize, 2 * RECORD_BYTES);
    }
}
