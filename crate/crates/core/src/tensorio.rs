//! Self-describing named-tensor container.
//!
//! Layout (little-endian): 4-byte magic, `u32` format version, `u32` header
//! length followed by a UTF-8 `key=value` header, `u32` tensor count, then per
//! tensor: `u32` name length, UTF-8 name, `u8` rank, `rank` x `u32` dims and
//! the `f32` data in row-major order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub header: BTreeMap<String, String>,
    pub tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn header_value(&self, key: &str) -> Result<&str> {
        self.header
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(format!("header is missing `{key}`")))
    }

    pub fn parse_header<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.header_value(key)?;
        raw.parse()
            .map_err(|_| Error::format(format!("header `{key}` has invalid value `{raw}`")))
    }

    pub fn write(&self, magic: &[u8; 4], w: &mut impl Write) -> Result<()> {
        w.write_all(magic)?;
        w.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        let mut header = String::new();
        for (k, v) in &self.header {
            if k.contains('=') || k.contains('\n') || v.contains('\n') {
                return Err(Error::format(format!(
                    "header entry `{k}` cannot be encoded"
                )));
            }
            header.push_str(&format!("{k}={v}\n"));
        }
        w.write_u32::<LittleEndian>(header.len() as u32)?;
        w.write_all(header.as_bytes())?;
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        for t in &self.tensors {
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() || t.shape.len() > u8::MAX as usize {
                return Err(Error::shape(format!("tensor `{}`", t.name)));
            }
            w.write_u32::<LittleEndian>(t.name.len() as u32)?;
            w.write_all(t.name.as_bytes())?;
            w.write_u8(t.shape.len() as u8)?;
            for &d in &t.shape {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in &t.data {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read(magic: &[u8; 4], r: &mut impl Read) -> Result<Self> {
        let mut m = [0u8; 4];
        r.read_exact(&mut m).map_err(eof)?;
        if &m != magic {
            return Err(Error::format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = r.read_u32::<LittleEndian>().map_err(eof)?;
        if version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header_len = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let header_bytes = read_vec(r, header_len)?;
        let header_text =
            String::from_utf8(header_bytes).map_err(|_| Error::format("header is not UTF-8"))?;
        let mut header = BTreeMap::new();
        for line in header_text.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(format!("malformed header line `{line}`")))?;
            header.insert(k.to_string(), v.to_string());
        }
        let count = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
            let name = String::from_utf8(read_vec(r, name_len)?)
                .map_err(|_| Error::format("tensor name is not UTF-8"))?;
            let rank = r.read_u8().map_err(eof)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LittleEndian>().map_err(eof)? as usize);
            }
            let len: usize = shape.iter().product();
            let mut data = vec![0f32; len];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(eof)?;
            tensors.push(NamedTensor { name, shape, data });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Integrity("trailing bytes after last tensor".into()));
        }
        Ok(Self { header, tensors })
    }

    pub fn save(&self, magic: &[u8; 4], path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write(magic, &mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(magic: &[u8; 4], path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read(magic, &mut r)
    }
}

fn read_vec(r: &mut impl Read, len: usize) -> Result<Vec<u8>> {
    // Guard against absurd lengths from corrupted files before allocating.
    if len > 1 << 30 {
        return Err(Error::format(format!(
            "declared length {len} is implausible"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(eof)?;
    Ok(buf)
}

fn eof(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("file is truncated")
    } else {
        Error::Io(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut header = BTreeMap::new();
        header.insert("kind".into(), "test".into());
        Container {
            header,
            tensors: vec![
                NamedTensor {
                    name: "a".into(),
                    shape: vec![2, 3],
                    data: vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0],
                },
                NamedTensor {
                    name: "b.bias".into(),
                    shape: vec![1],
                    data: vec![7.0],
                },
            ],
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        let c = sample();
        let mut buf = Vec::new();
        c.write(b"TEST", &mut buf).unwrap();
        let back = Container::read(b"TEST", &mut buf.as_slice()).unwrap();
        assert_eq!(back.header, c.header);
        for (x, y) in back.tensors.iter().zip(&c.tensors) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.shape, y.shape);
            let bx: Vec<u32> = x.data.iter().map(|v| v.to_bits()).collect();
            let by: Vec<u32> = y.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bx, by);
        }
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let mut buf = Vec::new();
        sample().write(b"TEST", &mut buf).unwrap();
        assert!(matches!(
            Container::read(b"MAEC", &mut buf.as_slice()),
            Err(Error::Format(_))
        ));
        let cut = &buf[..buf.len() - 3];
        assert!(matches!(
            Container::read(b"TEST", &mut &cut[..]),
            Err(Error::Format(_))
        ));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(
            Container::read(b"TEST", &mut extra.as_slice()),
            Err(Error::Integrity(_))
        ));
        let mut bad_version = buf;
        bad_version[4] = 9;
        assert!(matches!(
            Container::read(b"TEST", &mut bad_version.as_slice()),
            Err(Error::Format(_))
        ));
    }
}
