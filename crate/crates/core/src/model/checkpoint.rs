//! Model checkpoints in the named-tensor container (magic `MAEC`).

use std::path::Path;

use ndarray::ArrayD;

use super::{MaeModel, ModelConfig};
use crate::error::{Error, Result};
use crate::tensorio::{Container, NamedTensor};
use crate::train::AdamConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MAEC";

/// Non-tensor checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub adam: AdamConfig,
    /// Hash of the configuration and seed that produced the weights.
    pub provenance: String,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            provenance: "none".into(),
        }
    }
}

pub fn to_container(model: &MaeModel<f32>, meta: &CheckpointMeta) -> Container {
    let c = &model.config;
    let mut out = Container::default();
    let h = &mut out.header;
    h.insert("e_dim".into(), c.e_dim.to_string());
    h.insert("d_dim".into(), c.d_dim.to_string());
    h.insert("n_blocks".into(), c.n_blocks.to_string());
    h.insert("patch_size".into(), c.patch_size.to_string());
    h.insert("mask_ratio".into(), format!("{:?}", c.mask_ratio));
    h.insert("e_heads".into(), c.e_heads.to_string());
    h.insert("d_heads".into(), c.d_heads.to_string());
    h.insert("mlp_ratio".into(), c.mlp_ratio.to_string());
    h.insert(
        "has_decoder".into(),
        (model.has_decoder() as u8).to_string(),
    );
    h.insert(
        "has_reg_head".into(),
        (model.has_reg_head() as u8).to_string(),
    );
    h.insert("adam_beta1".into(), format!("{:?}", meta.adam.beta1));
    h.insert("adam_beta2".into(), format!("{:?}", meta.adam.beta2));
    h.insert("adam_eps".into(), format!("{:?}", meta.adam.eps));
    h.insert("provenance".into(), meta.provenance.clone());
    out.tensors = model
        .tensors()
        .into_iter()
        .map(|(name, t)| NamedTensor {
            name,
            shape: t.shape().to_vec(),
            data: t.iter().copied().collect(),
        })
        .collect();
    out
}

pub fn from_container(c: &Container) -> Result<(MaeModel<f32>, CheckpointMeta)> {
    let config = ModelConfig {
        e_dim: c.parse_header("e_dim")?,
        d_dim: c.parse_header("d_dim")?,
        n_blocks: c.parse_header("n_blocks")?,
        patch_size: c.parse_header("patch_size")?,
        mask_ratio: c.parse_header("mask_ratio")?,
        e_heads: c.parse_header("e_heads")?,
        d_heads: c.parse_header("d_heads")?,
        mlp_ratio: c.parse_header("mlp_ratio")?,
    };
    let flag = |k: &str| -> Result<bool> {
        match c.header_value(k)? {
            "0" => Ok(false),
            "1" => Ok(true),
            v => Err(Error::format(format!("flag `{k}` has value `{v}`"))),
        }
    };
    let mut model = MaeModel::<f32>::skeleton(config, flag("has_decoder")?, flag("has_reg_head")?)?;
    let meta = CheckpointMeta {
        adam: AdamConfig {
            beta1: c.parse_header("adam_beta1")?,
            beta2: c.parse_header("adam_beta2")?,
            eps: c.parse_header("adam_eps")?,
        },
        provenance: c.header_value("provenance")?.to_string(),
    };
    let mut slots = model.tensors_mut();
    if slots.len() != c.tensors.len() {
        return Err(Error::Integrity(format!(
            "checkpoint holds {} tensors, architecture needs {}",
            c.tensors.len(),
            slots.len()
        )));
    }
    for ((name, dst), src) in slots.iter_mut().zip(&c.tensors) {
        if *name != src.name {
            return Err(Error::Integrity(format!(
                "expected tensor `{name}`, found `{}`",
                src.name
            )));
        }
        if dst.shape() != src.shape.as_slice() {
            return Err(Error::Integrity(format!(
                "tensor `{name}` has shape {:?}, architecture needs {:?}",
                src.shape,
                dst.shape()
            )));
        }
        let arr = ArrayD::from_shape_vec(src.shape.clone(), src.data.clone())
            .map_err(|e| Error::Integrity(e.to_string()))?;
        dst.assign(&arr);
    }
    drop(slots);
    Ok((model, meta))
}

pub fn save_checkpoint_with(
    model: &MaeModel<f32>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    to_container(model, meta).save(CHECKPOINT_MAGIC, path)
}

pub fn save_checkpoint(model: &MaeModel<f32>, path: &Path) -> Result<()> {
    save_checkpoint_with(model, &CheckpointMeta::default(), path)
}

pub fn load_checkpoint_with_meta(path: &Path) -> Result<(MaeModel<f32>, CheckpointMeta)> {
    from_container(&Container::load(CHECKPOINT_MAGIC, path)?)
}

pub fn load_checkpoint(path: &Path) -> Result<MaeModel<f32>> {
    Ok(load_checkpoint_with_meta(path)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.maec");
        let model = MaeModel::<f32>::new(ModelConfig::new(24, 16), 3).unwrap();
        let meta = CheckpointMeta {
            provenance: "abc123".into(),
            ..Default::default()
        };
        save_checkpoint_with(&model, &meta, &p).unwrap();
        let (back, back_meta) = load_checkpoint_with_meta(&p).unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(back_meta, meta);
        for ((n1, a), (n2, b)) in model.tensors().iter().zip(back.tensors().iter()) {
            assert_eq!(n1, n2);
            assert!(a
                .iter()
                .zip(b.iter())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let reg = model.into_regressor(1, 2.0);
        save_checkpoint(&reg, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert!(back.has_reg_head() && !back.has_decoder());
        assert_eq!(back, reg);
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.maec");
        save_checkpoint(
            &MaeModel::<f32>::new(ModelConfig::new(24, 16), 3).unwrap(),
            &p,
        )
        .unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Format(_))));
    }

    #[test]
    fn tampered_shape_is_integrity_error() {
        let model = MaeModel::<f32>::new(ModelConfig::new(24, 16), 3).unwrap();
        let mut c = to_container(&model, &CheckpointMeta::default());
        let t = &mut c.tensors[1];
        t.shape = vec![t.shape[0] - 1];
        t.data.pop();
        assert!(matches!(from_container(&c), Err(Error::Integrity(_))));
    }
}
