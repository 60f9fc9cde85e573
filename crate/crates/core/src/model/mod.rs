//! Transformer masked autoencoder over spectrogram patches.
//!
//! The encoder sees only the visible patches of an image; the decoder fills
//! masked positions with a shared trainable mask token and reconstructs every
//! patch. For traffic regression the decoder is dropped and a single linear
//! unit reads the mean of the encoder's patch latents.

pub mod checkpoint;
pub mod layers;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_with_meta, save_checkpoint, save_checkpoint_with,
    CheckpointMeta,
};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{
    s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, LinalgScalar, ScalarOperand,
};
use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::signal::SPEC_SIZE;
use layers::{
    cast, trunc_normal, Block, BlockCache, LayerNorm, Linear, LnCache, TensorList, TensorListMut,
};

/// Floating-point element type of model tensors.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// The encoder/decoder width family, largest first.
pub const SIZE_FAMILY: [(usize, usize); 6] = [
    (768, 512),
    (384, 256),
    (192, 128),
    (96, 64),
    (48, 32),
    (24, 16),
];

fn default_encoder_heads(dim: usize) -> usize {
    match dim {
        768 => 12,
        384 => 6,
        192 | 96 | 48 | 24 => 3,
        _ => heads_for_width(dim),
    }
}

fn default_decoder_heads(dim: usize) -> usize {
    match dim {
        512 | 256 => 8,
        128 | 64 | 32 => 4,
        16 => 2,
        _ => heads_for_width(dim),
    }
}

/// Largest head count keeping heads at least 8 wide.
fn heads_for_width(dim: usize) -> usize {
    (1..=(dim / 8).max(1))
        .rev()
        .find(|h| dim % h == 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub e_dim: usize,
    pub d_dim: usize,
    pub n_blocks: usize,
    pub patch_size: usize,
    pub mask_ratio: f64,
    pub e_heads: usize,
    pub d_heads: usize,
    pub mlp_ratio: usize,
}

impl ModelConfig {
    /// Default architecture at the given widths: 3+3 blocks, 10x10 patches,
    /// masking ratio 0.8, MLP expansion 4.
    pub fn new(e_dim: usize, d_dim: usize) -> Self {
        Self {
            e_dim,
            d_dim,
            n_blocks: 3,
            patch_size: 10,
            mask_ratio: 0.8,
            e_heads: default_encoder_heads(e_dim),
            d_heads: default_decoder_heads(d_dim),
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || SPEC_SIZE % self.patch_size != 0 {
            return err(format!(
                "patch size {} does not divide {SPEC_SIZE}",
                self.patch_size
            ));
        }
        if self.e_heads == 0 || self.e_dim % self.e_heads != 0 {
            return err(format!(
                "e_dim {} not divisible by {} heads",
                self.e_dim, self.e_heads
            ));
        }
        if self.d_heads == 0 || self.d_dim % self.d_heads != 0 {
            return err(format!(
                "d_dim {} not divisible by {} heads",
                self.d_dim, self.d_heads
            ));
        }
        // 2-D sin-cos tables split each width into four equal bands.
        if self.e_dim % 4 != 0 || self.d_dim % 4 != 0 {
            return err(format!(
                "widths must be multiples of 4, got ({}, {})",
                self.e_dim, self.d_dim
            ));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return err(format!("mask ratio {} outside [0, 1)", self.mask_ratio));
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        SPEC_SIZE / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn encoder_param_count(&self) -> usize {
        Linear::<f32>::param_count(self.patch_dim(), self.e_dim)
            + self.n_blocks * Block::<f32>::param_count(self.e_dim, self.mlp_ratio)
            + 2 * self.e_dim
    }

    pub fn decoder_param_count(&self) -> usize {
        Linear::<f32>::param_count(self.e_dim, self.d_dim)
            + self.d_dim
            + self.n_blocks * Block::<f32>::param_count(self.d_dim, self.mlp_ratio)
            + 2 * self.d_dim
            + Linear::<f32>::param_count(self.d_dim, self.patch_dim())
    }

    /// Trainable scalars of the encoder-decoder; positional tables excluded.
    pub fn param_count(&self) -> usize {
        self.encoder_param_count() + self.decoder_param_count()
    }

    /// Trainable scalars after swapping the decoder for the regression head.
    pub fn regressor_param_count(&self) -> usize {
        self.encoder_param_count() + self.e_dim + 1
    }
}

/// Exact trainable-parameter count of the encoder-decoder for `config`.
pub fn param_count(config: &ModelConfig) -> usize {
    config.param_count()
}

/// Which patches are hidden from the encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    pub masked: Vec<usize>,
    pub visible: Vec<usize>,
    pub seed: u64,
}

impl MaskPlan {
    /// Uniformly random subset of exactly `round(ratio * num_patches)`
    /// patches, deterministic in `seed`. Both index lists are sorted.
    pub fn sample(num_patches: usize, ratio: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::config(format!("mask ratio {ratio} outside [0, 1)")));
        }
        let count = (ratio * num_patches as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masked = rand::seq::index::sample(&mut rng, num_patches, count).into_vec();
        masked.sort_unstable();
        let mut is_masked = vec![false; num_patches];
        for &m in &masked {
            is_masked[m] = true;
        }
        let visible = (0..num_patches).filter(|&i| !is_masked[i]).collect();
        Ok(Self {
            masked,
            visible,
            seed,
        })
    }

    /// Every patch visible.
    pub fn none(num_patches: usize) -> Self {
        Self {
            masked: Vec::new(),
            visible: (0..num_patches).collect(),
            seed: 0,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.masked.len() + self.visible.len()
    }
}

/// Deterministic per-window seed for test-time masking.
pub fn eval_seed(global_seed: u64, window_index: usize) -> u64 {
    global_seed ^ window_index as u64
}

/// Splits a square image into row-major patches, each flattened row-major.
pub fn patchify<F: Copy>(image: ArrayView2<F>, patch_size: usize) -> Result<Array2<F>> {
    let (h, w) = image.dim();
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(Error::config(format!(
            "patch size {patch_size} does not divide image {h}x{w}"
        )));
    }
    let (gh, gw) = (h / patch_size, w / patch_size);
    let pd = patch_size * patch_size;
    let mut out = Vec::with_capacity(h * w);
    for gr in 0..gh {
        for gc in 0..gw {
            for i in 0..patch_size {
                for j in 0..patch_size {
                    out.push(image[[gr * patch_size + i, gc * patch_size + j]]);
                }
            }
        }
    }
    Array2::from_shape_vec((gh * gw, pd), out).map_err(|e| Error::shape(e.to_string()))
}

/// Inverse of [`patchify`] for a square grid.
pub fn depatchify<F: Copy + num_traits::Zero>(
    patches: ArrayView2<F>,
    patch_size: usize,
) -> Result<Array2<F>> {
    let (n, pd) = patches.dim();
    let grid = (n as f64).sqrt().round() as usize;
    if grid * grid != n || pd != patch_size * patch_size {
        return Err(Error::shape(format!(
            "{n} patches of {pd} values do not form a square grid of {patch_size}x{patch_size} patches"
        )));
    }
    let side = grid * patch_size;
    let mut img = Array2::zeros((side, side));
    for (p, row) in patches.outer_iter().enumerate() {
        let (gr, gc) = (p / grid, p % grid);
        for i in 0..patch_size {
            for j in 0..patch_size {
                img[[gr * patch_size + i, gc * patch_size + j]] = row[i * patch_size + j];
            }
        }
    }
    Ok(img)
}

/// Mean squared error over the pixels of masked patches only.
pub fn pretrain_loss<F: Real>(
    pred: ArrayView2<F>,
    truth: ArrayView2<F>,
    plan: &MaskPlan,
    patch_size: usize,
) -> Result<F> {
    if pred.dim() != truth.dim() {
        return Err(Error::shape(format!(
            "{:?} vs {:?}",
            pred.dim(),
            truth.dim()
        )));
    }
    if plan.masked.is_empty() {
        return Err(Error::UndefinedLoss("no masked patches"));
    }
    let p = patchify(pred, patch_size)?;
    let t = patchify(truth, patch_size)?;
    if plan.num_patches() != p.nrows() {
        return Err(Error::shape(format!(
            "plan covers {} patches, image has {}",
            plan.num_patches(),
            p.nrows()
        )));
    }
    let mut sum = F::zero();
    for &m in &plan.masked {
        for (&a, &b) in p.row(m).iter().zip(t.row(m).iter()) {
            sum += (a - b) * (a - b);
        }
    }
    Ok(sum / cast::<F>((plan.masked.len() * p.ncols()) as f64))
}

/// 1-D sin-cos embedding of `positions` into `dim` values (`dim` even).
fn sincos_1d(dim: usize, pos: f64) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let omega = 1.0 / 10000f64.powf(k as f64 / half as f64);
        out[k] = (pos * omega).sin();
        out[half + k] = (pos * omega).cos();
    }
    out
}

/// Fixed 2-D sin-cos positional table, `(grid*grid, dim)`; the first half
/// of each row encodes the patch row, the second half the patch column.
pub fn sincos_table<F: Real>(grid: usize, dim: usize) -> Array2<F> {
    let mut t = Array2::zeros((grid * grid, dim));
    for r in 0..grid {
        for c in 0..grid {
            let row = sincos_1d(dim / 2, r as f64);
            let col = sincos_1d(dim / 2, c as f64);
            let mut dst = t.row_mut(r * grid + c);
            for (k, v) in row.iter().chain(col.iter()).enumerate() {
                dst[k] = cast(*v);
            }
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams<F> {
    pub embed: Linear<F>,
    pub mask_token: Array1<F>,
    pub blocks: Vec<Block<F>>,
    pub norm: LayerNorm<F>,
    pub head: Linear<F>,
}

/// Every trainable tensor of the model. Gradients and optimizer moments use
/// the same structure.
#[derive(Debug, Clone, PartialEq)]
pub struct MaeParams<F> {
    pub patch_embed: Linear<F>,
    pub encoder: Vec<Block<F>>,
    pub encoder_norm: LayerNorm<F>,
    pub decoder: Option<DecoderParams<F>>,
    pub reg_head: Option<Linear<F>>,
}

impl<F: Real> MaeParams<F> {
    pub fn tensors(&self) -> TensorList<'_, F> {
        let mut out = Vec::new();
        layers::visit_linear(&self.patch_embed, "patch_embed", &mut out);
        for (i, b) in self.encoder.iter().enumerate() {
            b.visit(&format!("encoder.{i}"), &mut out);
        }
        layers::visit_norm(&self.encoder_norm, "encoder_norm", &mut out);
        if let Some(d) = &self.decoder {
            layers::visit_linear(&d.embed, "decoder.embed", &mut out);
            out.push(("decoder.mask_token".into(), d.mask_token.view().into_dyn()));
            for (i, b) in d.blocks.iter().enumerate() {
                b.visit(&format!("decoder.{i}"), &mut out);
            }
            layers::visit_norm(&d.norm, "decoder.norm", &mut out);
            layers::visit_linear(&d.head, "decoder.head", &mut out);
        }
        if let Some(h) = &self.reg_head {
            layers::visit_linear(h, "reg_head", &mut out);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> TensorListMut<'_, F> {
        let mut out = Vec::new();
        layers::visit_linear_mut(&mut self.patch_embed, "patch_embed", &mut out);
        for (i, b) in self.encoder.iter_mut().enumerate() {
            b.visit_mut(&format!("encoder.{i}"), &mut out);
        }
        layers::visit_norm_mut(&mut self.encoder_norm, "encoder_norm", &mut out);
        if let Some(d) = &mut self.decoder {
            layers::visit_linear_mut(&mut d.embed, "decoder.embed", &mut out);
            out.push((
                "decoder.mask_token".into(),
                d.mask_token.view_mut().into_dyn(),
            ));
            for (i, b) in d.blocks.iter_mut().enumerate() {
                b.visit_mut(&format!("decoder.{i}"), &mut out);
            }
            layers::visit_norm_mut(&mut d.norm, "decoder.norm", &mut out);
            layers::visit_linear_mut(&mut d.head, "decoder.head", &mut out);
        }
        if let Some(h) = &mut self.reg_head {
            layers::visit_linear_mut(h, "reg_head", &mut out);
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(F::zero());
        z
    }

    pub fn fill(&mut self, v: F) {
        for (_, mut t) in self.tensors_mut() {
            t.fill(v);
        }
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Global L2 norm over all tensors, accumulated in f64.
    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|v| {
                let x = v.to_f64().unwrap_or(f64::NAN);
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: F) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }
}

struct EncoderCache<F> {
    patches: Array2<F>,
    blocks: Vec<BlockCache<F>>,
    norm: LnCache<F>,
    batch: usize,
    seq: usize,
}

struct DecoderCache<F> {
    latent: Array2<F>,
    blocks: Vec<BlockCache<F>>,
    norm: LnCache<F>,
    normed: Array2<F>,
    batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaeModel<F: Real = f32> {
    pub config: ModelConfig,
    pub params: MaeParams<F>,
    enc_pos: Array2<F>,
    dec_pos: Array2<F>,
}

const EVAL_CHUNK: usize = 32;

impl<F: Real> MaeModel<F> {
    /// Freshly initialized encoder-decoder.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let patch_embed = Linear::new(c.patch_dim(), c.e_dim, &mut rng);
        let encoder = (0..c.n_blocks)
            .map(|_| Block::new(c.e_dim, c.e_heads, c.mlp_ratio, &mut rng))
            .collect();
        let embed = Linear::new(c.e_dim, c.d_dim, &mut rng);
        let mask_token = Array1::from_shape_simple_fn(c.d_dim, || trunc_normal(&mut rng, 0.02));
        let blocks = (0..c.n_blocks)
            .map(|_| Block::new(c.d_dim, c.d_heads, c.mlp_ratio, &mut rng))
            .collect();
        let head = Linear::new(c.d_dim, c.patch_dim(), &mut rng);
        let params = MaeParams {
            patch_embed,
            encoder,
            encoder_norm: LayerNorm::new(c.e_dim),
            decoder: Some(DecoderParams {
                embed,
                mask_token,
                blocks,
                norm: LayerNorm::new(c.d_dim),
                head,
            }),
            reg_head: None,
        };
        Ok(Self::from_params(config, params))
    }

    /// Zero-filled model with the given heads, used as a loading target.
    pub fn skeleton(config: ModelConfig, decoder: bool, reg_head: bool) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let params = MaeParams {
            patch_embed: Linear::zeros(c.patch_dim(), c.e_dim),
            encoder: (0..c.n_blocks)
                .map(|_| Block::zeros(c.e_dim, c.e_heads, c.mlp_ratio))
                .collect(),
            encoder_norm: LayerNorm::zeros(c.e_dim),
            decoder: decoder.then(|| DecoderParams {
                embed: Linear::zeros(c.e_dim, c.d_dim),
                mask_token: Array1::zeros(c.d_dim),
                blocks: (0..c.n_blocks)
                    .map(|_| Block::zeros(c.d_dim, c.d_heads, c.mlp_ratio))
                    .collect(),
                norm: LayerNorm::zeros(c.d_dim),
                head: Linear::zeros(c.d_dim, c.patch_dim()),
            }),
            reg_head: reg_head.then(|| Linear::zeros(c.e_dim, 1)),
        };
        Ok(Self::from_params(config, params))
    }

    fn from_params(config: ModelConfig, params: MaeParams<F>) -> Self {
        let grid = config.grid();
        let enc_pos = sincos_table(grid, config.e_dim);
        let dec_pos = sincos_table(grid, config.d_dim);
        Self {
            config,
            params,
            enc_pos,
            dec_pos,
        }
    }

    pub fn has_decoder(&self) -> bool {
        self.params.decoder.is_some()
    }

    pub fn has_reg_head(&self) -> bool {
        self.params.reg_head.is_some()
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Drops the decoder and attaches a fresh regression head whose bias is
    /// `bias_init`.
    pub fn into_regressor(mut self, seed: u64, bias_init: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = Linear::new(self.config.e_dim, 1, &mut rng);
        head.bias[0] = cast(bias_init);
        self.params.decoder = None;
        self.params.reg_head = Some(head);
        self
    }

    /// Zeroes the positional tables (used to test permutation equivariance).
    pub fn zero_positional_tables(&mut self) {
        self.enc_pos.fill(F::zero());
        self.dec_pos.fill(F::zero());
    }

    /// Element-type conversion, e.g. to f64 for gradient checking.
    pub fn cast<G: Real>(&self) -> MaeModel<G> {
        let mut out =
            MaeModel::<G>::skeleton(self.config.clone(), self.has_decoder(), self.has_reg_head())
                .expect("config already validated");
        for ((_, src), (_, mut dst)) in self
            .params
            .tensors()
            .into_iter()
            .zip(out.params.tensors_mut())
        {
            dst.zip_mut_with(&src, |d, &s| *d = G::from_f64(s.to_f64().unwrap()).unwrap());
        }
        out
    }

    fn to_patches(&self, image: ArrayView2<f32>) -> Result<Array2<F>> {
        if image.dim() != (SPEC_SIZE, SPEC_SIZE) {
            return Err(Error::shape(format!(
                "expected {SPEC_SIZE}x{SPEC_SIZE} image, got {:?}",
                image.dim()
            )));
        }
        Ok(patchify(image, self.config.patch_size)?.mapv(|v| F::from_f32(v).unwrap()))
    }

    /// Stacks the `keep` rows of each sample's patches and the matching
    /// positional indices.
    fn gather(&self, patches: &[Array2<F>], keep: &[&[usize]]) -> (Array2<F>, Vec<usize>) {
        let seq = keep[0].len();
        let pd = self.config.patch_dim();
        let mut x = Array2::zeros((patches.len() * seq, pd));
        let mut pos = Vec::with_capacity(patches.len() * seq);
        for (b, (p, k)) in patches.iter().zip(keep).enumerate() {
            for (j, &idx) in k.iter().enumerate() {
                x.row_mut(b * seq + j).assign(&p.row(idx));
                pos.push(idx);
            }
        }
        (x, pos)
    }

    fn encoder_forward(
        &self,
        x: Array2<F>,
        pos: &[usize],
        batch: usize,
    ) -> (Array2<F>, EncoderCache<F>) {
        let seq = x.nrows() / batch;
        let mut h = self.params.patch_embed.forward(x.view());
        for (mut row, &p) in h.outer_iter_mut().zip(pos) {
            row += &self.enc_pos.row(p);
        }
        let mut caches = Vec::with_capacity(self.params.encoder.len());
        for block in &self.params.encoder {
            let (y, c) = block.forward(h.view(), batch, seq);
            caches.push(c);
            h = y;
        }
        let (latent, norm) = self.params.encoder_norm.forward(h.view());
        (
            latent,
            EncoderCache {
                patches: x,
                blocks: caches,
                norm,
                batch,
                seq,
            },
        )
    }

    fn encoder_backward(
        &self,
        cache: &EncoderCache<F>,
        dlatent: ArrayView2<F>,
        grads: &mut MaeParams<F>,
    ) {
        let mut dh =
            self.params
                .encoder_norm
                .backward(&cache.norm, dlatent, &mut grads.encoder_norm);
        for ((block, c), g) in self
            .params
            .encoder
            .iter()
            .zip(&cache.blocks)
            .zip(grads.encoder.iter_mut())
            .rev()
        {
            dh = block.backward(c, dh.view(), cache.batch, cache.seq, g);
        }
        self.params
            .patch_embed
            .accumulate(cache.patches.view(), dh.view(), &mut grads.patch_embed);
    }

    fn decoder(&self) -> Result<&DecoderParams<F>> {
        self.params
            .decoder
            .as_ref()
            .ok_or_else(|| Error::Mode("model has no decoder".into()))
    }

    /// Returns predicted patches `(batch * num_patches, patch_dim)`.
    fn decoder_forward(
        &self,
        latent: Array2<F>,
        plans: &[&MaskPlan],
    ) -> Result<(Array2<F>, DecoderCache<F>)> {
        let dec = self.decoder()?;
        let np = self.config.num_patches();
        let batch = plans.len();
        let seq_vis = latent.nrows() / batch;
        let y = dec.embed.forward(latent.view());
        let mut full = Array2::zeros((batch * np, self.config.d_dim));
        for (b, plan) in plans.iter().enumerate() {
            if plan.visible.len() != seq_vis || plan.num_patches() != np {
                return Err(Error::shape("mask plan does not match latents".to_string()));
            }
            for (j, &idx) in plan.visible.iter().enumerate() {
                full.row_mut(b * np + idx).assign(&y.row(b * seq_vis + j));
            }
            for &idx in &plan.masked {
                full.row_mut(b * np + idx).assign(&dec.mask_token);
            }
            full.slice_mut(s![b * np..(b + 1) * np, ..])
                .scaled_add(F::one(), &self.dec_pos);
        }
        let mut h = full;
        let mut caches = Vec::with_capacity(dec.blocks.len());
        for block in &dec.blocks {
            let (out, c) = block.forward(h.view(), batch, np);
            caches.push(c);
            h = out;
        }
        let (normed, norm) = dec.norm.forward(h.view());
        let pred = dec.head.forward(normed.view());
        Ok((
            pred,
            DecoderCache {
                latent,
                blocks: caches,
                norm,
                normed,
                batch,
            },
        ))
    }

    fn decoder_backward(
        &self,
        cache: &DecoderCache<F>,
        dpred: ArrayView2<F>,
        plans: &[&MaskPlan],
        grads: &mut MaeParams<F>,
    ) -> Result<Array2<F>> {
        let dec = self.decoder()?;
        let gdec = grads
            .decoder
            .as_mut()
            .ok_or_else(|| Error::Mode("gradient buffer has no decoder".into()))?;
        let np = self.config.num_patches();
        let dnormed = dec
            .head
            .backward(cache.normed.view(), dpred, &mut gdec.head);
        let mut dh = dec
            .norm
            .backward(&cache.norm, dnormed.view(), &mut gdec.norm);
        for ((block, c), g) in dec
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(gdec.blocks.iter_mut())
            .rev()
        {
            dh = block.backward(c, dh.view(), cache.batch, np, g);
        }
        let seq_vis = cache.latent.nrows() / cache.batch;
        let mut dy = Array2::zeros((cache.batch * seq_vis, self.config.d_dim));
        for (b, plan) in plans.iter().enumerate() {
            for (j, &idx) in plan.visible.iter().enumerate() {
                dy.row_mut(b * seq_vis + j).assign(&dh.row(b * np + idx));
            }
            for &idx in &plan.masked {
                gdec.mask_token += &dh.row(b * np + idx);
            }
        }
        Ok(dec
            .embed
            .backward(cache.latent.view(), dy.view(), &mut gdec.embed))
    }

    /// Latent vectors of the visible patches (all patches when `plan` is None).
    pub fn encode(&self, image: ArrayView2<f32>, plan: Option<&MaskPlan>) -> Result<Array2<F>> {
        let patches = self.to_patches(image)?;
        let all = MaskPlan::none(self.config.num_patches());
        let plan = plan.unwrap_or(&all);
        if plan.num_patches() != self.config.num_patches() {
            return Err(Error::shape(
                "mask plan does not match patch grid".to_string(),
            ));
        }
        let (x, pos) = self.gather(std::slice::from_ref(&patches), &[&plan.visible]);
        Ok(self.encoder_forward(x, &pos, 1).0)
    }

    /// Decodes latents from [`encode`](Self::encode) into a full image.
    pub fn decode_reconstruct(&self, latents: Array2<F>, plan: &MaskPlan) -> Result<Array2<F>> {
        if latents.nrows() != plan.visible.len() || latents.ncols() != self.config.e_dim {
            return Err(Error::shape(format!(
                "latents {:?} do not match {} visible patches",
                latents.dim(),
                plan.visible.len()
            )));
        }
        let (pred, _) = self.decoder_forward(latents, &[plan])?;
        depatchify(pred.view(), self.config.patch_size)
    }

    /// Full reconstruction of `image` under `plan`.
    pub fn reconstruct(&self, image: ArrayView2<f32>, plan: &MaskPlan) -> Result<Array2<F>> {
        let latents = self.encode(image, Some(plan))?;
        self.decode_reconstruct(latents, plan)
    }

    /// Masked-patch MSE and its gradient for a batch; gradients are
    /// accumulated into `grads`. Returns the batch-mean loss.
    pub fn pretrain_step(
        &self,
        images: &[ArrayView2<f32>],
        plans: &[MaskPlan],
        grads: &mut MaeParams<F>,
    ) -> Result<F> {
        if images.is_empty() || images.len() != plans.len() {
            return Err(Error::shape(
                "images and plans must be non-empty and equal in number".to_string(),
            ));
        }
        let nm = plans[0].masked.len();
        if nm == 0 {
            return Err(Error::UndefinedLoss("no masked patches"));
        }
        if plans
            .iter()
            .any(|p| p.masked.len() != nm || p.num_patches() != self.config.num_patches())
        {
            return Err(Error::shape(
                "mask plans in a batch must share the masked count".to_string(),
            ));
        }
        let patches = images
            .iter()
            .map(|im| self.to_patches(*im))
            .collect::<Result<Vec<_>>>()?;
        let keep: Vec<&[usize]> = plans.iter().map(|p| p.visible.as_slice()).collect();
        let plan_refs: Vec<&MaskPlan> = plans.iter().collect();
        let batch = images.len();
        let (x, pos) = self.gather(&patches, &keep);
        let (latent, enc_cache) = self.encoder_forward(x, &pos, batch);
        let (pred, dec_cache) = self.decoder_forward(latent, &plan_refs)?;

        let np = self.config.num_patches();
        let pd = self.config.patch_dim();
        let norm = cast::<F>((batch * nm * pd) as f64);
        let two = cast::<F>(2.0);
        let mut dpred = Array2::<F>::zeros(pred.raw_dim());
        let mut loss = F::zero();
        for (b, plan) in plans.iter().enumerate() {
            for &m in &plan.masked {
                let row = b * np + m;
                for ((d, &p), &t) in dpred
                    .row_mut(row)
                    .iter_mut()
                    .zip(pred.row(row).iter())
                    .zip(patches[b].row(m).iter())
                {
                    let diff = p - t;
                    loss += diff * diff;
                    *d = two * diff / norm;
                }
            }
        }
        let dlatent = self.decoder_backward(&dec_cache, dpred.view(), &plan_refs, grads)?;
        self.encoder_backward(&enc_cache, dlatent.view(), grads);
        Ok(loss / norm)
    }

    /// Masked-patch MSE for a batch without gradients.
    pub fn pretrain_loss_batch(
        &self,
        images: &[ArrayView2<f32>],
        plans: &[MaskPlan],
    ) -> Result<Vec<f64>> {
        if images.len() != plans.len() {
            return Err(Error::shape(
                "images and plans differ in number".to_string(),
            ));
        }
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let nm = plans[0].masked.len();
        if plans.iter().any(|p| p.masked.len() != nm) {
            return Err(Error::shape(
                "mask plans in a batch must share the masked count".to_string(),
            ));
        }
        let patches = images
            .iter()
            .map(|im| self.to_patches(*im))
            .collect::<Result<Vec<_>>>()?;
        let keep: Vec<&[usize]> = plans.iter().map(|p| p.visible.as_slice()).collect();
        let plan_refs: Vec<&MaskPlan> = plans.iter().collect();
        let (x, pos) = self.gather(&patches, &keep);
        let (latent, _) = self.encoder_forward(x, &pos, images.len());
        let (pred, _) = self.decoder_forward(latent, &plan_refs)?;
        let np = self.config.num_patches();
        let scored: Vec<usize> = if nm == 0 {
            (0..np).collect()
        } else {
            Vec::new()
        };
        Ok(plans
            .iter()
            .enumerate()
            .map(|(b, plan)| {
                let rows = if nm == 0 { &scored } else { &plan.masked };
                let mut sum = 0.0f64;
                for &m in rows {
                    for (&p, &t) in pred.row(b * np + m).iter().zip(patches[b].row(m).iter()) {
                        let d = (p - t).to_f64().unwrap();
                        sum += d * d;
                    }
                }
                sum / (rows.len() * self.config.patch_dim()) as f64
            })
            .collect())
    }

    /// Masked-patch MSE of the reconstruction under a plan drawn with the
    /// model's masking ratio from `eval_seed`. With a zero ratio every patch
    /// is scored.
    pub fn reconstruction_error(&self, image: ArrayView2<f32>, eval_seed: u64) -> Result<f64> {
        Ok(self.reconstruction_errors(&[image], &[eval_seed])?[0])
    }

    /// Batched [`reconstruction_error`](Self::reconstruction_error); chunks
    /// are fixed-size so results do not depend on the worker count.
    pub fn reconstruction_errors(
        &self,
        images: &[ArrayView2<f32>],
        seeds: &[u64],
    ) -> Result<Vec<f64>> {
        if images.len() != seeds.len() {
            return Err(Error::shape("one seed per image required".to_string()));
        }
        self.decoder()?;
        let np = self.config.num_patches();
        let chunks: Vec<Result<Vec<f64>>> = images
            .par_chunks(EVAL_CHUNK)
            .zip(seeds.par_chunks(EVAL_CHUNK))
            .map(|(ims, sds)| {
                let plans = sds
                    .iter()
                    .map(|&s| MaskPlan::sample(np, self.config.mask_ratio, s))
                    .collect::<Result<Vec<_>>>()?;
                self.pretrain_loss_batch(ims, &plans)
            })
            .collect();
        let mut out = Vec::with_capacity(images.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    fn reg_head(&self) -> Result<&Linear<F>> {
        self.params
            .reg_head
            .as_ref()
            .ok_or_else(|| Error::Mode("model has no regression head".into()))
    }

    /// Mean-pooled encoder output through the regression head, batched.
    /// Returns predictions and the state needed for [`regress_backward`].
    fn regress_forward(
        &self,
        images: &[ArrayView2<f32>],
    ) -> Result<(Vec<F>, EncoderCache<F>, Array2<F>)> {
        let head = self.reg_head()?;
        let patches = images
            .iter()
            .map(|im| self.to_patches(*im))
            .collect::<Result<Vec<_>>>()?;
        let np = self.config.num_patches();
        let all: Vec<usize> = (0..np).collect();
        let keep: Vec<&[usize]> = vec![all.as_slice(); images.len()];
        let (x, pos) = self.gather(&patches, &keep);
        let batch = images.len();
        let (latent, cache) = self.encoder_forward(x, &pos, batch);
        let inv = F::one() / cast::<F>(np as f64);
        let mut pooled = Array2::zeros((batch, self.config.e_dim));
        for b in 0..batch {
            let m = latent.slice(s![b * np..(b + 1) * np, ..]).sum_axis(Axis(0));
            pooled.row_mut(b).assign(&(m * inv));
        }
        let y = head.forward(pooled.view());
        Ok((y.column(0).to_vec(), cache, pooled))
    }

    /// Traffic prediction for one image.
    pub fn forward_regress(&self, image: ArrayView2<f32>) -> Result<F> {
        Ok(self.regress_forward(&[image])?.0[0])
    }

    /// Batched inference in fixed-size chunks.
    pub fn predict(&self, images: &[ArrayView2<f32>]) -> Result<Vec<F>> {
        self.reg_head()?;
        let chunks: Vec<Result<Vec<F>>> = images
            .par_chunks(EVAL_CHUNK)
            .map(|ims| Ok(self.regress_forward(ims)?.0))
            .collect();
        let mut out = Vec::with_capacity(images.len());
        for c in chunks {
            out.extend(c?);
        }
        Ok(out)
    }

    /// Regression forward/backward. `loss_fn` maps predictions to
    /// `(loss, dloss/dprediction)`; gradients accumulate into `grads`.
    pub fn regress_step(
        &self,
        images: &[ArrayView2<f32>],
        grads: &mut MaeParams<F>,
        loss_fn: impl FnOnce(&[F]) -> (F, Vec<F>),
    ) -> Result<(F, Vec<F>)> {
        if images.is_empty() {
            return Err(Error::EmptyInput("empty batch"));
        }
        let (preds, cache, pooled) = self.regress_forward(images)?;
        let (loss, dy) = loss_fn(&preds);
        let head = self.reg_head()?;
        let ghead = grads
            .reg_head
            .as_mut()
            .ok_or_else(|| Error::Mode("gradient buffer has no regression head".into()))?;
        let dy =
            Array2::from_shape_vec((dy.len(), 1), dy).map_err(|e| Error::shape(e.to_string()))?;
        let dpooled = head.backward(pooled.view(), dy.view(), ghead);
        let np = self.config.num_patches();
        let inv = F::one() / cast::<F>(np as f64);
        let mut dlatent = Array2::zeros((images.len() * np, self.config.e_dim));
        for (b, row) in dpooled.outer_iter().enumerate() {
            let scaled = &row * inv;
            for r in 0..np {
                dlatent.row_mut(b * np + r).assign(&scaled);
            }
        }
        self.encoder_backward(&cache, dlatent.view(), grads);
        Ok((loss, preds))
    }

    /// Tensor views paired with names, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, F>)> {
        self.params.tensors()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        self.params.tensors_mut()
    }
}
