//! Transformer building blocks with explicit forward caches and backward
//! passes. Activations are `(rows, features)` matrices where a batch of `B`
//! sequences of length `n` is stacked into `B * n` rows.

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Real;

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

pub(crate) fn cast<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

/// Normal(0, std) truncated to two standard deviations.
pub(crate) fn trunc_normal<F: Real, R: Rng>(rng: &mut R, std: f64) -> F {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return cast(z * std);
        }
    }
}

pub(crate) type TensorList<'a, F> = Vec<(String, ArrayViewD<'a, F>)>;
pub(crate) type TensorListMut<'a, F> = Vec<(String, ArrayViewMutD<'a, F>)>;

/// Affine map `y = x W + b` with `W` stored as `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Self {
            weight: Array2::from_shape_simple_fn((inputs, outputs), || trunc_normal(rng, INIT_STD)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((inputs, outputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn param_count(inputs: usize, outputs: usize) -> usize {
        inputs * outputs + outputs
    }

    pub fn forward(&self, x: ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<F>, dy: ArrayView2<F>, grad: &mut Linear<F>) -> Array2<F> {
        self.accumulate(x, dy, grad);
        dy.dot(&self.weight.t())
    }

    /// Parameter gradients only, for layers fed directly by data.
    pub fn accumulate(&self, x: ArrayView2<F>, dy: ArrayView2<F>, grad: &mut Linear<F>) {
        ndarray::linalg::general_mat_mul(F::one(), &x.t(), &dy, F::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut TensorList<'a, F>) {
        out.push((format!("{prefix}.weight"), self.weight.view().into_dyn()));
        out.push((format!("{prefix}.bias"), self.bias.view().into_dyn()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut TensorListMut<'a, F>) {
        out.push((
            format!("{prefix}.weight"),
            self.weight.view_mut().into_dyn(),
        ));
        out.push((format!("{prefix}.bias"), self.bias.view_mut().into_dyn()));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct LnCache<F> {
    xhat: Array2<F>,
    rstd: Array1<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<F>) -> (Array2<F>, LnCache<F>) {
        let (rows, dim) = x.dim();
        let inv_dim = F::one() / cast::<F>(dim as f64);
        let eps = cast::<F>(LN_EPS);
        let mut xhat = Array2::zeros((rows, dim));
        let mut rstd = Array1::zeros(rows);
        for ((xr, mut hr), r) in x
            .outer_iter()
            .zip(xhat.outer_iter_mut())
            .zip(rstd.iter_mut())
        {
            let mean = xr.sum() * inv_dim;
            let var = xr.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) * inv_dim;
            let inv = F::one() / (var + eps).sqrt();
            *r = inv;
            Zip::from(&mut hr)
                .and(&xr)
                .for_each(|h, &v| *h = (v - mean) * inv);
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LnCache { xhat, rstd })
    }

    pub fn backward(
        &self,
        cache: &LnCache<F>,
        dy: ArrayView2<F>,
        grad: &mut LayerNorm<F>,
    ) -> Array2<F> {
        grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dim = dy.ncols();
        let inv_dim = F::one() / cast::<F>(dim as f64);
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((dyr, hr), mut dxr), &r) in dy
            .outer_iter()
            .zip(cache.xhat.outer_iter())
            .zip(dx.outer_iter_mut())
            .zip(cache.rstd.iter())
        {
            let mut sum_g = F::zero();
            let mut sum_gh = F::zero();
            for ((&d, &g), &h) in dyr.iter().zip(self.gamma.iter()).zip(hr.iter()) {
                let gh = d * g;
                sum_g += gh;
                sum_gh += gh * h;
            }
            let mg = sum_g * inv_dim;
            let mgh = sum_gh * inv_dim;
            for (((o, &d), &g), &h) in dxr
                .iter_mut()
                .zip(dyr.iter())
                .zip(self.gamma.iter())
                .zip(hr.iter())
            {
                *o = r * (d * g - mg - h * mgh);
            }
        }
        dx
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut TensorList<'a, F>) {
        out.push((format!("{prefix}.gamma"), self.gamma.view().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view().into_dyn()));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut TensorListMut<'a, F>) {
        out.push((format!("{prefix}.gamma"), self.gamma.view_mut().into_dyn()));
        out.push((format!("{prefix}.beta"), self.beta.view_mut().into_dyn()));
    }
}

/// Multi-head self-attention with a fused QKV projection.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<F> {
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    pub heads: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache<F> {
    x: Array2<F>,
    qkv: Array2<F>,
    /// Softmax probabilities, one `(n, n)` matrix per (sequence, head).
    probs: Vec<Array2<F>>,
    ctx: Array2<F>,
}

impl<F: Real> Attention<F> {
    pub fn new<R: Rng>(dim: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
            heads,
        }
    }

    pub fn zeros(dim: usize, heads: usize) -> Self {
        Self {
            qkv: Linear::zeros(dim, 3 * dim),
            proj: Linear::zeros(dim, dim),
            heads,
        }
    }

    pub fn param_count(dim: usize) -> usize {
        Linear::<F>::param_count(dim, 3 * dim) + Linear::<F>::param_count(dim, dim)
    }

    pub fn forward(&self, x: ArrayView2<F>, batch: usize, seq: usize) -> (Array2<F>, AttnCache<F>) {
        let dim = x.ncols();
        let hd = dim / self.heads;
        let scale = F::one() / cast::<F>(hd as f64).sqrt();
        let qkv = self.qkv.forward(x);
        let mut ctx = Array2::zeros((batch * seq, dim));
        let mut probs = Vec::with_capacity(batch * self.heads);
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..self.heads {
                let q = qkv.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
                let k = qkv.slice(s![rows.clone(), dim + h * hd..dim + (h + 1) * hd]);
                let v = qkv.slice(s![rows.clone(), 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
                let mut p = q.dot(&k.t());
                for mut row in p.outer_iter_mut() {
                    let max = row.fold(F::neg_infinity(), |m, &v| m.max(v));
                    let mut sum = F::zero();
                    row.mapv_inplace(|v| {
                        let e = ((v - max) * scale).exp();
                        sum += e;
                        e
                    });
                    row.mapv_inplace(|v| v / sum);
                }
                let out = p.dot(&v);
                ctx.slice_mut(s![rows.clone(), h * hd..(h + 1) * hd])
                    .assign(&out);
                probs.push(p);
            }
        }
        let y = self.proj.forward(ctx.view());
        (
            y,
            AttnCache {
                x: x.to_owned(),
                qkv,
                probs,
                ctx,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &AttnCache<F>,
        dy: ArrayView2<F>,
        batch: usize,
        seq: usize,
        grad: &mut Attention<F>,
    ) -> Array2<F> {
        let dim = dy.ncols();
        let hd = dim / self.heads;
        let scale = F::one() / cast::<F>(hd as f64).sqrt();
        let dctx = self.proj.backward(cache.ctx.view(), dy, &mut grad.proj);
        let mut dqkv = Array2::<F>::zeros((batch * seq, 3 * dim));
        for b in 0..batch {
            let rows = b * seq..(b + 1) * seq;
            for h in 0..self.heads {
                let p = &cache.probs[b * self.heads + h];
                let q = cache.qkv.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
                let k = cache
                    .qkv
                    .slice(s![rows.clone(), dim + h * hd..dim + (h + 1) * hd]);
                let v = cache
                    .qkv
                    .slice(s![rows.clone(), 2 * dim + h * hd..2 * dim + (h + 1) * hd]);
                let dout = dctx.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
                let dv = p.t().dot(&dout);
                let mut ds = dout.dot(&v.t());
                for (mut dsr, pr) in ds.outer_iter_mut().zip(p.outer_iter()) {
                    let dot = dsr
                        .iter()
                        .zip(pr.iter())
                        .fold(F::zero(), |a, (&d, &pp)| a + d * pp);
                    Zip::from(&mut dsr)
                        .and(&pr)
                        .for_each(|d, &pp| *d = pp * (*d - dot) * scale);
                }
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![rows.clone(), h * hd..(h + 1) * hd])
                    .assign(&dq);
                dqkv.slice_mut(s![rows.clone(), dim + h * hd..dim + (h + 1) * hd])
                    .assign(&dk);
                dqkv.slice_mut(s![rows.clone(), 2 * dim + h * hd..2 * dim + (h + 1) * hd])
                    .assign(&dv);
            }
        }
        self.qkv
            .backward(cache.x.view(), dqkv.view(), &mut grad.qkv)
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut TensorList<'a, F>) {
        self.qkv.visit(&format!("{prefix}.qkv"), out);
        self.proj.visit(&format!("{prefix}.proj"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut TensorListMut<'a, F>) {
        self.qkv.visit_mut(&format!("{prefix}.qkv"), out);
        self.proj.visit_mut(&format!("{prefix}.proj"), out);
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

// tanh through exp; libm tanh is several times slower and dominates the
// block cost otherwise.
fn fast_tanh<F: Real>(y: F) -> F {
    let two = cast::<F>(2.0);
    F::one() - two / ((two * y).exp() + F::one())
}

fn gelu_inner<F: Real>(x: F) -> F {
    fast_tanh(cast::<F>(GELU_C) * (x + cast::<F>(GELU_A) * x * x * x))
}

/// GELU from a precomputed `t = tanh(c (x + a x^3))`.
fn gelu_from<F: Real>(x: F, t: F) -> F {
    cast::<F>(0.5) * x * (F::one() + t)
}

fn gelu_grad_from<F: Real>(x: F, t: F) -> F {
    let c = cast::<F>(GELU_C);
    let a = cast::<F>(GELU_A);
    let half = cast::<F>(0.5);
    let three = cast::<F>(3.0);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

#[cfg(test)]
fn gelu<F: Real>(x: F) -> F {
    gelu_from(x, gelu_inner(x))
}

#[cfg(test)]
fn gelu_grad<F: Real>(x: F) -> F {
    gelu_grad_from(x, gelu_inner(x))
}

/// Pre-norm transformer block: `x + Attn(LN(x))` then `x + MLP(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block<F> {
    pub ln1: LayerNorm<F>,
    pub attn: Attention<F>,
    pub ln2: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<F> {
    ln1: LnCache<F>,
    attn: AttnCache<F>,
    ln2: LnCache<F>,
    h_in: Array2<F>,
    pre_act: Array2<F>,
    tanh: Array2<F>,
    act: Array2<F>,
}

impl<F: Real> Block<F> {
    pub fn new<R: Rng>(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(dim),
            attn: Attention::new(dim, heads, rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::new(dim, dim * mlp_ratio, rng),
            fc2: Linear::new(dim * mlp_ratio, dim, rng),
        }
    }

    pub fn zeros(dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            ln1: LayerNorm::zeros(dim),
            attn: Attention::zeros(dim, heads),
            ln2: LayerNorm::zeros(dim),
            fc1: Linear::zeros(dim, dim * mlp_ratio),
            fc2: Linear::zeros(dim * mlp_ratio, dim),
        }
    }

    pub fn param_count(dim: usize, mlp_ratio: usize) -> usize {
        4 * dim
            + Attention::<F>::param_count(dim)
            + Linear::<F>::param_count(dim, dim * mlp_ratio)
            + Linear::<F>::param_count(dim * mlp_ratio, dim)
    }

    pub fn forward(
        &self,
        x: ArrayView2<F>,
        batch: usize,
        seq: usize,
    ) -> (Array2<F>, BlockCache<F>) {
        let (n1, ln1) = self.ln1.forward(x);
        let (a, attn) = self.attn.forward(n1.view(), batch, seq);
        let h = &x + &a;
        let (n2, ln2) = self.ln2.forward(h.view());
        let pre_act = self.fc1.forward(n2.view());
        let tanh = pre_act.mapv(gelu_inner);
        let mut act = Array2::zeros(pre_act.raw_dim());
        Zip::from(&mut act)
            .and(&pre_act)
            .and(&tanh)
            .for_each(|a, &x, &t| *a = gelu_from(x, t));
        let m = self.fc2.forward(act.view());
        let y = &h + &m;
        (
            y,
            BlockCache {
                ln1,
                attn,
                ln2,
                h_in: n2,
                pre_act,
                tanh,
                act,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &BlockCache<F>,
        dy: ArrayView2<F>,
        batch: usize,
        seq: usize,
        grad: &mut Block<F>,
    ) -> Array2<F> {
        let dact = self.fc2.backward(cache.act.view(), dy, &mut grad.fc2);
        let mut dpre = dact;
        Zip::from(&mut dpre)
            .and(&cache.pre_act)
            .and(&cache.tanh)
            .for_each(|d, &x, &t| *d = *d * gelu_grad_from(x, t));
        let dn2 = self
            .fc1
            .backward(cache.h_in.view(), dpre.view(), &mut grad.fc1);
        let mut dh = self.ln2.backward(&cache.ln2, dn2.view(), &mut grad.ln2);
        dh += &dy;
        let dn1 = self
            .attn
            .backward(&cache.attn, dh.view(), batch, seq, &mut grad.attn);
        let mut dx = self.ln1.backward(&cache.ln1, dn1.view(), &mut grad.ln1);
        dx += &dh;
        dx
    }

    pub(crate) fn visit<'a>(&'a self, prefix: &str, out: &mut TensorList<'a, F>) {
        self.ln1.visit(&format!("{prefix}.ln1"), out);
        self.attn.visit(&format!("{prefix}.attn"), out);
        self.ln2.visit(&format!("{prefix}.ln2"), out);
        self.fc1.visit(&format!("{prefix}.fc1"), out);
        self.fc2.visit(&format!("{prefix}.fc2"), out);
    }

    pub(crate) fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut TensorListMut<'a, F>) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), out);
        self.attn.visit_mut(&format!("{prefix}.attn"), out);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), out);
        self.fc1.visit_mut(&format!("{prefix}.fc1"), out);
        self.fc2.visit_mut(&format!("{prefix}.fc2"), out);
    }
}

pub(crate) fn visit_linear<'a, F: Real>(
    l: &'a Linear<F>,
    prefix: &str,
    out: &mut TensorList<'a, F>,
) {
    l.visit(prefix, out)
}

pub(crate) fn visit_linear_mut<'a, F: Real>(
    l: &'a mut Linear<F>,
    prefix: &str,
    out: &mut TensorListMut<'a, F>,
) {
    l.visit_mut(prefix, out)
}

pub(crate) fn visit_norm<'a, F: Real>(
    l: &'a LayerNorm<F>,
    prefix: &str,
    out: &mut TensorList<'a, F>,
) {
    l.visit(prefix, out)
}

pub(crate) fn visit_norm_mut<'a, F: Real>(
    l: &'a mut LayerNorm<F>,
    prefix: &str,
    out: &mut TensorListMut<'a, F>,
) {
    l.visit_mut(prefix, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of `d(sum(y * w))/dx` for a layer closure.
    fn check_input_grad(
        x: &Array2<f64>,
        weights: &Array2<f64>,
        f: impl Fn(&Array2<f64>) -> Array2<f64>,
        analytic: &Array2<f64>,
    ) {
        let h = 1e-6;
        for idx in [(0, 0), (1, 2), (x.nrows() - 1, x.ncols() - 1)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let lp = (&f(&xp) * weights).sum();
            let lm = (&f(&xm) * weights).sum();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - analytic[idx]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "{idx:?}: fd {fd} vs analytic {}",
                analytic[idx]
            );
        }
    }

    #[test]
    fn layernorm_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ln = LayerNorm::<f64>::new(6);
        ln.gamma = Array1::from_shape_simple_fn(6, || rng.gen_range(0.5..1.5));
        let x = rand_mat(4, 6, &mut rng);
        let w = rand_mat(4, 6, &mut rng);
        let (_, cache) = ln.forward(x.view());
        let mut g = LayerNorm::zeros(6);
        let dx = ln.backward(&cache, w.view(), &mut g);
        check_input_grad(&x, &w, |x| ln.forward(x.view()).0, &dx);
    }

    #[test]
    fn attention_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut attn = Attention::<f64>::new(8, 2, &mut rng);
        attn.qkv.weight.mapv_inplace(|v| v * 20.0);
        let x = rand_mat(6, 8, &mut rng);
        let w = rand_mat(6, 8, &mut rng);
        let (_, cache) = attn.forward(x.view(), 2, 3);
        let mut g = Attention::zeros(8, 2);
        let dx = attn.backward(&cache, w.view(), 2, 3, &mut g);
        check_input_grad(&x, &w, |x| attn.forward(x.view(), 2, 3).0, &dx);
    }

    #[test]
    fn block_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut block = Block::<f64>::new(8, 2, 4, &mut rng);
        block.fc1.weight.mapv_inplace(|v| v * 30.0);
        block.attn.qkv.weight.mapv_inplace(|v| v * 20.0);
        let x = rand_mat(6, 8, &mut rng);
        let w = rand_mat(6, 8, &mut rng);
        let (_, cache) = block.forward(x.view(), 2, 3);
        let mut g = Block::zeros(8, 2, 4);
        let dx = block.backward(&cache, w.view(), 2, 3, &mut g);
        check_input_grad(&x, &w, |x| block.forward(x.view(), 2, 3).0, &dx);
    }

    #[test]
    fn fast_tanh_matches_libm() {
        for i in -400..=400 {
            let y = i as f64 * 0.05;
            assert!((fast_tanh(y) - y.tanh()).abs() < 1e-15, "{y}");
            let yf = y as f32;
            assert!((fast_tanh(yf) - yf.tanh()).abs() < 1e-6, "{y}");
        }
        assert_eq!(fast_tanh(1e3f32), 1.0);
        assert_eq!(fast_tanh(-1e3f32), -1.0);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let attn = Attention::<f64>::new(8, 2, &mut rng);
        let x = rand_mat(5, 8, &mut rng);
        let (_, cache) = attn.forward(x.view(), 1, 5);
        for p in &cache.probs {
            for row in p.outer_iter() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }
}
