//! The per-song convolutional autoencoder: forward pass, MSE loss and exact
//! analytic gradients, with no ML framework underneath.
//!
//! Architecture, for a `1 x 96 x F` bar (F divisible by 4):
//!
//! ```text
//! encoder: conv 3x3 pad 1 (1 -> 4)  - ReLU - maxpool 2x2   => 4 x 48 x F/2
//!          conv 3x3 pad 1 (4 -> 16) - ReLU - maxpool 2x2   => 16 x 24 x F/4
//!          flatten - fully connected                        => z (d_ls), linear
//! decoder: fully connected - ReLU - reshape                 => 16 x 24 x F/4
//!          tconv 3x3 stride 2 pad 1 outpad 1 (16 -> 4) - ReLU => 4 x 48 x F/2
//!          tconv 3x3 stride 2 pad 1 outpad 1 (4 -> 1)         => 1 x 96 x F
//! ```
//!
//! The latent layer and the output are linear. Convolution padding 1 and
//! transposed-convolution output padding 1 are the unique choices under
//! which the decoder mirrors the encoder's shapes exactly.
//!
//! Convolutions run as im2col + GEMM and the fully connected layers as one
//! GEMM per batch; per-song training touches the order of a teraflop, so the
//! matmul kernels (which dispatch to SIMD at runtime) matter. Everything is
//! generic over the scalar: `f32` for training speed, `f64` for gradient
//! verification.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

/// Scalar type of the network: `f32` for speed, `f64` for verification.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + ndarray::LinalgScalar
    + Send
    + Sync
    + std::fmt::Debug
    + 'static
{
}
impl Real for f32 {}
impl Real for f64 {}

/// Feature maps of the two encoder convolutions.
const C1: usize = 4;
const C2: usize = 16;
const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;
/// Input frames per bar (pooled twice by 2).
const H_IN: usize = 96;

#[derive(Debug, Error)]
pub enum AEError {
    #[error("feature dim {0} is not divisible by 4")]
    FeatureDimNotDivisible(usize),
    #[error("latent dim must be >= 1")]
    LatentDimZero,
    #[error("bar {index} has {got} values, expected {expected}")]
    BarShape {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("empty batch")]
    EmptyBatch,
    #[error("{0} produced a non-finite value (training diverged?)")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("tape does not match this batch: {0}")]
    StaleTape(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint malformed: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AEConfig {
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl AEConfig {
    pub fn new(latent_dim: usize, feature_dim: usize, seed: u64) -> Result<Self, AEError> {
        if feature_dim == 0 || feature_dim % 4 != 0 {
            return Err(AEError::FeatureDimNotDivisible(feature_dim));
        }
        if latent_dim == 0 {
            return Err(AEError::LatentDimZero);
        }
        Ok(Self {
            latent_dim,
            feature_dim,
            seed,
        })
    }
}

/// Spatial sizes derived from the feature dimension.
#[derive(Debug, Clone, Copy)]
struct Dims {
    f: usize,
    d_ls: usize,
    w2: usize, // F/2
    w3: usize, // F/4
    flat: usize,
}

impl Dims {
    fn new(f: usize, d_ls: usize) -> Self {
        Self {
            f,
            d_ls,
            w2: f / 2,
            w3: f / 4,
            flat: C2 * (H_IN / 4) * (f / 4),
        }
    }
}

/// All weights and biases. Also reused as the gradient container
/// ([`Gradients`]), which has the same shapes by definition.
///
/// Layouts (row-major): conv weights `[out_c][in_c][ky][kx]`, transposed-conv
/// weights `[in_c][out_c][ky][kx]`, fully connected `[out][in]` for the
/// encoder and `[out][in]` (out = flat, in = d_ls) for the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct AEParams<T: Real> {
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub enc_conv1_w: Vec<T>,
    pub enc_conv1_b: Vec<T>,
    pub enc_conv2_w: Vec<T>,
    pub enc_conv2_b: Vec<T>,
    pub enc_fc_w: Vec<T>,
    pub enc_fc_b: Vec<T>,
    pub dec_fc_w: Vec<T>,
    pub dec_fc_b: Vec<T>,
    pub dec_tconv1_w: Vec<T>,
    pub dec_tconv1_b: Vec<T>,
    pub dec_tconv2_w: Vec<T>,
    pub dec_tconv2_b: Vec<T>,
}

/// Gradient of the loss with respect to every parameter; same shapes as the
/// parameters themselves.
pub type Gradients<T> = AEParams<T>;

impl<T: Real> AEParams<T> {
    pub fn zeros(config: &AEConfig) -> Self {
        let d = Dims::new(config.feature_dim, config.latent_dim);
        let z = T::zero();
        Self {
            feature_dim: d.f,
            latent_dim: d.d_ls,
            enc_conv1_w: vec![z; C1 * TAPS],
            enc_conv1_b: vec![z; C1],
            enc_conv2_w: vec![z; C2 * C1 * TAPS],
            enc_conv2_b: vec![z; C2],
            enc_fc_w: vec![z; d.d_ls * d.flat],
            enc_fc_b: vec![z; d.d_ls],
            dec_fc_w: vec![z; d.flat * d.d_ls],
            dec_fc_b: vec![z; d.flat],
            dec_tconv1_w: vec![z; C2 * C1 * TAPS],
            dec_tconv1_b: vec![z; C1],
            dec_tconv2_w: vec![z; C1 * TAPS],
            dec_tconv2_b: vec![z; 1],
        }
    }

    fn dims(&self) -> Dims {
        Dims::new(self.feature_dim, self.latent_dim)
    }

    /// Tensors in the canonical (init / checkpoint / update) order.
    pub fn tensors(&self) -> [(&'static str, &Vec<T>); 12] {
        [
            ("enc_conv1_w", &self.enc_conv1_w),
            ("enc_conv1_b", &self.enc_conv1_b),
            ("enc_conv2_w", &self.enc_conv2_w),
            ("enc_conv2_b", &self.enc_conv2_b),
            ("enc_fc_w", &self.enc_fc_w),
            ("enc_fc_b", &self.enc_fc_b),
            ("dec_fc_w", &self.dec_fc_w),
            ("dec_fc_b", &self.dec_fc_b),
            ("dec_tconv1_w", &self.dec_tconv1_w),
            ("dec_tconv1_b", &self.dec_tconv1_b),
            ("dec_tconv2_w", &self.dec_tconv2_w),
            ("dec_tconv2_b", &self.dec_tconv2_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Vec<T>); 12] {
        [
            ("enc_conv1_w", &mut self.enc_conv1_w),
            ("enc_conv1_b", &mut self.enc_conv1_b),
            ("enc_conv2_w", &mut self.enc_conv2_w),
            ("enc_conv2_b", &mut self.enc_conv2_b),
            ("enc_fc_w", &mut self.enc_fc_w),
            ("enc_fc_b", &mut self.enc_fc_b),
            ("dec_fc_w", &mut self.dec_fc_w),
            ("dec_fc_b", &mut self.dec_fc_b),
            ("dec_tconv1_w", &mut self.dec_tconv1_w),
            ("dec_tconv1_b", &mut self.dec_tconv1_b),
            ("dec_tconv2_w", &mut self.dec_tconv2_w),
            ("dec_tconv2_b", &mut self.dec_tconv2_b),
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

}

/// Fan-in per tensor: input channels times kernel area for (transposed)
/// convolutions, input width for the fully connected layers.
fn fan_ins(d: &Dims) -> [usize; 6] {
    [
        TAPS,      // enc_conv1: 1 input channel
        C1 * TAPS, // enc_conv2
        d.flat,    // enc_fc
        d.d_ls,    // dec_fc
        C2 * TAPS, // dec_tconv1
        C1 * TAPS, // dec_tconv2
    ]
}

/// Kaiming-uniform initialization: weights on `[-sqrt(6/fan_in),
/// sqrt(6/fan_in))`, biases on `[-1/sqrt(fan_in), 1/sqrt(fan_in))`.
/// Deterministic for a given seed; the value stream is drawn in f64 so the
/// same seed produces the same network at every precision.
pub fn init_kaiming<T: Real>(config: &AEConfig) -> AEParams<T> {
    let mut params = AEParams::zeros(config);
    let d = params.dims();
    let fans = fan_ins(&d);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for (pair, fan) in params
        .tensors_mut()
        .chunks_exact_mut(2)
        .zip(fans.into_iter())
    {
        let w_bound = (6.0 / fan as f64).sqrt();
        let b_bound = 1.0 / (fan as f64).sqrt();
        for v in pair[0].1.iter_mut() {
            *v = T::from_f64(rng.random_range(-w_bound..w_bound)).unwrap();
        }
        for v in pair[1].1.iter_mut() {
            *v = T::from_f64(rng.random_range(-b_bound..b_bound)).unwrap();
        }
    }
    params
}

// ---------------------------------------------------------------------------
// im2col / col2im kernels
// ---------------------------------------------------------------------------

/// 3x3, pad 1, stride 1 patch extraction: `cols` is `(in_c*9) x (h*w)`
/// row-major; row `(ic*9 + ky*3 + kx)` at column `(oy*w + ox)` holds
/// `input[ic][oy+ky-1][ox+kx-1]` (zero outside).
fn im2col_3x3<T: Real>(input: &[T], in_c: usize, h: usize, w: usize, cols: &mut [T]) {
    let plane = h * w;
    for ic in 0..in_c {
        let ip = &input[ic * plane..(ic + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[(ic * TAPS + ky * KERNEL + kx) * plane..][..plane];
                let ox_lo = 1usize.saturating_sub(kx);
                let ox_hi = (w + 1 - kx).min(w);
                for oy in 0..h {
                    let iy = (oy + ky).wrapping_sub(1);
                    let dst = &mut row[oy * w..(oy + 1) * w];
                    if iy >= h {
                        dst.fill(T::zero());
                        continue;
                    }
                    dst[..ox_lo].fill(T::zero());
                    dst[ox_hi..].fill(T::zero());
                    dst[ox_lo..ox_hi].copy_from_slice(
                        &ip[iy * w + ox_lo + kx - 1..iy * w + ox_hi + kx - 1],
                    );
                }
            }
        }
    }
}

/// Adjoint of [`im2col_3x3`]: scatter-add the column matrix back onto the
/// input grid.
fn col2im_3x3_add<T: Real>(cols: &[T], in_c: usize, h: usize, w: usize, g_in: &mut [T]) {
    let plane = h * w;
    for ic in 0..in_c {
        let gp = &mut g_in[ic * plane..(ic + 1) * plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[(ic * TAPS + ky * KERNEL + kx) * plane..][..plane];
                let ox_lo = 1usize.saturating_sub(kx);
                let ox_hi = (w + 1 - kx).min(w);
                for oy in 0..h {
                    let iy = (oy + ky).wrapping_sub(1);
                    if iy >= h {
                        continue;
                    }
                    let src = &row[oy * w + ox_lo..oy * w + ox_hi];
                    let dst = &mut gp[iy * w + ox_lo + kx - 1..iy * w + ox_hi + kx - 1];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
}

/// Transposed-conv (3x3, stride 2, pad 1, outpad 1) scatter: add
/// `cols[(oc*9 + ky*3 + kx)][iy*iw + ix]` onto `out[oc][2iy-1+ky][2ix-1+kx]`.
/// `out` is `out_c x 2ih x 2iw`, pre-filled with the bias.
fn tconv_scatter_add<T: Real>(cols: &[T], out_c: usize, ih: usize, iw: usize, out: &mut [T]) {
    let (oh, ow) = (2 * ih, 2 * iw);
    let in_plane = ih * iw;
    let out_plane = oh * ow;
    for oc in 0..out_c {
        let op = &mut out[oc * out_plane..(oc + 1) * out_plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &cols[(oc * TAPS + ky * KERNEL + kx) * in_plane..][..in_plane];
                let iy_lo = if ky == 0 { 1 } else { 0 };
                let ix_lo = if kx == 0 { 1 } else { 0 };
                for iy in iy_lo..ih {
                    let oy = 2 * iy + ky - 1;
                    if oy >= oh {
                        break;
                    }
                    let src = &row[iy * iw..(iy + 1) * iw];
                    let dst = &mut op[oy * ow..(oy + 1) * ow];
                    for ix in ix_lo..iw {
                        let ox = 2 * ix + kx - 1;
                        if ox >= ow {
                            break;
                        }
                        dst[ox] = dst[ox] + src[ix];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`tconv_scatter_add`]: gather the output gradient into column
/// form, `cols[(oc*9 + ky*3 + kx)][iy*iw + ix] = g_out[oc][2iy-1+ky][2ix-1+kx]`
/// (zero where the tap falls outside).
fn tconv_gather<T: Real>(g_out: &[T], out_c: usize, ih: usize, iw: usize, cols: &mut [T]) {
    let (oh, ow) = (2 * ih, 2 * iw);
    let in_plane = ih * iw;
    let out_plane = oh * ow;
    for oc in 0..out_c {
        let gp = &g_out[oc * out_plane..(oc + 1) * out_plane];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = &mut cols[(oc * TAPS + ky * KERNEL + kx) * in_plane..][..in_plane];
                for iy in 0..ih {
                    let oy = (2 * iy + ky).wrapping_sub(1);
                    let dst = &mut row[iy * iw..(iy + 1) * iw];
                    if oy >= oh {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &gp[oy * ow..(oy + 1) * ow];
                    for (ix, d) in dst.iter_mut().enumerate() {
                        let ox = (2 * ix + kx).wrapping_sub(1);
                        *d = if ox < ow { src[ox] } else { T::zero() };
                    }
                }
            }
        }
    }
}

fn view<T: Real>(data: &[T], rows: usize, cols: usize) -> ArrayView2<'_, T> {
    ArrayView2::from_shape((rows, cols), data).expect("view shape")
}

fn view_mut<T: Real>(data: &mut [T], rows: usize, cols: usize) -> ArrayViewMut2<'_, T> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("view shape")
}

/// Fused ReLU + 2x2 max pool (stride 2). `idx` records the argmax position
/// (flat index into the `c x h x w` pre-activation), first-encountered in
/// row-major window order on ties, so backward routing is deterministic.
fn relu_pool2x2<T: Real>(pre: &[T], c: usize, h: usize, w: usize, out: &mut [T], idx: &mut [u32]) {
    let plane = h * w;
    let (ph, pw) = (h / 2, w / 2);
    for ch in 0..c {
        let p = &pre[ch * plane..(ch + 1) * plane];
        for py in 0..ph {
            for px in 0..pw {
                let mut best = T::zero();
                let mut best_at = (2 * py) * w + 2 * px;
                let mut first = true;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let at = (2 * py + dy) * w + (2 * px + dx);
                        let v = p[at].max(T::zero());
                        if first || v > best {
                            best = v;
                            best_at = at;
                            first = false;
                        }
                    }
                }
                let o = ch * ph * pw + py * pw + px;
                out[o] = best;
                idx[o] = (ch * plane + best_at) as u32;
            }
        }
    }
}

fn relu_backward_inplace<T: Real>(grad: &mut [T], pre: &[T]) {
    for (g, &p) in grad.iter_mut().zip(pre) {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Cached activations of one bar's forward pass, everything backward needs.
#[derive(Debug, Clone)]
pub struct BarTape<T: Real> {
    pub input: Vec<T>,  // 96 * F
    conv1_pre: Vec<T>,  // C1 * 96 * F
    pool1_out: Vec<T>,  // C1 * 48 * F/2
    pool1_idx: Vec<u32>,
    conv2_pre: Vec<T>,  // C2 * 48 * F/2
    pool2_out: Vec<T>,  // flat
    pool2_idx: Vec<u32>,
    pub latent: Vec<T>, // d_ls
    dec_fc_pre: Vec<T>, // flat
    dec_act: Vec<T>,    // flat
    tconv1_pre: Vec<T>, // C1 * 48 * F/2
    tconv1_act: Vec<T>, // C1 * 48 * F/2
    pub recon: Vec<T>,  // 96 * F
}

/// Outputs of a batched forward pass.
pub struct ForwardPass<T: Real> {
    /// `batch x d_ls`.
    pub latents: Array2<T>,
    /// `batch x 96 x F`.
    pub reconstructions: Array3<T>,
    /// Per-bar activation tapes, in batch order.
    pub tapes: Vec<BarTape<T>>,
}

/// Encoder front (conv blocks) of one bar.
struct FrontTape<T: Real> {
    input: Vec<T>,
    conv1_pre: Vec<T>,
    pool1_out: Vec<T>,
    pool1_idx: Vec<u32>,
    conv2_pre: Vec<T>,
    pool2_out: Vec<T>,
    pool2_idx: Vec<u32>,
}

fn forward_front<T: Real>(params: &AEParams<T>, bar: &[T], d: &Dims) -> FrontTape<T> {
    let (h1, w1) = (H_IN, d.f);
    let (h2, w2) = (H_IN / 2, d.w2);
    let plane1 = h1 * w1;
    let plane2 = h2 * w2;

    // conv1 = W (4 x 9) . im2col(input) (9 x h1*w1), plus bias.
    let mut cols1 = vec![T::zero(); TAPS * plane1];
    im2col_3x3(bar, 1, h1, w1, &mut cols1);
    let mut conv1_pre = vec![T::zero(); C1 * plane1];
    general_mat_mul(
        T::one(),
        &view(&params.enc_conv1_w, C1, TAPS),
        &view(&cols1, TAPS, plane1),
        T::zero(),
        &mut view_mut(&mut conv1_pre, C1, plane1),
    );
    for oc in 0..C1 {
        let b = params.enc_conv1_b[oc];
        for v in &mut conv1_pre[oc * plane1..(oc + 1) * plane1] {
            *v = *v + b;
        }
    }
    let mut pool1_out = vec![T::zero(); C1 * plane2];
    let mut pool1_idx = vec![0u32; C1 * plane2];
    relu_pool2x2(&conv1_pre, C1, h1, w1, &mut pool1_out, &mut pool1_idx);

    // conv2 = W (16 x 36) . im2col(pool1) (36 x h2*w2), plus bias.
    let mut cols2 = vec![T::zero(); C1 * TAPS * plane2];
    im2col_3x3(&pool1_out, C1, h2, w2, &mut cols2);
    let mut conv2_pre = vec![T::zero(); C2 * plane2];
    general_mat_mul(
        T::one(),
        &view(&params.enc_conv2_w, C2, C1 * TAPS),
        &view(&cols2, C1 * TAPS, plane2),
        T::zero(),
        &mut view_mut(&mut conv2_pre, C2, plane2),
    );
    for oc in 0..C2 {
        let b = params.enc_conv2_b[oc];
        for v in &mut conv2_pre[oc * plane2..(oc + 1) * plane2] {
            *v = *v + b;
        }
    }
    let mut pool2_out = vec![T::zero(); d.flat];
    let mut pool2_idx = vec![0u32; d.flat];
    relu_pool2x2(&conv2_pre, C2, h2, w2, &mut pool2_out, &mut pool2_idx);

    FrontTape {
        input: bar.to_vec(),
        conv1_pre,
        pool1_out,
        pool1_idx,
        conv2_pre,
        pool2_out,
        pool2_idx,
    }
}

/// Decoder tail of one bar, from its (already ReLU'd) FC activation.
fn forward_tail<T: Real>(
    params: &AEParams<T>,
    dec_act: &[T],
    d: &Dims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (h2, w2) = (H_IN / 2, d.w2);
    let (h3, w3) = (H_IN / 4, d.w3);
    let plane2 = h2 * w2;
    let plane1 = H_IN * d.f;
    let plane3 = h3 * w3;

    // tconv1: cols (36 x h3*w3) = W^T (36 x 16) . act (16 x h3*w3), then
    // scatter onto the upsampled grid.
    let mut cols = vec![T::zero(); C1 * TAPS * plane3];
    general_mat_mul(
        T::one(),
        &view(&params.dec_tconv1_w, C2, C1 * TAPS).t(),
        &view(dec_act, C2, plane3),
        T::zero(),
        &mut view_mut(&mut cols, C1 * TAPS, plane3),
    );
    let mut tconv1_pre = vec![T::zero(); C1 * plane2];
    for oc in 0..C1 {
        tconv1_pre[oc * plane2..(oc + 1) * plane2].fill(params.dec_tconv1_b[oc]);
    }
    tconv_scatter_add(&cols, C1, h3, w3, &mut tconv1_pre);
    let tconv1_act: Vec<T> = tconv1_pre.iter().map(|&v| v.max(T::zero())).collect();

    let mut cols2 = vec![T::zero(); TAPS * plane2];
    general_mat_mul(
        T::one(),
        &view(&params.dec_tconv2_w, C1, TAPS).t(),
        &view(&tconv1_act, C1, plane2),
        T::zero(),
        &mut view_mut(&mut cols2, TAPS, plane2),
    );
    let mut recon = vec![params.dec_tconv2_b[0]; plane1];
    tconv_scatter_add(&cols2, 1, h2, w2, &mut recon);

    (tconv1_pre, tconv1_act, recon)
}

/// Batched forward pass. The convolutional stages run bar-parallel; the two
/// fully connected layers run as one GEMM over the whole batch. Outputs are
/// assembled in batch order, so the result is identical for any thread
/// count.
pub fn forward<T: Real>(
    params: &AEParams<T>,
    batch: ArrayView3<'_, T>,
) -> Result<ForwardPass<T>, AEError> {
    let d = params.dims();
    let (n, h, w) = batch.dim();
    if n == 0 {
        return Err(AEError::EmptyBatch);
    }
    if h != H_IN || w != d.f {
        return Err(AEError::ShapeMismatch(format!(
            "batch bars are {h}x{w}, expected {H_IN}x{}",
            d.f
        )));
    }
    let bars: Vec<Vec<T>> = (0..n)
        .map(|i| {
            let view = batch.index_axis(Axis(0), i);
            match view.to_slice() {
                Some(s) => s.to_vec(),
                None => view.iter().cloned().collect(),
            }
        })
        .collect();
    let fronts: Vec<FrontTape<T>> = bars
        .par_iter()
        .map(|bar| forward_front(params, bar, &d))
        .collect();

    // Latent layer over the whole batch: Z (n x d_ls) = P2 (n x flat) . W^T.
    let mut p2 = Array2::zeros((n, d.flat));
    for (i, front) in fronts.iter().enumerate() {
        p2.row_mut(i)
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(&front.pool2_out);
    }
    let mut latents = Array2::zeros((n, d.d_ls));
    general_mat_mul(
        T::one(),
        &p2.view(),
        &view(&params.enc_fc_w, d.d_ls, d.flat).t(),
        T::zero(),
        &mut latents.view_mut(),
    );
    for mut row in latents.rows_mut() {
        for (v, &b) in row.iter_mut().zip(&params.enc_fc_b) {
            *v = *v + b;
        }
    }

    // Decoder FC: Dpre (n x flat) = Z (n x d_ls) . Wdec^T (d_ls x flat).
    let mut dec_pre = Array2::zeros((n, d.flat));
    general_mat_mul(
        T::one(),
        &latents.view(),
        &view(&params.dec_fc_w, d.flat, d.d_ls).t(),
        T::zero(),
        &mut dec_pre.view_mut(),
    );
    for mut row in dec_pre.rows_mut() {
        for (v, &b) in row.iter_mut().zip(&params.dec_fc_b) {
            *v = *v + b;
        }
    }

    struct TailOut<T: Real> {
        dec_fc_pre: Vec<T>,
        dec_act: Vec<T>,
        tconv1_pre: Vec<T>,
        tconv1_act: Vec<T>,
        recon: Vec<T>,
    }

    let tails: Vec<TailOut<T>> = dec_pre
        .axis_iter(Axis(0))
        .into_par_iter()
        .map(|row| {
            let dec_fc_pre: Vec<T> = row.iter().cloned().collect();
            let dec_act: Vec<T> = dec_fc_pre.iter().map(|&v| v.max(T::zero())).collect();
            let (tconv1_pre, tconv1_act, recon) = forward_tail(params, &dec_act, &d);
            TailOut {
                dec_fc_pre,
                dec_act,
                tconv1_pre,
                tconv1_act,
                recon,
            }
        })
        .collect();

    let mut recons = Array3::zeros((n, H_IN, d.f));
    let mut tapes = Vec::with_capacity(n);
    for (i, (front, tail)) in fronts.into_iter().zip(tails.into_iter()).enumerate() {
        if latents.row(i).iter().any(|v| !v.is_finite()) {
            return Err(AEError::NonFinite("latent"));
        }
        if tail.recon.iter().any(|v| !v.is_finite()) {
            return Err(AEError::NonFinite("reconstruction"));
        }
        recons
            .index_axis_mut(Axis(0), i)
            .as_slice_mut()
            .expect("contiguous")
            .copy_from_slice(&tail.recon);
        tapes.push(BarTape {
            input: front.input,
            conv1_pre: front.conv1_pre,
            pool1_out: front.pool1_out,
            pool1_idx: front.pool1_idx,
            conv2_pre: front.conv2_pre,
            pool2_out: front.pool2_out,
            pool2_idx: front.pool2_idx,
            latent: latents.row(i).to_vec(),
            dec_fc_pre: tail.dec_fc_pre,
            dec_act: tail.dec_act,
            tconv1_pre: tail.tconv1_pre,
            tconv1_act: tail.tconv1_act,
            recon: tail.recon,
        });
    }
    Ok(ForwardPass {
        latents,
        reconstructions: recons,
        tapes,
    })
}

/// Latent vectors for a stack of bars, without keeping reconstructions.
pub fn encode_bars<T: Real>(
    params: &AEParams<T>,
    batch: ArrayView3<'_, T>,
) -> Result<Array2<T>, AEError> {
    let pass = forward(params, batch)?;
    Ok(pass.latents)
}

/// Mean squared error over every entry of the batch.
pub fn loss<T: Real>(x: ArrayView3<'_, T>, x_hat: ArrayView3<'_, T>) -> Result<T, AEError> {
    if x.dim() != x_hat.dim() {
        return Err(AEError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            x.dim(),
            x_hat.dim()
        )));
    }
    let mut acc = T::zero();
    for (&a, &b) in x.iter().zip(x_hat.iter()) {
        let d = b - a;
        acc = acc + d * d;
    }
    Ok(acc / T::from_usize(x.len()).unwrap())
}

/// Per-bar gradient partial: only the (small) convolutional tensors. The
/// fully connected gradients are computed batch-level as GEMMs, so carrying
/// the two big FC matrices in every per-bar partial would waste most of the
/// backward pass on zeroing and reducing them.
struct ConvGrads<T: Real> {
    enc_conv1_w: Vec<T>,
    enc_conv1_b: Vec<T>,
    enc_conv2_w: Vec<T>,
    enc_conv2_b: Vec<T>,
    dec_tconv1_w: Vec<T>,
    dec_tconv1_b: Vec<T>,
    dec_tconv2_w: Vec<T>,
    dec_tconv2_b: Vec<T>,
}

impl<T: Real> ConvGrads<T> {
    fn zeros() -> Self {
        let z = T::zero();
        Self {
            enc_conv1_w: vec![z; C1 * TAPS],
            enc_conv1_b: vec![z; C1],
            enc_conv2_w: vec![z; C2 * C1 * TAPS],
            enc_conv2_b: vec![z; C2],
            dec_tconv1_w: vec![z; C2 * C1 * TAPS],
            dec_tconv1_b: vec![z; C1],
            dec_tconv2_w: vec![z; C1 * TAPS],
            dec_tconv2_b: vec![z; 1],
        }
    }

    fn add_into(&self, total: &mut Gradients<T>) {
        let pairs: [(&[T], &mut Vec<T>); 8] = [
            (&self.enc_conv1_w, &mut total.enc_conv1_w),
            (&self.enc_conv1_b, &mut total.enc_conv1_b),
            (&self.enc_conv2_w, &mut total.enc_conv2_w),
            (&self.enc_conv2_b, &mut total.enc_conv2_b),
            (&self.dec_tconv1_w, &mut total.dec_tconv1_w),
            (&self.dec_tconv1_b, &mut total.dec_tconv1_b),
            (&self.dec_tconv2_w, &mut total.dec_tconv2_w),
            (&self.dec_tconv2_b, &mut total.dec_tconv2_b),
        ];
        for (src, dst) in pairs {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
}

/// Per-bar decoder backward: from dL/d(recon) down to dL/d(dec_fc_pre),
/// accumulating the transposed-conv parameter gradients.
fn backward_tail<T: Real>(
    params: &AEParams<T>,
    tape: &BarTape<T>,
    scale: T,
    d: &Dims,
    g: &mut ConvGrads<T>,
) -> Vec<T> {
    let (h2, w2) = (H_IN / 2, d.w2);
    let (h3, w3) = (H_IN / 4, d.w3);
    let plane2 = h2 * w2;
    let plane3 = h3 * w3;

    let g_recon: Vec<T> = tape
        .recon
        .iter()
        .zip(&tape.input)
        .map(|(&r, &x)| (r - x) * scale)
        .collect();

    // tconv2 backward.
    let mut g_cols2 = vec![T::zero(); TAPS * plane2];
    tconv_gather(&g_recon, 1, h2, w2, &mut g_cols2);
    general_mat_mul(
        T::one(),
        &view(&tape.tconv1_act, C1, plane2),
        &view(&g_cols2, TAPS, plane2).t(),
        T::one(),
        &mut view_mut(&mut g.dec_tconv2_w, C1, TAPS),
    );
    let mut bias_acc = T::zero();
    for &v in &g_recon {
        bias_acc = bias_acc + v;
    }
    g.dec_tconv2_b[0] = g.dec_tconv2_b[0] + bias_acc;
    let mut g_t1act = vec![T::zero(); C1 * plane2];
    general_mat_mul(
        T::one(),
        &view(&params.dec_tconv2_w, C1, TAPS),
        &view(&g_cols2, TAPS, plane2),
        T::zero(),
        &mut view_mut(&mut g_t1act, C1, plane2),
    );
    relu_backward_inplace(&mut g_t1act, &tape.tconv1_pre);

    // tconv1 backward.
    let mut g_cols1 = vec![T::zero(); C1 * TAPS * plane3];
    tconv_gather(&g_t1act, C1, h3, w3, &mut g_cols1);
    general_mat_mul(
        T::one(),
        &view(&tape.dec_act, C2, plane3),
        &view(&g_cols1, C1 * TAPS, plane3).t(),
        T::one(),
        &mut view_mut(&mut g.dec_tconv1_w, C2, C1 * TAPS),
    );
    for oc in 0..C1 {
        let mut acc = T::zero();
        for &v in &g_t1act[oc * plane2..(oc + 1) * plane2] {
            acc = acc + v;
        }
        g.dec_tconv1_b[oc] = g.dec_tconv1_b[oc] + acc;
    }
    let mut g_dec_act = vec![T::zero(); d.flat];
    general_mat_mul(
        T::one(),
        &view(&params.dec_tconv1_w, C2, C1 * TAPS),
        &view(&g_cols1, C1 * TAPS, plane3),
        T::zero(),
        &mut view_mut(&mut g_dec_act, C2, plane3),
    );
    relu_backward_inplace(&mut g_dec_act, &tape.dec_fc_pre);
    g_dec_act
}

/// Per-bar encoder backward: from dL/d(pool2) down to the conv parameter
/// gradients.
fn backward_front<T: Real>(
    params: &AEParams<T>,
    tape: &BarTape<T>,
    g_pool2: &[T],
    d: &Dims,
    g: &mut ConvGrads<T>,
) {
    let (h1, w1) = (H_IN, d.f);
    let (h2, w2) = (H_IN / 2, d.w2);
    let plane1 = h1 * w1;
    let plane2 = h2 * w2;

    // Pool 2 routes to the recorded argmax; ReLU gates on the sign of the
    // pre-activation there.
    let mut g_conv2 = vec![T::zero(); C2 * plane2];
    for (i, &gp) in g_pool2.iter().enumerate() {
        let at = tape.pool2_idx[i] as usize;
        if tape.conv2_pre[at] > T::zero() {
            g_conv2[at] = g_conv2[at] + gp;
        }
    }

    let mut cols2 = vec![T::zero(); C1 * TAPS * plane2];
    im2col_3x3(&tape.pool1_out, C1, h2, w2, &mut cols2);
    general_mat_mul(
        T::one(),
        &view(&g_conv2, C2, plane2),
        &view(&cols2, C1 * TAPS, plane2).t(),
        T::one(),
        &mut view_mut(&mut g.enc_conv2_w, C2, C1 * TAPS),
    );
    for oc in 0..C2 {
        let mut acc = T::zero();
        for &v in &g_conv2[oc * plane2..(oc + 1) * plane2] {
            acc = acc + v;
        }
        g.enc_conv2_b[oc] = g.enc_conv2_b[oc] + acc;
    }
    let mut g_cols2 = vec![T::zero(); C1 * TAPS * plane2];
    general_mat_mul(
        T::one(),
        &view(&params.enc_conv2_w, C2, C1 * TAPS).t(),
        &view(&g_conv2, C2, plane2),
        T::zero(),
        &mut view_mut(&mut g_cols2, C1 * TAPS, plane2),
    );
    let mut g_pool1 = vec![T::zero(); C1 * plane2];
    col2im_3x3_add(&g_cols2, C1, h2, w2, &mut g_pool1);

    let mut g_conv1 = vec![T::zero(); C1 * plane1];
    for (i, &gp) in g_pool1.iter().enumerate() {
        let at = tape.pool1_idx[i] as usize;
        if tape.conv1_pre[at] > T::zero() {
            g_conv1[at] = g_conv1[at] + gp;
        }
    }

    let mut cols1 = vec![T::zero(); TAPS * plane1];
    im2col_3x3(&tape.input, 1, h1, w1, &mut cols1);
    general_mat_mul(
        T::one(),
        &view(&g_conv1, C1, plane1),
        &view(&cols1, TAPS, plane1).t(),
        T::one(),
        &mut view_mut(&mut g.enc_conv1_w, C1, TAPS),
    );
    for oc in 0..C1 {
        let mut acc = T::zero();
        for &v in &g_conv1[oc * plane1..(oc + 1) * plane1] {
            acc = acc + v;
        }
        g.enc_conv1_b[oc] = g.enc_conv1_b[oc] + acc;
    }
    // No gradient with respect to the input is needed.
}

/// Exact gradient of the batch MSE with respect to every parameter.
///
/// `batch` must be the same stack the tapes were produced from (shape is
/// verified; a mismatch means a stale tape). The convolutional stages reduce
/// per-bar gradients in batch order and the FC gradients are single GEMMs,
/// so the result does not depend on the thread count.
pub fn backward<T: Real>(
    params: &AEParams<T>,
    tapes: &[BarTape<T>],
    batch: ArrayView3<'_, T>,
) -> Result<Gradients<T>, AEError> {
    let d = params.dims();
    let (n, h, w) = batch.dim();
    if tapes.len() != n {
        return Err(AEError::StaleTape(format!(
            "{} tapes for a batch of {n}",
            tapes.len()
        )));
    }
    if h != H_IN || w != d.f {
        return Err(AEError::StaleTape(format!(
            "batch bars are {h}x{w}, expected {H_IN}x{}",
            d.f
        )));
    }
    for (i, tape) in tapes.iter().enumerate() {
        if tape.input.len() != H_IN * d.f {
            return Err(AEError::StaleTape(format!(
                "tape {i} input has {} values, expected {}",
                tape.input.len(),
                H_IN * d.f
            )));
        }
    }
    let scale = T::from_f64(2.0).unwrap() / T::from_usize(n * H_IN * d.f).unwrap();
    let config = AEConfig {
        latent_dim: d.d_ls,
        feature_dim: d.f,
        seed: 0,
    };

    // Decoder tails, bar-parallel; each returns its parameter-gradient
    // partial plus the FC pre-activation gradient row.
    let tail_parts: Vec<(ConvGrads<T>, Vec<T>)> = tapes
        .par_iter()
        .map(|tape| {
            let mut g = ConvGrads::zeros();
            let g_dpre = backward_tail(params, tape, scale, &d, &mut g);
            (g, g_dpre)
        })
        .collect();

    let mut total = Gradients::zeros(&config);
    for (g, _) in &tail_parts {
        g.add_into(&mut total);
    }

    // FC gradients over the whole batch.
    let mut g_dpre = Array2::zeros((n, d.flat));
    for (i, (_, row)) in tail_parts.iter().enumerate() {
        g_dpre.row_mut(i).as_slice_mut().unwrap().copy_from_slice(row);
    }
    let mut z = Array2::zeros((n, d.d_ls));
    let mut p2 = Array2::zeros((n, d.flat));
    for (i, tape) in tapes.iter().enumerate() {
        z.row_mut(i).as_slice_mut().unwrap().copy_from_slice(&tape.latent);
        p2.row_mut(i)
            .as_slice_mut()
            .unwrap()
            .copy_from_slice(&tape.pool2_out);
    }
    // dec_fc: W is (flat x d_ls): gW += gDpre^T . Z; bias: column sums.
    general_mat_mul(
        T::one(),
        &g_dpre.t(),
        &z.view(),
        T::one(),
        &mut view_mut(&mut total.dec_fc_w, d.flat, d.d_ls),
    );
    for i in 0..d.flat {
        let mut acc = T::zero();
        for b in 0..n {
            acc = acc + g_dpre[[b, i]];
        }
        total.dec_fc_b[i] = total.dec_fc_b[i] + acc;
    }
    // gZ (n x d_ls) = gDpre (n x flat) . Wdec (flat x d_ls).
    let mut g_z = Array2::zeros((n, d.d_ls));
    general_mat_mul(
        T::one(),
        &g_dpre.view(),
        &view(&params.dec_fc_w, d.flat, d.d_ls),
        T::zero(),
        &mut g_z.view_mut(),
    );
    // enc_fc: W is (d_ls x flat): gW += gZ^T . P2; bias: column sums.
    general_mat_mul(
        T::one(),
        &g_z.t(),
        &p2.view(),
        T::one(),
        &mut view_mut(&mut total.enc_fc_w, d.d_ls, d.flat),
    );
    for o in 0..d.d_ls {
        let mut acc = T::zero();
        for b in 0..n {
            acc = acc + g_z[[b, o]];
        }
        total.enc_fc_b[o] = total.enc_fc_b[o] + acc;
    }
    // gP2 (n x flat) = gZ (n x d_ls) . Wenc (d_ls x flat).
    let mut g_p2 = Array2::zeros((n, d.flat));
    general_mat_mul(
        T::one(),
        &g_z.view(),
        &view(&params.enc_fc_w, d.d_ls, d.flat),
        T::zero(),
        &mut g_p2.view_mut(),
    );

    // Encoder fronts, bar-parallel.
    let front_parts: Vec<ConvGrads<T>> = tapes
        .par_iter()
        .enumerate()
        .map(|(i, tape)| {
            let mut g = ConvGrads::zeros();
            let row: Vec<T> = g_p2.row(i).to_vec();
            backward_front(params, tape, &row, &d, &mut g);
            g
        })
        .collect();
    for g in &front_parts {
        g.add_into(&mut total);
    }
    Ok(total)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"BAE1";

/// Save a parameter checkpoint: magic, `u32 F`, `u32 d_ls`, `u64 seed`,
/// `u32 epoch`, then every tensor in canonical order as little-endian
/// float32.
pub fn save_checkpoint<T: Real>(
    path: &Path,
    params: &AEParams<T>,
    seed: u64,
    epoch: u32,
) -> Result<(), AEError> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.feature_dim as u32).to_le_bytes());
    out.extend_from_slice(&(params.latent_dim as u32).to_le_bytes());
    out.extend_from_slice(&seed.to_le_bytes());
    out.extend_from_slice(&epoch.to_le_bytes());
    for (_, tensor) in params.tensors() {
        for v in tensor {
            out.extend_from_slice(&(v.to_f64().unwrap() as f32).to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Load a checkpoint saved by [`save_checkpoint`]; returns the parameters
/// plus the recorded seed and epoch.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<(AEParams<T>, u64, u32), AEError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 24 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(AEError::BadCheckpoint("bad magic/header".into()));
    }
    let f = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d_ls = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let epoch = u32::from_le_bytes(bytes[20..24].try_into().unwrap());
    let config = AEConfig::new(d_ls, f, seed).map_err(|e| AEError::BadCheckpoint(e.to_string()))?;
    let mut params = AEParams::<T>::zeros(&config);
    let expected = 24 + params.num_params() * 4;
    if bytes.len() != expected {
        return Err(AEError::BadCheckpoint(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut at = 24;
    for (_, tensor) in params.tensors_mut() {
        for v in tensor.iter_mut() {
            *v = T::from_f32(f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())).unwrap();
            at += 4;
        }
    }
    Ok((params, seed, epoch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn random_batch(n: usize, f: usize, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((n, H_IN, f), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let config = AEConfig::new(8, 12, 99).unwrap();
        let a: AEParams<f64> = init_kaiming(&config);
        let b: AEParams<f64> = init_kaiming(&config);
        assert_eq!(a, b);

        // enc_conv1 fan_in = 1*3*3 = 9: bound sqrt(6/9).
        let bound = (6.0f64 / 9.0).sqrt();
        assert!((bound - 0.8165).abs() < 1e-4);
        assert_eq!(a.enc_conv1_w.len(), 36);
        assert!(a.enc_conv1_w.iter().all(|v| v.abs() <= bound));
        assert!(a
            .enc_conv1_b
            .iter()
            .all(|v| v.abs() <= 1.0 / 3.0 + 1e-12));

        let c: AEParams<f64> = init_kaiming(&AEConfig::new(8, 12, 100).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn init_matches_uniform_moments() {
        // enc_fc for F=80, d_ls=14 gives 107520 weights; the empirical
        // variance of U(-b, b) is b^2/3.
        let config = AEConfig::new(14, 80, 7).unwrap();
        let p: AEParams<f64> = init_kaiming(&config);
        let n = p.enc_fc_w.len();
        assert!(n >= 100_000);
        let mean: f64 = p.enc_fc_w.iter().sum::<f64>() / n as f64;
        let var: f64 = p.enc_fc_w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let flat = 16.0 * 24.0 * 20.0;
        let expected = (6.0 / flat) / 3.0;
        assert!(
            (var / expected - 1.0).abs() < 0.05,
            "variance {var} vs expected {expected}"
        );
    }

    #[test]
    fn zero_params_map_everything_to_zero() {
        let config = AEConfig::new(3, 8, 0).unwrap();
        let params = AEParams::<f64>::zeros(&config);
        let batch = random_batch(2, 8, 1);
        let pass = forward(&params, batch.view()).unwrap();
        assert!(pass.latents.iter().all(|&v| v == 0.0));
        assert!(pass.reconstructions.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shapes_mirror_for_every_valid_f() {
        for f in [4usize, 8, 12, 32, 80] {
            let config = AEConfig::new(2, f, 5).unwrap();
            let params: AEParams<f64> = init_kaiming(&config);
            let batch = random_batch(1, f, 2);
            let pass = forward(&params, batch.view()).unwrap();
            assert_eq!(pass.reconstructions.dim(), (1, H_IN, f));
            assert_eq!(pass.latents.dim(), (1, 2));
        }
    }

    #[test]
    fn loss_examples() {
        let x = random_batch(2, 4, 3);
        assert_eq!(loss(x.view(), x.view()).unwrap(), 0.0);

        let zeros = Array3::<f64>::zeros((1, H_IN, 4));
        let twos = zeros.mapv(|_| 2.0);
        assert_eq!(loss(zeros.view(), twos.view()).unwrap(), 4.0);

        let a = random_batch(3, 8, 10);
        let b = random_batch(3, 8, 11);
        let got = loss(a.view(), b.view()).unwrap();
        let mut acc = 0.0;
        for (x, y) in a.iter().zip(b.iter()) {
            acc += (y - x) * (y - x);
        }
        let expected = acc / a.len() as f64;
        assert!((got - expected).abs() < 1e-12);
    }

    /// Straight-line scalar re-implementation of the whole forward pass for
    /// one bar, structured as plain nested loops over padded arrays. Kept
    /// deliberately independent of the production im2col/GEMM kernels.
    fn naive_forward(params: &AEParams<f64>, bar: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let f = params.feature_dim;
        let d_ls = params.latent_dim;
        let conv = |input: &Vec<Vec<Vec<f64>>>, weights: &[f64], bias: &[f64], out_c: usize| {
            let in_c = input.len();
            let h = input[0].len();
            let w = input[0][0].len();
            let mut out = vec![vec![vec![0.0; w]; h]; out_c];
            for oc in 0..out_c {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = bias[oc];
                        for ic in 0..in_c {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = y as i64 + ky as i64 - 1;
                                    let ix = x as i64 + kx as i64 - 1;
                                    if iy >= 0 && iy < h as i64 && ix >= 0 && ix < w as i64 {
                                        acc += weights[((oc * in_c + ic) * 3 + ky) * 3 + kx]
                                            * input[ic][iy as usize][ix as usize];
                                    }
                                }
                            }
                        }
                        out[oc][y][x] = acc;
                    }
                }
            }
            out
        };
        let relu_pool = |input: &Vec<Vec<Vec<f64>>>| {
            let c = input.len();
            let h = input[0].len();
            let w = input[0][0].len();
            let mut out = vec![vec![vec![0.0; w / 2]; h / 2]; c];
            for ch in 0..c {
                for y in 0..h / 2 {
                    for x in 0..w / 2 {
                        let mut m = 0.0f64;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                m = m.max(input[ch][2 * y + dy][2 * x + dx].max(0.0));
                            }
                        }
                        out[ch][y][x] = m;
                    }
                }
            }
            out
        };
        let tconv = |input: &Vec<Vec<Vec<f64>>>, weights: &[f64], bias: &[f64], out_c: usize| {
            let in_c = input.len();
            let ih = input[0].len();
            let iw = input[0][0].len();
            let (oh, ow) = (2 * ih, 2 * iw);
            let mut out = vec![vec![vec![0.0; ow]; oh]; out_c];
            for oc in 0..out_c {
                for y in 0..oh {
                    for x in 0..ow {
                        out[oc][y][x] = bias[oc];
                    }
                }
            }
            for ic in 0..in_c {
                for oc in 0..out_c {
                    for iy in 0..ih {
                        for ix in 0..iw {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let oy = 2 * iy as i64 - 1 + ky as i64;
                                    let ox = 2 * ix as i64 - 1 + kx as i64;
                                    if oy >= 0 && oy < oh as i64 && ox >= 0 && ox < ow as i64 {
                                        out[oc][oy as usize][ox as usize] += weights
                                            [((ic * out_c + oc) * 3 + ky) * 3 + kx]
                                            * input[ic][iy][ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            out
        };

        let input = vec![(0..H_IN)
            .map(|y| bar[y * f..(y + 1) * f].to_vec())
            .collect::<Vec<_>>()];
        let c1 = conv(&input, &params.enc_conv1_w, &params.enc_conv1_b, 4);
        let p1 = relu_pool(&c1);
        let c2 = conv(&p1, &params.enc_conv2_w, &params.enc_conv2_b, 16);
        let p2 = relu_pool(&c2);
        let flat: Vec<f64> = p2
            .iter()
            .flat_map(|pl| pl.iter().flat_map(|r| r.iter().cloned()))
            .collect();
        let z: Vec<f64> = (0..d_ls)
            .map(|o| {
                params.enc_fc_b[o]
                    + flat
                        .iter()
                        .enumerate()
                        .map(|(i, v)| params.enc_fc_w[o * flat.len() + i] * v)
                        .sum::<f64>()
            })
            .collect();
        let dec: Vec<f64> = (0..flat.len())
            .map(|i| {
                let v = params.dec_fc_b[i]
                    + z.iter()
                        .enumerate()
                        .map(|(o, zv)| params.dec_fc_w[i * d_ls + o] * zv)
                        .sum::<f64>();
                v.max(0.0)
            })
            .collect();
        let (h3, w3) = (H_IN / 4, f / 4);
        let dec3: Vec<Vec<Vec<f64>>> = (0..16)
            .map(|c| {
                (0..h3)
                    .map(|y| (0..w3).map(|x| dec[c * h3 * w3 + y * w3 + x]).collect())
                    .collect()
            })
            .collect();
        let t1 = tconv(&dec3, &params.dec_tconv1_w, &params.dec_tconv1_b, 4);
        let t1r: Vec<Vec<Vec<f64>>> = t1
            .iter()
            .map(|pl| pl.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect())
            .collect();
        let t2 = tconv(&t1r, &params.dec_tconv2_w, &params.dec_tconv2_b, 1);
        let recon: Vec<f64> = t2[0].iter().flat_map(|r| r.iter().cloned()).collect();
        (z, recon)
    }

    #[test]
    fn forward_matches_naive_reimplementation() {
        let config = AEConfig::new(2, 4, 21).unwrap();
        let params: AEParams<f64> = init_kaiming(&config);
        let batch = random_batch(1, 4, 22);
        let pass = forward(&params, batch.view()).unwrap();
        let bar: Vec<f64> = batch.index_axis(Axis(0), 0).iter().cloned().collect();
        let (z, recon) = naive_forward(&params, &bar);
        for (a, b) in pass.latents.row(0).iter().zip(&z) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for (i, (a, b)) in pass.tapes[0].recon.iter().zip(&recon).enumerate() {
            assert!((a - b).abs() < 1e-12, "recon[{i}]: {a} vs {b}");
        }
    }

    #[test]
    fn zero_everything_gives_zero_gradients() {
        let config = AEConfig::new(2, 4, 0).unwrap();
        let params = AEParams::<f64>::zeros(&config);
        let batch = Array3::<f64>::zeros((2, H_IN, 4));
        let pass = forward(&params, batch.view()).unwrap();
        let grads = backward(&params, &pass.tapes, batch.view()).unwrap();
        for (name, t) in grads.tensors() {
            assert!(t.iter().all(|&v| v == 0.0), "{name} not zero");
        }
    }

    fn numeric_gradient(
        params: &mut AEParams<f64>,
        batch: &Array3<f64>,
        tensor_idx: usize,
        at: usize,
        eps: f64,
    ) -> f64 {
        let read = |p: &AEParams<f64>, b: &Array3<f64>| {
            let pass = forward(p, b.view()).unwrap();
            loss(b.view(), pass.reconstructions.view()).unwrap()
        };
        let orig = *params.tensors()[tensor_idx].1.get(at).unwrap();
        params.tensors_mut()[tensor_idx].1[at] = orig + eps;
        let up = read(params, batch);
        params.tensors_mut()[tensor_idx].1[at] = orig - eps;
        let down = read(params, batch);
        params.tensors_mut()[tensor_idx].1[at] = orig;
        (up - down) / (2.0 * eps)
    }

    #[test]
    fn single_fc_weight_matches_finite_difference() {
        let config = AEConfig::new(2, 4, 78).unwrap();
        let mut params: AEParams<f64> = init_kaiming(&config);
        let batch = random_batch(2, 4, 79);
        let pass = forward(&params, batch.view()).unwrap();
        let grads = backward(&params, &pass.tapes, batch.view()).unwrap();
        let analytic = grads.enc_fc_w[5];
        let numeric = numeric_gradient(&mut params, &batch, 4, 5, 1e-4);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-5, "rel {rel}: {analytic} vs {numeric}");
    }

    #[test]
    fn sampled_parameters_match_finite_differences() {
        // Spot check across every tensor; the acceptance suite sweeps all
        // parameters.
        let config = AEConfig::new(2, 4, 123).unwrap();
        let mut params: AEParams<f64> = init_kaiming(&config);
        let batch = random_batch(3, 4, 124);
        let pass = forward(&params, batch.view()).unwrap();
        let grads = backward(&params, &pass.tapes, batch.view()).unwrap();
        for tensor_idx in 0..12 {
            let len = grads.tensors()[tensor_idx].1.len();
            let stride = (len / 7).max(1);
            for at in (0..len).step_by(stride) {
                let analytic = grads.tensors()[tensor_idx].1[at];
                let numeric = numeric_gradient(&mut params, &batch, tensor_idx, at, 1e-4);
                let rel =
                    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    rel < 1e-4,
                    "{} [{at}]: analytic {analytic} vs numeric {numeric} (rel {rel})",
                    grads.tensors()[tensor_idx].0
                );
            }
        }
    }

    #[test]
    fn latent_is_affine_in_enc_fc() {
        // With the convolutional trunk fixed, z is affine in the encoder FC
        // parameters: z(W1+W2, b1+b2) = z(W1, b1) + z(W2, b2).
        let config = AEConfig::new(3, 8, 42).unwrap();
        let base: AEParams<f64> = init_kaiming(&config);
        let batch = random_batch(1, 8, 43);

        let mut p1 = base.clone();
        let mut p2 = base.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for v in p1.enc_fc_w.iter_mut().chain(p1.enc_fc_b.iter_mut()) {
            *v = rng.random_range(-0.1..0.1);
        }
        for v in p2.enc_fc_w.iter_mut().chain(p2.enc_fc_b.iter_mut()) {
            *v = rng.random_range(-0.1..0.1);
        }
        let mut sum = base.clone();
        for i in 0..sum.enc_fc_w.len() {
            sum.enc_fc_w[i] = p1.enc_fc_w[i] + p2.enc_fc_w[i];
        }
        for i in 0..sum.enc_fc_b.len() {
            sum.enc_fc_b[i] = p1.enc_fc_b[i] + p2.enc_fc_b[i];
        }
        let z1 = forward(&p1, batch.view()).unwrap().latents;
        let z2 = forward(&p2, batch.view()).unwrap().latents;
        let zs = forward(&sum, batch.view()).unwrap().latents;
        for ((a, b), s) in z1.iter().zip(z2.iter()).zip(zs.iter()) {
            assert!((a + b - s).abs() < 1e-10);
        }
    }

    #[test]
    fn maxpool_tie_break_takes_first_position() {
        // A constant window ties everywhere; the recorded index must be the
        // first in row-major window order.
        let pre = vec![1.0f64; 2 * 4 * 4];
        let mut out = vec![0.0; 2 * 2 * 2];
        let mut idx = vec![0u32; 2 * 2 * 2];
        relu_pool2x2(&pre, 2, 4, 4, &mut out, &mut idx);
        assert_eq!(idx[0], 0); // channel 0, window (0,0): position (0,0)
        assert_eq!(idx[1], 2); // window (0,1): position (0,2)
        assert_eq!(idx[2], 8); // window (1,0): position (2,0)
        assert_eq!(idx[4], 16); // channel 1 starts at plane offset 16
        assert!(out.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn forward_deterministic_across_thread_counts() {
        let config = AEConfig::new(4, 8, 9).unwrap();
        let params: AEParams<f64> = init_kaiming(&config);
        let batch = random_batch(7, 8, 10);
        let a = forward(&params, batch.view()).unwrap();
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let b = single.install(|| forward(&params, batch.view()).unwrap());
        assert_eq!(a.latents, b.latents);
        assert_eq!(a.reconstructions, b.reconstructions);
        let ga = backward(&params, &a.tapes, batch.view()).unwrap();
        let gb = single.install(|| backward(&params, &b.tapes, batch.view()).unwrap());
        assert_eq!(ga, gb);
    }

    #[test]
    fn error_paths() {
        let config = AEConfig::new(2, 8, 0).unwrap();
        let params: AEParams<f64> = init_kaiming(&config);
        let empty = Array3::<f64>::zeros((0, H_IN, 8));
        assert!(matches!(
            forward(&params, empty.view()),
            Err(AEError::EmptyBatch)
        ));
        let wrong = Array3::<f64>::zeros((1, H_IN, 12));
        assert!(matches!(
            forward(&params, wrong.view()),
            Err(AEError::ShapeMismatch(_))
        ));
        let batch = random_batch(2, 8, 1);
        let pass = forward(&params, batch.view()).unwrap();
        let other = random_batch(3, 8, 2);
        assert!(matches!(
            backward(&params, &pass.tapes, other.view()),
            Err(AEError::StaleTape(_))
        ));

        let mut bad = params.clone();
        bad.enc_conv1_w[0] = f64::INFINITY;
        assert!(matches!(
            forward(&bad, batch.view()),
            Err(AEError::NonFinite(_))
        ));

        assert!(matches!(
            AEConfig::new(2, 10, 0),
            Err(AEError::FeatureDimNotDivisible(10))
        ));
        assert!(matches!(AEConfig::new(0, 8, 0), Err(AEError::LatentDimZero)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = AEConfig::new(5, 12, 3).unwrap();
        let params: AEParams<f32> = init_kaiming(&config);
        let path = dir.path().join("model.ae");
        save_checkpoint(&path, &params, 3, 250).unwrap();
        let (back, seed, epoch) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(seed, 3);
        assert_eq!(epoch, 250);
        assert_eq!(back, params); // exact: params were f32 already

        std::fs::write(dir.path().join("junk.ae"), b"nope").unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&dir.path().join("junk.ae")),
            Err(AEError::BadCheckpoint(_))
        ));
    }
}
