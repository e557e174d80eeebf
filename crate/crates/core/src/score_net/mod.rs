//! Time-conditioned residual MLP score network.
//!
//! The network maps `(z, t[, c])` to an estimate of `∇_z log p_t(z)`:
//!
//! ```text
//! h₀ = W_in z + b_in
//! for each block:
//!     u = W₁ h + b₁ + W_t φ(ln t) [+ W_c ψ(c)]
//!     h = h + W₂ silu(u) + b₂
//! s(z, t, c) = (W_out h + b_out) / std(t)
//! ```
//!
//! `φ` and `ψ` are Gaussian Fourier features with frozen frequencies and
//! `std(t)` is the perturbation-kernel standard deviation of the model's SDE.
//!
//! # Parameter layout
//!
//! All trainable parameters live in one flat `f64` array, row-major matrices of
//! shape `(out, in)`, in this order:
//!
//! 1. `W_in (H×D)`, `b_in (H)`
//! 2. per block: `W₁ (H×H)`, `b₁ (H)`, `W_t (H×T)`, `W₂ (H×H)`, `b₂ (H)`
//! 3. `W_out (D×H)`, `b_out (D)`
//! 4. conditional models only, per block: `W_c (H×C)`
//!
//! Keeping the class pathway last means a conditional model and an
//! unconditional model built from the same seed share every other parameter.

pub mod checkpoint;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sde::SdeSpec;
use crate::seed::{self, Stream};

/// Frequency scale of the log-time Fourier features.
pub const TIME_FOURIER_SCALE: f64 = 0.5;
/// Frequency scale of the class-id Fourier features.
pub const CLASS_FOURIER_SCALE: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreNetConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub time_embed_dim: usize,
    pub class_embed_dim: usize,
    pub num_classes: Option<usize>,
}

impl ScoreNetConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden_dim: 1024,
            num_blocks: 12,
            time_embed_dim: 128,
            class_embed_dim: 256,
            num_classes: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("net.input_dim", self.input_dim),
            ("net.hidden_dim", self.hidden_dim),
            ("net.num_blocks", self.num_blocks),
            ("net.time_embed_dim", self.time_embed_dim),
            ("net.class_embed_dim", self.class_embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.time_embed_dim.is_multiple_of(2) || !self.class_embed_dim.is_multiple_of(2) {
            return Err(Error::Config("embedding dimensions must be even".into()));
        }
        if self.class_embed_dim > 256 {
            return Err(Error::Config(
                "net.class_embed_dim must be at most 256".into(),
            ));
        }
        if self.num_classes == Some(0) {
            return Err(Error::Config("net.num_classes must be positive".into()));
        }
        Ok(())
    }

    pub fn is_conditional(&self) -> bool {
        self.num_classes.is_some()
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockOffsets {
    w1: usize,
    b1: usize,
    wt: usize,
    w2: usize,
    b2: usize,
    wc: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    d: usize,
    h: usize,
    t: usize,
    c: usize,
    in_w: usize,
    in_b: usize,
    blocks: Vec<BlockOffsets>,
    out_w: usize,
    out_b: usize,
    class_start: usize,
    total: usize,
}

impl Layout {
    fn new(cfg: &ScoreNetConfig) -> Self {
        let (d, h, t, c) = (
            cfg.input_dim,
            cfg.hidden_dim,
            cfg.time_embed_dim,
            cfg.class_embed_dim,
        );
        let mut off = 0;
        let mut take = |n: usize| {
            let start = off;
            off += n;
            start
        };
        let in_w = take(h * d);
        let in_b = take(h);
        let mut blocks: Vec<BlockOffsets> = (0..cfg.num_blocks)
            .map(|_| BlockOffsets {
                w1: take(h * h),
                b1: take(h),
                wt: take(h * t),
                w2: take(h * h),
                b2: take(h),
                wc: None,
            })
            .collect();
        let out_w = take(d * h);
        let out_b = take(d);
        let class_start = take(0);
        if cfg.is_conditional() {
            for b in &mut blocks {
                b.wc = Some(take(h * c));
            }
        }
        let total = take(0);
        Self {
            d,
            h,
            t,
            c,
            in_w,
            in_b,
            blocks,
            out_w,
            out_b,
            class_start,
            total,
        }
    }
}

/// Gaussian Fourier features `[sin(2π f_k v)…, cos(2π f_k v)…]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierFeatures {
    freqs: Vec<f64>,
}

impl FourierFeatures {
    /// Draws `dim / 2` frequencies `scale · N(0, 1)` from the seeded
    /// SplitMix64/Box–Muller stream documented in [`crate::seed`].
    pub fn new(dim: usize, scale: f64, seed: u64) -> Result<Self> {
        if !dim.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!(
                "Fourier embedding dimension must be even, got {dim}"
            )));
        }
        let freqs = seed::seeded_normals(seed, dim / 2)
            .into_iter()
            .map(|x| x * scale)
            .collect();
        Ok(Self { freqs })
    }

    pub fn from_frequencies(freqs: Vec<f64>) -> Self {
        Self { freqs }
    }

    pub fn dim(&self) -> usize {
        2 * self.freqs.len()
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    pub fn embed_into(&self, v: f64, out: &mut [f64]) {
        let half = self.freqs.len();
        for (k, f) in self.freqs.iter().enumerate() {
            let (s, c) = (2.0 * std::f64::consts::PI * f * v).sin_cos();
            out[k] = s;
            out[half + k] = c;
        }
    }

    pub fn embed(&self, v: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.embed_into(v, &mut out);
        out
    }
}

pub fn fourier_embed(v: f64, dim: usize, scale: f64, seed: u64) -> Result<Vec<f64>> {
    Ok(FourierFeatures::new(dim, scale, seed)?.embed(v))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks_a = a.chunks_exact(4);
    let chunks_b = b.chunks_exact(4);
    let (ra, rb) = (chunks_a.remainder(), chunks_b.remainder());
    for (x, y) in chunks_a.zip(chunks_b) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `out[j] (+)= W · x[j]` for `m` stacked input vectors of length `cols`.
fn matvec_stack(
    w: &[f64],
    rows: usize,
    cols: usize,
    x: &[f64],
    out: &mut [f64],
    m: usize,
    add: bool,
) {
    for r in 0..rows {
        let wr = &w[r * cols..(r + 1) * cols];
        for j in 0..m {
            let v = dot(wr, &x[j * cols..(j + 1) * cols]);
            if add {
                out[j * rows + r] += v;
            } else {
                out[j * rows + r] = v;
            }
        }
    }
}

/// A score function `s(z, t[, c]) ≈ ∇_z log p_t(z)` usable by the likelihood
/// and sampling code. Implemented by [`ScoreModel`] and by analytic oracles.
pub trait ScoreFn: Sync {
    fn input_dim(&self) -> usize;

    fn num_classes(&self) -> Option<usize> {
        None
    }

    fn score(&self, z: &[f64], t: f64, class: Option<usize>) -> Result<Vec<f64>>;

    /// Score together with Jacobian-vector products `J_s(z) · v` for `k`
    /// tangents stacked row-major in `tangents` (length `k · D`).
    fn score_jvp(
        &self,
        z: &[f64],
        t: f64,
        class: Option<usize>,
        tangents: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)>;

    fn score_batch(
        &self,
        z: ArrayView2<f64>,
        t: &[f64],
        classes: Option<&[usize]>,
    ) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(z.raw_dim());
        for (i, row) in z.axis_iter(Axis(0)).enumerate() {
            let s = self.score(&row.to_vec(), t[i], classes.map(|c| c[i]))?;
            out.row_mut(i).assign(&ArrayView1::from(&s));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    config: ScoreNetConfig,
    sde: SdeSpec,
    seed: u64,
    params: Vec<f64>,
    layout: Layout,
    time_features: FourierFeatures,
    class_features: Option<FourierFeatures>,
}

/// Intermediate activations of a batch forward pass, kept for backprop.
struct BatchCache {
    input: Array2<f64>,
    time_feats: Array2<f64>,
    class_feats: Option<Array2<f64>>,
    hidden: Vec<Array2<f64>>,
    pre_act: Vec<Array2<f64>>,
    std: Vec<f64>,
}

impl ScoreModel {
    /// Reproducible initialization. The output head starts at zero, so the
    /// initial score is identically zero.
    pub fn init(config: ScoreNetConfig, sde: SdeSpec, seed: u64) -> Result<Self> {
        config.validate()?;
        sde.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = seed::rng(seed::child(seed, Stream::Init));
        let fill = |params: &mut [f64],
                    off: usize,
                    n: usize,
                    std: f64,
                    rng: &mut rand_chacha::ChaCha8Rng| {
            for p in &mut params[off..off + n] {
                let g: f64 = rng.sample(StandardNormal);
                *p = g * std;
            }
        };
        let (d, h, t, c) = (layout.d, layout.h, layout.t, layout.c);
        let block_scale = 1.0 / (config.num_blocks as f64).sqrt();
        fill(
            &mut params,
            layout.in_w,
            h * d,
            (1.0 / d as f64).sqrt(),
            &mut rng,
        );
        for b in &layout.blocks {
            fill(&mut params, b.w1, h * h, (1.0 / h as f64).sqrt(), &mut rng);
            fill(&mut params, b.wt, h * t, (1.0 / t as f64).sqrt(), &mut rng);
            fill(
                &mut params,
                b.w2,
                h * h,
                block_scale * (1.0 / h as f64).sqrt(),
                &mut rng,
            );
        }
        let mut class_rng = seed::rng(seed::derive(seed::child(seed, Stream::Init), 1));
        for b in &layout.blocks {
            if let Some(wc) = b.wc {
                fill(
                    &mut params,
                    wc,
                    h * c,
                    (1.0 / c as f64).sqrt(),
                    &mut class_rng,
                );
            }
        }
        Self::from_parts(config, sde, seed, params)
    }

    /// Rebuilds a model from its configuration, SDE, seed, and flat parameters.
    pub fn from_parts(
        config: ScoreNetConfig,
        sde: SdeSpec,
        seed: u64,
        params: Vec<f64>,
    ) -> Result<Self> {
        config.validate()?;
        sde.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::DimensionMismatch {
                expected: layout.total,
                got: params.len(),
            });
        }
        if !params.iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        let time_features = FourierFeatures::new(
            config.time_embed_dim,
            TIME_FOURIER_SCALE,
            seed::child(seed, Stream::TimeFrequencies),
        )?;
        let class_features = if config.is_conditional() {
            Some(FourierFeatures::new(
                config.class_embed_dim,
                CLASS_FOURIER_SCALE,
                seed::child(seed, Stream::ClassFrequencies),
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            sde,
            seed,
            params,
            layout,
            time_features,
            class_features,
        })
    }

    pub fn config(&self) -> &ScoreNetConfig {
        &self.config
    }

    pub fn sde(&self) -> &SdeSpec {
        &self.sde
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Replaces the parameters; the length must match the layout.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.layout.total {
            return Err(Error::DimensionMismatch {
                expected: self.layout.total,
                got: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    pub(crate) fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Range of the class-embedding projections inside the parameter array
    /// (empty for unconditional models).
    pub fn class_param_range(&self) -> std::ops::Range<usize> {
        self.layout.class_start..self.layout.total
    }

    /// Rounds every parameter to the nearest `f32`, matching what a
    /// checkpoint stores.
    pub fn quantize_f32(&mut self) {
        for p in &mut self.params {
            *p = *p as f32 as f64;
        }
    }

    pub fn time_features(&self) -> &FourierFeatures {
        &self.time_features
    }

    fn mat(&self, off: usize, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.params[off..off + rows * cols])
            .expect("layout offsets are consistent")
    }

    fn vec(&self, off: usize, n: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[off..off + n])
    }

    fn check_class(&self, class: Option<usize>) -> Result<()> {
        match (self.config.num_classes, class) {
            (None, None) => Ok(()),
            (None, Some(_)) => Err(Error::InvalidInput(
                "class given to an unconditional model".into(),
            )),
            (Some(_), None) => Err(Error::InvalidInput(
                "conditional model requires a class".into(),
            )),
            (Some(k), Some(c)) if c >= k => Err(Error::InvalidInput(format!(
                "class {c} out of range for {k} classes"
            ))),
            _ => Ok(()),
        }
    }

    fn check_time(t: f64) -> Result<()> {
        if t > 0.0 && t <= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("time {t} outside (0, 1]")))
        }
    }

    fn kernel_std(&self, t: f64) -> f64 {
        self.sde.kernel_unchecked(t).std
    }

    /// Single-sample evaluation of the raw head output for the stacked input
    /// `[z, v₁, …, v_k]`: column 0 is the primal pass, the rest are tangents
    /// pushed forward through the network.
    fn eval_stack(
        &self,
        z: &[f64],
        t: f64,
        class: Option<usize>,
        tangents: &[f64],
        k: usize,
    ) -> Vec<f64> {
        let l = &self.layout;
        let (d, h) = (l.d, l.h);
        let m = 1 + k;
        let p = &self.params;

        let mut x = Vec::with_capacity(m * d);
        x.extend_from_slice(z);
        x.extend_from_slice(tangents);

        let mut hid = vec![0.0; m * h];
        matvec_stack(&p[l.in_w..], h, d, &x, &mut hid, m, false);
        for r in 0..h {
            hid[r] += p[l.in_b + r];
        }

        let tf = self.time_features.embed(t.ln());
        let cf = match (&self.class_features, class) {
            (Some(f), Some(c)) => Some(f.embed(c as f64)),
            _ => None,
        };

        let mut u = vec![0.0; m * h];
        let mut a = vec![0.0; m * h];
        for b in &l.blocks {
            matvec_stack(&p[b.w1..], h, h, &hid, &mut u, m, false);
            matvec_stack(&p[b.wt..], h, l.t, &tf, &mut u, 1, true);
            if let (Some(wc), Some(cf)) = (b.wc, cf.as_ref()) {
                matvec_stack(&p[wc..], h, l.c, cf, &mut u, 1, true);
            }
            for r in 0..h {
                u[r] += p[b.b1 + r];
                a[r] = silu(u[r]);
            }
            for j in 1..m {
                for r in 0..h {
                    a[j * h + r] = silu_grad(u[r]) * u[j * h + r];
                }
            }
            matvec_stack(&p[b.w2..], h, h, &a, &mut hid, m, true);
            for r in 0..h {
                hid[r] += p[b.b2 + r];
            }
        }

        let mut out = vec![0.0; m * d];
        matvec_stack(&p[l.out_w..], d, h, &hid, &mut out, m, false);
        for r in 0..d {
            out[r] += p[l.out_b + r];
        }
        out
    }

    /// Score `s_θ(z, t[, c])` for one sample.
    pub fn forward(&self, z: ArrayView1<f64>, t: f64, class: Option<usize>) -> Result<Array1<f64>> {
        let z = z.to_vec();
        Ok(Array1::from(self.score(&z, t, class)?))
    }

    fn check_sample(&self, z: &[f64], t: f64, class: Option<usize>) -> Result<()> {
        if z.len() != self.config.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.config.input_dim,
                got: z.len(),
            });
        }
        Self::check_time(t)?;
        self.check_class(class)
    }

    fn forward_cached(
        &self,
        z: ArrayView2<f64>,
        t: &[f64],
        classes: Option<&[usize]>,
    ) -> Result<(Array2<f64>, BatchCache)> {
        let l = &self.layout;
        let (bsz, d) = z.dim();
        if d != l.d {
            return Err(Error::DimensionMismatch {
                expected: l.d,
                got: d,
            });
        }
        if t.len() != bsz {
            return Err(Error::DimensionMismatch {
                expected: bsz,
                got: t.len(),
            });
        }
        for &ti in t {
            Self::check_time(ti)?;
        }
        match classes {
            Some(cs) => {
                if cs.len() != bsz {
                    return Err(Error::DimensionMismatch {
                        expected: bsz,
                        got: cs.len(),
                    });
                }
                for &c in cs {
                    self.check_class(Some(c))?;
                }
            }
            None => self.check_class(None)?,
        }

        let mut time_feats = Array2::zeros((bsz, l.t));
        for (i, mut row) in time_feats.axis_iter_mut(Axis(0)).enumerate() {
            self.time_features
                .embed_into(t[i].ln(), row.as_slice_mut().expect("contiguous"));
        }
        let class_feats = match (&self.class_features, classes) {
            (Some(f), Some(cs)) => {
                let mut cf = Array2::zeros((bsz, l.c));
                for (i, mut row) in cf.axis_iter_mut(Axis(0)).enumerate() {
                    f.embed_into(cs[i] as f64, row.as_slice_mut().expect("contiguous"));
                }
                Some(cf)
            }
            _ => None,
        };

        let input = z.to_owned();
        let mut hcur = input.dot(&self.mat(l.in_w, l.h, l.d).t()) + self.vec(l.in_b, l.h);
        let mut hidden = Vec::with_capacity(l.blocks.len() + 1);
        let mut pre_act = Vec::with_capacity(l.blocks.len());
        for b in &l.blocks {
            let mut u = hcur.dot(&self.mat(b.w1, l.h, l.h).t());
            u += &time_feats.dot(&self.mat(b.wt, l.h, l.t).t());
            if let (Some(wc), Some(cf)) = (b.wc, class_feats.as_ref()) {
                u += &cf.dot(&self.mat(wc, l.h, l.c).t());
            }
            u += &self.vec(b.b1, l.h);
            let a = u.mapv(silu);
            let v = a.dot(&self.mat(b.w2, l.h, l.h).t()) + self.vec(b.b2, l.h);
            let next = &hcur + &v;
            hidden.push(hcur);
            pre_act.push(u);
            hcur = next;
        }
        let mut out = hcur.dot(&self.mat(l.out_w, l.d, l.h).t()) + self.vec(l.out_b, l.d);
        hidden.push(hcur);
        let std: Vec<f64> = t.iter().map(|&ti| self.kernel_std(ti)).collect();
        for (mut row, s) in out.axis_iter_mut(Axis(0)).zip(&std) {
            row.mapv_inplace(|v| v / s);
        }
        let cache = BatchCache {
            input,
            time_feats,
            class_feats,
            hidden,
            pre_act,
            std,
        };
        Ok((out, cache))
    }

    /// Batched scores, one row per sample.
    pub fn forward_batch(
        &self,
        z: ArrayView2<f64>,
        t: &[f64],
        classes: Option<&[usize]>,
    ) -> Result<Array2<f64>> {
        let (out, _) = self.forward_cached(z, t, classes)?;
        Ok(out)
    }

    fn backprop(&self, cache: &BatchCache, d_score: &Array2<f64>) -> Vec<f64> {
        let l = &self.layout;
        let mut grad = vec![0.0; l.total];
        let mut d_out = d_score.clone();
        for (mut row, s) in d_out.axis_iter_mut(Axis(0)).zip(&cache.std) {
            row.mapv_inplace(|v| v / s);
        }
        let put = |grad: &mut [f64], off: usize, m: ArrayView2<f64>| {
            for (g, v) in grad[off..off + m.len()].iter_mut().zip(m.iter()) {
                *g += v;
            }
        };
        let h_last = &cache.hidden[l.blocks.len()];
        put(&mut grad, l.out_w, d_out.t().dot(h_last).view());
        put(
            &mut grad,
            l.out_b,
            d_out.sum_axis(Axis(0)).insert_axis(Axis(0)).view(),
        );
        let mut dh = d_out.dot(&self.mat(l.out_w, l.d, l.h));

        for (bi, b) in l.blocks.iter().enumerate().rev() {
            let u = &cache.pre_act[bi];
            let a = u.mapv(silu);
            put(&mut grad, b.w2, dh.t().dot(&a).view());
            put(
                &mut grad,
                b.b2,
                dh.sum_axis(Axis(0)).insert_axis(Axis(0)).view(),
            );
            let da = dh.dot(&self.mat(b.w2, l.h, l.h));
            let mut du = u.mapv(silu_grad);
            du *= &da;
            put(&mut grad, b.w1, du.t().dot(&cache.hidden[bi]).view());
            put(
                &mut grad,
                b.b1,
                du.sum_axis(Axis(0)).insert_axis(Axis(0)).view(),
            );
            put(&mut grad, b.wt, du.t().dot(&cache.time_feats).view());
            if let (Some(wc), Some(cf)) = (b.wc, cache.class_feats.as_ref()) {
                put(&mut grad, wc, du.t().dot(cf).view());
            }
            dh += &du.dot(&self.mat(b.w1, l.h, l.h));
        }
        put(&mut grad, l.in_w, dh.t().dot(&cache.input).view());
        put(
            &mut grad,
            l.in_b,
            dh.sum_axis(Axis(0)).insert_axis(Axis(0)).view(),
        );
        grad
    }

    /// Loss and exact parameter gradient.
    ///
    /// `loss_fn` receives the batch of scores and returns the scalar loss with
    /// its gradient with respect to those scores.
    pub fn backward<L>(
        &self,
        z: ArrayView2<f64>,
        t: &[f64],
        classes: Option<&[usize]>,
        loss_fn: L,
    ) -> Result<(f64, Vec<f64>)>
    where
        L: FnOnce(&Array2<f64>) -> (f64, Array2<f64>),
    {
        if z.nrows() == 0 {
            return Err(Error::InvalidInput("empty batch".into()));
        }
        let (scores, cache) = self.forward_cached(z, t, classes)?;
        let (loss, d_score) = loss_fn(&scores);
        if !loss.is_finite() {
            let batch_index = scores
                .axis_iter(Axis(0))
                .zip(d_score.axis_iter(Axis(0)))
                .position(|(s, g)| s.iter().chain(g.iter()).any(|v| !v.is_finite()))
                .unwrap_or(0);
            return Err(Error::NonFiniteLoss { batch_index });
        }
        if d_score.dim() != scores.dim() {
            return Err(Error::DimensionMismatch {
                expected: scores.len(),
                got: d_score.len(),
            });
        }
        Ok((loss, self.backprop(&cache, &d_score)))
    }

    /// Scores for `[z₀, z₁, …]` computed one row at a time (the per-sample path).
    pub fn forward_rows(
        &self,
        z: ArrayView2<f64>,
        t: &[f64],
        classes: Option<&[usize]>,
    ) -> Result<Array2<f64>> {
        let mut out = Array2::zeros(z.raw_dim());
        for i in 0..z.nrows() {
            let s = self.score(&z.row(i).to_vec(), t[i], classes.map(|c| c[i]))?;
            out.slice_mut(s![i, ..]).assign(&ArrayView1::from(&s));
        }
        Ok(out)
    }
}

impl ScoreFn for ScoreModel {
    fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    fn num_classes(&self) -> Option<usize> {
        self.config.num_classes
    }

    fn score(&self, z: &[f64], t: f64, class: Option<usize>) -> Result<Vec<f64>> {
        self.check_sample(z, t, class)?;
        let std = self.kernel_std(t);
        let mut out = self.eval_stack(z, t, class, &[], 0);
        for v in &mut out {
            *v /= std;
        }
        Ok(out)
    }

    fn score_jvp(
        &self,
        z: &[f64],
        t: f64,
        class: Option<usize>,
        tangents: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_sample(z, t, class)?;
        let d = self.config.input_dim;
        if !tangents.len().is_multiple_of(d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: tangents.len(),
            });
        }
        let k = tangents.len() / d;
        let std = self.kernel_std(t);
        let mut out = self.eval_stack(z, t, class, tangents, k);
        for v in &mut out {
            *v /= std;
        }
        let jvp = out.split_off(d);
        Ok((out, jvp))
    }

    fn score_batch(
        &self,
        z: ArrayView2<f64>,
        t: &[f64],
        classes: Option<&[usize]>,
    ) -> Result<Array2<f64>> {
        self.forward_batch(z, t, classes)
    }
}

#[cfg(test)]
mod tests;
