//! Denoising score matching training.
//!
//! Each step draws `t ~ U[t_min, 1]` and `ε ~ N(0, I)` per row, perturbs
//! `z(t) = m(t)·z(0) + std(t)·ε`, and minimises the batch mean of
//! `‖std(t)·s_θ(z(t), t[, c]) + ε‖²`. Optimisation is AdamW with a cosine
//! learning-rate schedule that decays to zero over the run and global
//! gradient-norm clipping.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::RepresentationSet;
use crate::score_net::{ScoreFn, ScoreModel, ScoreNetConfig};
use crate::sde::SdeSpec;
use crate::seed::{self, Stream};

/// Smallest per-dimension scale a [`Normalizer`] will use.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Per-dimension standardization `x ↦ (x − mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn fit(data: ArrayView2<f64>) -> Result<Self> {
        if data.nrows() == 0 {
            return Err(Error::InvalidInput(
                "cannot fit a normalizer to no rows".into(),
            ));
        }
        let mean = data.mean_axis(Axis(0)).expect("non-empty");
        let scale = data.std_axis(Axis(0), 0.0).mapv(|s| {
            if s.is_finite() {
                s.max(SCALE_FLOOR)
            } else {
                SCALE_FLOOR
            }
        });
        Ok(Self {
            mean: mean.to_vec(),
            scale: scale.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn normalize_matrix(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for mut row in out.axis_iter_mut(Axis(0)) {
            for (v, (m, s)) in row.iter_mut().zip(self.mean.iter().zip(&self.scale)) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    /// `log |det ∂normalize/∂x| = −Σ ln scale_i`; add to a normalized-space
    /// log-density to get the input-space log-density.
    pub fn log_jacobian(&self) -> f64 {
        -self.scale.iter().map(|s| s.ln()).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Full passes over the data.
    Epochs(usize),
    /// A fixed number of optimizer steps; epochs roll over as needed.
    Iterations(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: Schedule,
    pub grad_clip_norm: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub t_min: f64,
    pub normalize_inputs: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4096,
            lr: 2e-3,
            schedule: Schedule::Epochs(200),
            grad_clip_norm: 1.0,
            weight_decay: 0.0,
            seed: 0,
            t_min: 1e-5,
            normalize_inputs: true,
        }
    }
}

impl TrainConfig {
    /// Protocol used for the 2-D toy experiments: 30 000 optimizer steps.
    pub fn toy() -> Self {
        Self {
            schedule: Schedule::Iterations(30_000),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(self.grad_clip_norm.is_finite() && self.grad_clip_norm > 0.0) {
            return Err(Error::Config(
                "train.grad_clip_norm must be positive".into(),
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "train.weight_decay must be nonnegative".into(),
            ));
        }
        if !(self.t_min > 0.0 && self.t_min < 1.0) {
            return Err(Error::Config("train.t_min must lie in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self, n_rows: usize) -> usize {
        match self.schedule {
            Schedule::Epochs(e) => e * n_rows.div_ceil(self.batch_size),
            Schedule::Iterations(i) => i,
        }
    }
}

/// Cosine annealing from `base` at step 0 to 0 at the last step.
pub fn cosine_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        return base;
    }
    let progress = step as f64 / (total_steps - 1) as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescales `grad` so its Euclidean norm is at most `max_norm`.
/// Returns the norms before and after clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> (f64, f64) {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= k;
        }
        (norm, grad.iter().map(|g| g * g).sum::<f64>().sqrt())
    } else {
        (norm, norm)
    }
}

/// AdamW with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(n: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Perturbs `batch` to `z(t)` with the given draws.
fn perturb(
    spec: &SdeSpec,
    batch: ArrayView2<f64>,
    t_draws: &[f64],
    noise: ArrayView2<f64>,
) -> (Array2<f64>, Vec<f64>) {
    let mut zt = batch.to_owned();
    let mut stds = Vec::with_capacity(t_draws.len());
    for (i, mut row) in zt.axis_iter_mut(Axis(0)).enumerate() {
        let k = spec.kernel_unchecked(t_draws[i]);
        for (v, e) in row.iter_mut().zip(noise.row(i)) {
            *v = k.mean_coeff * *v + k.std * e;
        }
        stds.push(k.std);
    }
    (zt, stds)
}

fn check_draws(
    t_min: f64,
    batch: ArrayView2<f64>,
    t_draws: &[f64],
    noise: ArrayView2<f64>,
) -> Result<()> {
    if batch.nrows() == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if t_draws.len() != batch.nrows() {
        return Err(Error::DimensionMismatch {
            expected: batch.nrows(),
            got: t_draws.len(),
        });
    }
    if noise.dim() != batch.dim() {
        return Err(Error::DimensionMismatch {
            expected: batch.len(),
            got: noise.len(),
        });
    }
    if let Some(t) = t_draws.iter().find(|t| !(**t >= t_min && **t <= 1.0)) {
        return Err(Error::InvalidInput(format!(
            "t draw {t} outside [{t_min}, 1]"
        )));
    }
    Ok(())
}

/// Batch-mean DSM objective with the `std(t)²` weighting folded in.
pub fn dsm_loss<S: ScoreFn + ?Sized>(
    score: &S,
    spec: &SdeSpec,
    batch: ArrayView2<f64>,
    labels: Option<&[usize]>,
    t_draws: &[f64],
    noise: ArrayView2<f64>,
) -> Result<f64> {
    check_draws(0.0, batch, t_draws, noise)?;
    let (zt, stds) = perturb(spec, batch, t_draws, noise);
    let s = score.score_batch(zt.view(), t_draws, labels)?;
    let mut total = 0.0;
    for i in 0..batch.nrows() {
        let row: f64 = s
            .row(i)
            .iter()
            .zip(noise.row(i))
            .map(|(sv, e)| (stds[i] * sv + e).powi(2))
            .sum();
        if !row.is_finite() {
            return Err(Error::NonFiniteLoss { batch_index: i });
        }
        total += row;
    }
    Ok(total / batch.nrows() as f64)
}

fn dsm_loss_and_grad(
    model: &ScoreModel,
    spec: &SdeSpec,
    batch: ArrayView2<f64>,
    labels: Option<&[usize]>,
    t_draws: &[f64],
    noise: ArrayView2<f64>,
) -> Result<(f64, Vec<f64>)> {
    let (zt, stds) = perturb(spec, batch, t_draws, noise);
    let n = batch.nrows() as f64;
    model.backward(zt.view(), t_draws, labels, |s| {
        let mut resid = s.clone();
        for (i, mut row) in resid.axis_iter_mut(Axis(0)).enumerate() {
            for (r, e) in row.iter_mut().zip(noise.row(i)) {
                *r = stds[i] * *r + e;
            }
        }
        let loss = resid.iter().map(|r| r * r).sum::<f64>() / n;
        let mut grad = resid;
        for (i, mut row) in grad.axis_iter_mut(Axis(0)).enumerate() {
            let k = 2.0 * stds[i] / n;
            row.mapv_inplace(|r| k * r);
        }
        (loss, grad)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ScoreModel,
    pub normalizer: Normalizer,
    /// Mean loss per pass over the data.
    pub loss_trace: Vec<f64>,
    pub steps: Vec<StepRecord>,
}

/// Trains on a representation file's rows.
pub fn fit(
    reps: &RepresentationSet,
    labels: Option<&[usize]>,
    spec: &SdeSpec,
    net_cfg: &ScoreNetConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let data = reps.data_f64();
    fit_matrix(data.view(), labels, spec, net_cfg, cfg)
}

/// Trains a fresh model on `data`; `labels` are required iff `net_cfg` is conditional.
pub fn fit_matrix(
    data: ArrayView2<f64>,
    labels: Option<&[usize]>,
    spec: &SdeSpec,
    net_cfg: &ScoreNetConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    spec.validate()?;
    net_cfg.validate()?;
    let (n, d) = data.dim();
    if n == 0 {
        return Err(Error::InvalidInput("no training rows".into()));
    }
    if d != net_cfg.input_dim {
        return Err(Error::DimensionMismatch {
            expected: net_cfg.input_dim,
            got: d,
        });
    }
    match (net_cfg.num_classes, labels) {
        (Some(k), Some(ls)) => {
            if ls.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: ls.len(),
                });
            }
            if let Some(bad) = ls.iter().find(|c| **c >= k) {
                return Err(Error::InvalidInput(format!(
                    "label {bad} out of range for {k} classes"
                )));
            }
        }
        (Some(_), None) => {
            return Err(Error::Config("conditional training requires labels".into()));
        }
        (None, _) => {}
    }
    let labels = if net_cfg.is_conditional() {
        labels
    } else {
        None
    };
    if !data.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("training data".into()));
    }

    let normalizer = if cfg.normalize_inputs {
        Normalizer::fit(data)?
    } else {
        Normalizer::identity(d)
    };
    let x = normalizer.normalize_matrix(data);

    let mut model = ScoreModel::init(net_cfg.clone(), *spec, cfg.seed)?;
    let mut opt = AdamW::new(model.param_count(), cfg.weight_decay);
    let mut rng = seed::rng(seed::child(cfg.seed, Stream::Training));
    let total = cfg.total_steps(n);

    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut loss_trace = Vec::new();
    let mut steps = Vec::with_capacity(total);
    let (mut epoch_loss, mut epoch_rows) = (0.0, 0usize);

    for step in 0..total {
        if cursor >= n {
            if epoch_rows > 0 {
                loss_trace.push(epoch_loss / epoch_rows as f64);
            }
            epoch_loss = 0.0;
            epoch_rows = 0;
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + cfg.batch_size).min(n);
        let idx = &order[cursor..end];
        cursor = end;

        let batch = x.select(Axis(0), idx);
        let batch_labels: Option<Vec<usize>> =
            labels.map(|ls| idx.iter().map(|&i| ls[i]).collect());
        let t_draws: Vec<f64> = (0..idx.len())
            .map(|_| cfg.t_min + (1.0 - cfg.t_min) * rng.random::<f64>())
            .collect();
        let noise = Array2::from_shape_fn((idx.len(), d), |_| rng.sample::<f64, _>(StandardNormal));

        let (loss, mut grad) = dsm_loss_and_grad(
            &model,
            spec,
            batch.view(),
            batch_labels.as_deref(),
            &t_draws,
            noise.view(),
        )
        .map_err(|e| match e {
            Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { batch_index: step },
            other => other,
        })?;
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFiniteLoss { batch_index: step });
        }
        let (grad_norm, clipped_norm) = clip_grad_norm(&mut grad, cfg.grad_clip_norm);
        let lr = cosine_lr(cfg.lr, step, total);
        opt.step(model.params_mut(), &grad, lr);
        steps.push(StepRecord {
            lr,
            loss,
            grad_norm,
            clipped_norm,
        });
        epoch_loss += loss * idx.len() as f64;
        epoch_rows += idx.len();
    }
    if epoch_rows > 0 {
        loss_trace.push(epoch_loss / epoch_rows as f64);
    }
    if !model.params().iter().all(|p| p.is_finite()) {
        return Err(Error::NonFinite("trained parameters".into()));
    }
    Ok(TrainOutcome {
        model,
        normalizer,
        loss_trace,
        steps,
    })
}

/// Classifier-head decision `argmax(W z + b)`, ties to the lowest index.
pub fn predict_condition(
    w: ArrayView2<f64>,
    b: ArrayView1<f64>,
    z: ArrayView1<f64>,
) -> Result<usize> {
    let (k, d) = w.dim();
    if b.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: b.len(),
        });
    }
    if z.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: z.len(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidInput("classifier head has no classes".into()));
    }
    let logits = w.dot(&z) + b;
    let mut best = 0;
    for i in 1..k {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    Ok(best)
}
