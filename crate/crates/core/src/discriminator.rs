//! Time-dependent discriminator between pseudo-clean and pseudo-corrupt
//! data, with label-shuffle and nearest-neighbour mixup augmentations.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{conditioned_input, cosine_factor, LossTrace, NoiseSchedule, TIME_FEATURES};
use crate::error::{Error, Result};
use crate::guidance::LogitField;
use crate::nn::{softplus, sigmoid, Adam, AdamConfig, Checkpoint, DenseNetwork, LossEval, ModelRole};
use crate::rng::{self, streams, LabRng};

/// Points with hard labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPool {
    pub x: Array2<f64>,
    pub labels: Vec<usize>,
}

impl LabeledPool {
    pub fn new(x: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(Error::shape(format!("{} rows but {} labels", x.nrows(), labels.len())));
        }
        Ok(LabeledPool { x, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Feature map used to find mixup partners.
pub trait Encoder {
    fn encode(&self, x: ArrayView2<'_, f64>) -> Array2<f64>;
}

pub struct IdentityEncoder;

impl Encoder for IdentityEncoder {
    fn encode(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.to_owned()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub shuffle_rate: f64,
    pub simix_alpha: f64,
    pub simix_fraction: f64,
    #[serde(default)]
    pub encoder: EncoderKind,
}

impl Default for AugConfig {
    fn default() -> Self {
        AugConfig { shuffle_rate: 0.3, simix_alpha: 0.2, simix_fraction: 0.5, encoder: EncoderKind::Identity }
    }
}

impl AugConfig {
    pub fn none() -> Self {
        AugConfig { shuffle_rate: 0.0, simix_fraction: 0.0, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shuffle_rate) || !(0.0..=1.0).contains(&self.simix_fraction) {
            return Err(Error::Config("shuffle_rate and simix_fraction must lie in [0, 1]".into()));
        }
        if !(self.simix_alpha > 0.0) {
            return Err(Error::Config("simix_alpha must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeSampling {
    /// Uniform over the schedule's sampling levels.
    #[default]
    Discrete,
    /// Log-uniform on `[sigma_min, sigma_max]`.
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub aug: AugConfig,
    #[serde(default)]
    pub time_sampling: TimeSampling,
    /// Final learning rate as a fraction of the initial one (half-cosine decay).
    #[serde(default = "default_lr_floor")]
    pub lr_final_fraction: f64,
}

fn default_lr_floor() -> f64 {
    0.02
}

impl Default for DiscTrainConfig {
    fn default() -> Self {
        DiscTrainConfig {
            steps: 3000,
            batch_size: 256,
            optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::default() },
            aug: AugConfig::default(),
            time_sampling: TimeSampling::Discrete,
            lr_final_fraction: default_lr_floor(),
        }
    }
}

/// A training batch: clean coordinates, (possibly soft) label vectors,
/// verified-label weights `r`, and, once noised, `sigmas` and `x_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBatch {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub r: Array1<f64>,
    pub sigmas: Vec<f64>,
    pub x_t: Array2<f64>,
}

impl AugmentedBatch {
    /// Builds a batch with one-hot labels; `x_t = x` and `sigma = 0` until
    /// [`AugmentedBatch::perturb`] is called.
    pub fn from_hard(x: Array2<f64>, labels: &[usize], r: &[f64], num_classes: usize) -> Result<Self> {
        if x.nrows() != labels.len() || labels.len() != r.len() {
            return Err(Error::shape("batch fields differ in length"));
        }
        let mut y = Array2::zeros((labels.len(), num_classes));
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::invalid(format!("label {l} outside [0, {num_classes})")));
            }
            y[[i, l]] = 1.0;
        }
        Ok(AugmentedBatch {
            x_t: x.clone(),
            sigmas: vec![0.0; labels.len()],
            x,
            y,
            r: Array1::from_vec(r.to_vec()),
        })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.y.ncols()
    }

    /// `x_t = x + sigma_i eps_i`.
    pub fn perturb<R: Rng + ?Sized>(&mut self, sigmas: Vec<f64>, rng: &mut R) -> Result<()> {
        if sigmas.len() != self.len() {
            return Err(Error::shape("one noise level per row required"));
        }
        self.x_t = self.x.clone();
        for (i, mut row) in self.x_t.rows_mut().into_iter().enumerate() {
            for v in row.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v += sigmas[i] * e;
            }
        }
        self.sigmas = sigmas;
        Ok(())
    }
}

/// Mean of `w_i [r_i softplus(-g_i) + (1 - r_i) softplus(g_i)]`, the
/// cross-entropy of `D = sigmoid(g)` against soft targets `r`.
pub fn adv_loss_from_logits(g: &[f64], r: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    if g.is_empty() || g.len() != r.len() || weights.is_some_and(|w| w.len() != g.len()) {
        return Err(Error::shape("logits, targets and weights must be nonempty and equal in length"));
    }
    let total: f64 = g
        .iter()
        .zip(r)
        .enumerate()
        .map(|(i, (&g, &r))| weights.map_or(1.0, |w| w[i]) * (r * softplus(-g) + (1.0 - r) * softplus(g)))
        .sum();
    Ok(total / g.len() as f64)
}

pub fn adv_loss(disc: &DiscriminatorModel, batch: &AugmentedBatch) -> Result<f64> {
    let g = disc.logit_soft(batch.x_t.view(), batch.y.view(), &batch.sigmas)?;
    adv_loss_from_logits(g.as_slice().unwrap(), batch.r.as_slice().unwrap(), None)
}

/// Relabels each `r = 1` row with probability `rate` to a uniformly chosen
/// different class and sets its `r` to 0. Returns the number of rows changed.
pub fn pseudo_clean_shuffle<R: Rng + ?Sized>(batch: &mut AugmentedBatch, rate: f64, rng: &mut R) -> Result<usize> {
    let k = batch.num_classes();
    if k < 2 {
        return Err(Error::invalid("label shuffling needs at least two classes"));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("shuffle rate {rate} outside [0, 1]")));
    }
    let mut changed = 0;
    for i in 0..batch.len() {
        if batch.r[i] != 1.0 || !rng.random_bool(rate) {
            continue;
        }
        let current = argmax(batch.y.row(i).as_slice().unwrap());
        let mut new = rng.random_range(0..k - 1);
        if new >= current {
            new += 1;
        }
        batch.y.row_mut(i).fill(0.0);
        batch.y[[i, new]] = 1.0;
        batch.r[i] = 0.0;
        changed += 1;
    }
    Ok(changed)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// For each row, the index of its nearest other row in Euclidean distance;
/// ties go to the lowest index.
pub fn nearest_neighbors(features: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::invalid("nearest neighbours need at least two rows"));
    }
    Ok((0..n)
        .map(|i| {
            let mut best = (f64::INFINITY, usize::MAX);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let d: f64 = features.row(i).iter().zip(features.row(j)).map(|(a, b)| (a - b).powi(2)).sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect())
}

/// Mixes `round(fraction * B)` randomly chosen rows with their nearest
/// neighbour in encoder space: `z_i <- lambda z_i + (1 - lambda) z_j`,
/// `lambda ~ Beta(alpha, alpha)`, applied to `x`, `y` and `r`. Partners are
/// read from the unmixed batch. Returns `(row, partner, lambda)` triples.
pub fn simix<R: Rng + ?Sized, E: Encoder + ?Sized>(
    batch: &mut AugmentedBatch,
    alpha: f64,
    fraction: f64,
    encoder: &E,
    rng: &mut R,
) -> Result<Vec<(usize, usize, f64)>> {
    if !(alpha > 0.0) {
        return Err(Error::invalid("mixup alpha must be positive"));
    }
    let n = batch.len();
    if n < 2 {
        return Err(Error::invalid("mixup needs a batch of at least two"));
    }
    let count = ((fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    if count == 0 {
        return Ok(Vec::new());
    }
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(e.to_string()))?;
    let nn = nearest_neighbors(encoder.encode(batch.x.view()).view())?;
    let mut rows = index::sample(rng, n, count).into_vec();
    rows.sort_unstable();
    let lambdas: Vec<f64> = rows.iter().map(|_| beta.sample(rng)).collect();
    let snapshot = batch.clone();
    let mut mixed = Vec::with_capacity(count);
    for (&i, &lam) in rows.iter().zip(&lambdas) {
        let j = nn[i];
        mixed.push((i, j, lam));
        apply_mix(batch, &snapshot, i, j, lam);
    }
    Ok(mixed)
}

/// Replaces row `i` with `lambda * row_i + (1 - lambda) * row_j` of `src`.
pub fn apply_mix(batch: &mut AugmentedBatch, src: &AugmentedBatch, i: usize, j: usize, lambda: f64) {
    let mix = |a: f64, b: f64| lambda * a + (1.0 - lambda) * b;
    for c in 0..batch.x.ncols() {
        batch.x[[i, c]] = mix(src.x[[i, c]], src.x[[j, c]]);
    }
    for c in 0..batch.y.ncols() {
        batch.y[[i, c]] = mix(src.y[[i, c]], src.y[[j, c]]);
    }
    batch.r[i] = mix(src.r[i], src.r[j]);
}

/// `D(x, y, sigma) = sigmoid(g(x, y, sigma))` with `g` a dense network over
/// `[c_in (x - mu), label vector, time features]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorModel {
    pub net: DenseNetwork,
    pub dim: usize,
    pub num_classes: usize,
    pub schedule: NoiseSchedule,
    pub sigma_data: f64,
    pub data_mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DiscMeta {
    dim: usize,
    num_classes: usize,
    schedule: NoiseSchedule,
    sigma_data: f64,
    data_mean: Vec<f64>,
}

impl DiscriminatorModel {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        num_classes: usize,
        hidden: &[usize],
        schedule: NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        schedule.validate()?;
        if dim == 0 || num_classes == 0 {
            return Err(Error::invalid("discriminator needs dim > 0 and at least one class"));
        }
        let mut widths = vec![dim + num_classes + TIME_FEATURES];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Ok(DiscriminatorModel {
            net: DenseNetwork::new(&widths, rng)?,
            dim,
            num_classes,
            schedule,
            sigma_data: 0.5,
            data_mean: vec![0.0; dim],
        })
    }

    /// Input normalization from the combined training pools.
    pub fn fit_preconditioning(&mut self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.dim || x.nrows() < 2 {
            return Err(Error::shape("preconditioning needs at least two rows of matching dimension"));
        }
        self.data_mean = x.mean_axis(Axis(0)).unwrap().to_vec();
        self.sigma_data = x.var_axis(Axis(0), 0.0).mean().unwrap().sqrt().max(1e-3);
        Ok(())
    }

    fn label_rows(&self, labels: &[usize]) -> Result<Array2<f64>> {
        crate::diffusion::one_hot(labels, self.num_classes)
    }

    fn input(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, sigmas: &[f64]) -> Result<Array2<f64>> {
        if x.ncols() != self.dim || y.ncols() != self.num_classes {
            return Err(Error::shape(format!(
                "expected {} coordinates and {} label columns, got {} and {}",
                self.dim,
                self.num_classes,
                x.ncols(),
                y.ncols()
            )));
        }
        if x.nrows() != y.nrows() || x.nrows() != sigmas.len() {
            return Err(Error::shape("rows, labels and noise levels differ in count"));
        }
        Ok(conditioned_input(x, y, sigmas, &self.data_mean, self.sigma_data))
    }

    /// Logits for soft label vectors at per-row noise levels.
    pub fn logit_soft(&self, x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, sigmas: &[f64]) -> Result<Array1<f64>> {
        Ok(self.net.forward(self.input(x, y, sigmas)?.view())?.column(0).to_owned())
    }

    /// `D = sigmoid(g)`.
    pub fn probability(&self, x: ArrayView2<'_, f64>, labels: &[usize], sigma: f64) -> Result<Array1<f64>> {
        Ok(self.logit(x, labels, sigma)?.mapv(sigmoid))
    }

    pub fn to_checkpoint(&self, optimizer: Option<&Adam>, seed: u64, step: u64) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(ModelRole::Discriminator, &self.net, optimizer, seed, step);
        ck.model = serde_json::to_value(DiscMeta {
            dim: self.dim,
            num_classes: self.num_classes,
            schedule: self.schedule.clone(),
            sigma_data: self.sigma_data,
            data_mean: self.data_mean.clone(),
        })?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_role(ModelRole::Discriminator)?;
        let meta: DiscMeta = serde_json::from_value(ck.model.clone())?;
        let net = ck.network()?;
        if net.input_width() != meta.dim + meta.num_classes + TIME_FEATURES || net.output_width() != 1 {
            return Err(Error::shape("discriminator checkpoint widths disagree with its metadata"));
        }
        Ok(DiscriminatorModel {
            net,
            dim: meta.dim,
            num_classes: meta.num_classes,
            schedule: meta.schedule,
            sigma_data: meta.sigma_data,
            data_mean: meta.data_mean,
        })
    }
}

impl LogitField for DiscriminatorModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn logit(&self, x: ArrayView2<'_, f64>, labels: &[usize], sigma: f64) -> Result<Array1<f64>> {
        let y = self.label_rows(labels)?;
        self.logit_soft(x, y.view(), &vec![sigma; x.nrows()])
    }

    /// Reverse-mode input gradient, chained through the input scaling.
    fn logit_grad(&self, x: ArrayView2<'_, f64>, labels: &[usize], sigma: f64) -> Result<Array2<f64>> {
        let y = self.label_rows(labels)?;
        let input = self.input(x, y.view(), &vec![sigma; x.nrows()])?;
        let ones = Array2::ones((x.nrows(), 1));
        let full = self.net.input_vjp(input.view(), ones.view())?;
        let c_in = 1.0 / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt();
        Ok(full.slice(ndarray::s![.., ..self.dim]).mapv(|v| v * c_in))
    }
}

/// Draws one batch: rows sampled proportionally to pool sizes, `r = 1` for
/// the clean pool and 0 for the corrupt pool.
pub fn draw_batch<R: Rng + ?Sized>(
    clean: &LabeledPool,
    corrupt: &LabeledPool,
    batch_size: usize,
    num_classes: usize,
    rng: &mut R,
) -> Result<AugmentedBatch> {
    let total = clean.len() + corrupt.len();
    if total == 0 {
        return Err(Error::invalid("both pools are empty"));
    }
    let dim = if clean.is_empty() { corrupt.x.ncols() } else { clean.x.ncols() };
    let mut x = Array2::zeros((batch_size, dim));
    let mut labels = Vec::with_capacity(batch_size);
    let mut r = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        let idx = rng.random_range(0..total);
        let (pool, j, ri) = if idx < clean.len() { (clean, idx, 1.0) } else { (corrupt, idx - clean.len(), 0.0) };
        x.row_mut(i).assign(&pool.x.row(j));
        labels.push(pool.labels[j]);
        r.push(ri);
    }
    AugmentedBatch::from_hard(x, &labels, &r, num_classes)
}

fn sample_sigmas(rng: &mut LabRng, schedule: &NoiseSchedule, mode: TimeSampling, n: usize) -> Vec<f64> {
    match mode {
        TimeSampling::Discrete => {
            let levels = schedule.sigmas();
            (0..n).map(|_| levels[rng.random_range(0..levels.len())]).collect()
        }
        TimeSampling::Continuous => {
            let (lo, hi) = (schedule.sigma_min.ln(), schedule.sigma_max.ln());
            (0..n).map(|_| rng.random_range(lo..hi).exp()).collect()
        }
    }
}

/// Trains with uniform time weighting. See [`train_discriminator_weighted`].
pub fn train_discriminator(
    disc: &mut DiscriminatorModel,
    clean: &LabeledPool,
    corrupt: &LabeledPool,
    config: &DiscTrainConfig,
    seed: u64,
) -> Result<(LossTrace, Adam)> {
    train_discriminator_weighted(disc, clean, corrupt, config, seed, &|_| 1.0)
}

/// Each step: draw a batch proportionally from the pools, shuffle clean
/// labels, mix nearest neighbours, draw a noise level per row, perturb,
/// and take an Adam step on the weighted cross-entropy with row weight
/// `weight(sigma_i)`.
pub fn train_discriminator_weighted(
    disc: &mut DiscriminatorModel,
    clean: &LabeledPool,
    corrupt: &LabeledPool,
    config: &DiscTrainConfig,
    seed: u64,
    weight: &dyn Fn(f64) -> f64,
) -> Result<(LossTrace, Adam)> {
    config.aug.validate()?;
    if config.batch_size < 2 {
        return Err(Error::Config("discriminator batch_size must be at least 2".into()));
    }
    if clean.is_empty() || (corrupt.is_empty() && config.aug.shuffle_rate == 0.0) {
        return Err(Error::invalid("discriminator training needs nonempty clean and corrupt data"));
    }
    if config.aug.shuffle_rate > 0.0 && disc.num_classes < 2 {
        return Err(Error::invalid("label shuffling needs at least two classes"));
    }
    for pool in [clean, corrupt] {
        if !pool.is_empty() && pool.x.ncols() != disc.dim {
            return Err(Error::shape("pool dimension differs from the discriminator"));
        }
    }
    let mut opt = Adam::new(config.optimizer, &disc.net);
    let mut rng = rng::stream(seed, streams::DISC_TRAIN);
    let encoder = match config.aug.encoder {
        EncoderKind::Identity => IdentityEncoder,
    };
    let mut trace = LossTrace::default();
    let b = config.batch_size;
    for step in 0..config.steps {
        let mut batch = draw_batch(clean, corrupt, b, disc.num_classes, &mut rng)?;
        if config.aug.shuffle_rate > 0.0 {
            pseudo_clean_shuffle(&mut batch, config.aug.shuffle_rate, &mut rng)?;
        }
        if config.aug.simix_fraction > 0.0 {
            simix(&mut batch, config.aug.simix_alpha, config.aug.simix_fraction, &encoder, &mut rng)?;
        }
        let sigmas = sample_sigmas(&mut rng, &disc.schedule, config.time_sampling, b);
        batch.perturb(sigmas, &mut rng)?;
        let w: Vec<f64> = batch.sigmas.iter().map(|&s| weight(s)).collect();
        let input = disc.input(batch.x_t.view(), batch.y.view(), &batch.sigmas)?;
        let r = &batch.r;
        let loss = |out: ArrayView2<'_, f64>| {
            let mut per_row = Array1::zeros(b);
            let mut grad = Array2::zeros(out.raw_dim());
            for i in 0..b {
                let g = out[[i, 0]];
                per_row[i] = w[i] * (r[i] * softplus(-g) + (1.0 - r[i]) * softplus(g)) / b as f64;
                grad[[i, 0]] = w[i] * (sigmoid(g) - r[i]) / b as f64;
            }
            LossEval { per_row, grad }
        };
        let bp = match disc.net.backward(input.view(), &loss) {
            Ok(bp) => bp,
            Err(Error::NonFiniteLoss { .. }) => return Err(Error::Diverged { step }),
            Err(e) => return Err(e),
        };
        opt.config.lr = config.optimizer.lr * cosine_factor(step, config.steps, config.lr_final_fraction);
        opt.step(&mut disc.net, &bp.grads)?;
        trace.push(bp.loss);
    }
    opt.config.lr = config.optimizer.lr;
    Ok((trace, opt))
}
