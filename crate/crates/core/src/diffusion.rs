//! Forward perturbation, denoising score matching and a deterministic Heun
//! sampler.
//!
//! Both schedule conventions are handled through an equivalent noise level
//! `sigma`: a variance-preserving state `x_t = sqrt(abar) x0 + sqrt(1 - abar) eps`
//! equals `scale(sigma) * (x0 + sigma eps)` with `scale = 1 / sqrt(1 + sigma^2)`
//! and `sigma^2 = (1 - abar) / abar`. Networks, training and sampling work on
//! the unscaled variable `x0 + sigma eps`; schedule-native coordinates appear
//! only at the edges (perturbation, DSM targets, recorded trajectories).

use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, Checkpoint, DenseNetwork, LossEval, ModelRole};
use crate::rng::{self, streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[serde(alias = "ve")]
    VarianceExploding,
    #[serde(alias = "vp")]
    VariancePreserving,
}

/// Sampling discretization and noise scale.
///
/// Sampling levels follow `sigma_i = (smax^(1/rho) + i/(N-1) (smin^(1/rho) - smax^(1/rho)))^rho`
/// for `i = 0..N`, followed by a final step to `sigma = 0`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub steps: usize,
    /// Linear-beta parameters of the variance-preserving time axis,
    /// `abar(t) = exp(-(beta_min t + (beta_max - beta_min) t^2 / 2))`.
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
}

fn default_beta_min() -> f64 {
    0.1
}

fn default_beta_max() -> f64 {
    20.0
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::edm(18)
    }
}

impl NoiseSchedule {
    /// Variance-exploding schedule on `[0.002, 80]` with `rho = 7`.
    pub fn edm(steps: usize) -> Self {
        NoiseSchedule {
            kind: ScheduleKind::VarianceExploding,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            steps,
            beta_min: default_beta_min(),
            beta_max: default_beta_max(),
        }
    }

    /// Variance-preserving schedule with linear betas; the sampling levels
    /// span `t` in `[1e-3, 1]`.
    pub fn vp(steps: usize) -> Self {
        let mut s = NoiseSchedule {
            kind: ScheduleKind::VariancePreserving,
            sigma_min: 0.0,
            sigma_max: 0.0,
            rho: 7.0,
            steps,
            beta_min: default_beta_min(),
            beta_max: default_beta_max(),
        };
        s.sigma_min = s.vp_sigma(1e-3);
        s.sigma_max = s.vp_sigma(1.0);
        s
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0) || !(self.sigma_max > self.sigma_min) {
            return Err(Error::Config(format!(
                "schedule needs 0 < sigma_min < sigma_max, got [{}, {}]",
                self.sigma_min, self.sigma_max
            )));
        }
        if self.steps < 2 {
            return Err(Error::Config(format!("schedule needs at least 2 steps, got {}", self.steps)));
        }
        if !(self.rho > 0.0) {
            return Err(Error::Config("rho must be positive".into()));
        }
        if self.kind == ScheduleKind::VariancePreserving && !(self.beta_max > self.beta_min && self.beta_min > 0.0) {
            return Err(Error::Config("variance-preserving schedule needs 0 < beta_min < beta_max".into()));
        }
        Ok(())
    }

    /// The `steps` sampling noise levels, strictly decreasing.
    pub fn sigmas(&self) -> Vec<f64> {
        let n = self.steps;
        let a = self.sigma_max.powf(1.0 / self.rho);
        let b = self.sigma_min.powf(1.0 / self.rho);
        (0..n)
            .map(|i| {
                if i == 0 {
                    self.sigma_max
                } else if i + 1 == n {
                    self.sigma_min
                } else {
                    (a + i as f64 / (n - 1) as f64 * (b - a)).powf(self.rho)
                }
            })
            .collect()
    }

    fn vp_sigma(&self, t: f64) -> f64 {
        let bd = self.beta_max - self.beta_min;
        ((0.5 * bd * t * t + self.beta_min * t).exp() - 1.0).sqrt()
    }

    /// Noise level at schedule time `t`.
    pub fn sigma_at(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VarianceExploding => t,
            ScheduleKind::VariancePreserving => self.vp_sigma(t),
        }
    }

    /// Schedule time of noise level `sigma`.
    pub fn time_at(&self, sigma: f64) -> f64 {
        match self.kind {
            ScheduleKind::VarianceExploding => sigma,
            ScheduleKind::VariancePreserving => {
                let bd = self.beta_max - self.beta_min;
                let c = (sigma * sigma).ln_1p();
                (-self.beta_min + (self.beta_min * self.beta_min + 2.0 * bd * c).sqrt()) / bd
            }
        }
    }

    /// Multiplier taking the unscaled state `x0 + sigma eps` to schedule
    /// coordinates.
    pub fn scale_at(&self, sigma: f64) -> f64 {
        match self.kind {
            ScheduleKind::VarianceExploding => 1.0,
            ScheduleKind::VariancePreserving => 1.0 / (1.0 + sigma * sigma).sqrt(),
        }
    }

    /// `abar(t)` of the variance-preserving form; 1 for variance exploding.
    pub fn alpha_bar(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::VarianceExploding => 1.0,
            ScheduleKind::VariancePreserving => {
                let bd = self.beta_max - self.beta_min;
                (-(0.5 * bd * t * t + self.beta_min * t)).exp()
            }
        }
    }

    /// Continuous time range `[eps, T]`.
    pub fn time_range(&self) -> (f64, f64) {
        (self.time_at(self.sigma_min), self.time_at(self.sigma_max))
    }

    fn check_time(&self, t: f64) -> Result<()> {
        let (lo, hi) = self.time_range();
        let tol = 1e-12 * hi.abs().max(1.0);
        if !(t >= lo - tol && t <= hi + tol) {
            return Err(Error::TimeOutOfRange { t, lo, hi });
        }
        Ok(())
    }

    /// Forward kernel sample: `x0 + sigma(t) noise` (VE) or
    /// `sqrt(abar) x0 + sqrt(1 - abar) noise` (VP).
    pub fn perturb(&self, x0: &[f64], t: f64, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_time(t)?;
        if x0.len() != noise.len() {
            return Err(Error::shape("x0 and noise differ in dimension"));
        }
        Ok(match self.kind {
            ScheduleKind::VarianceExploding => {
                let s = self.sigma_at(t);
                x0.iter().zip(noise).map(|(x, e)| x + s * e).collect()
            }
            ScheduleKind::VariancePreserving => {
                let ab = self.alpha_bar(t);
                let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
                x0.iter().zip(noise).map(|(x, e)| a * x + b * e).collect()
            }
        })
    }

    /// `grad_{x_t} log p(x_t | x0)`.
    pub fn dsm_target(&self, x0: &[f64], x_t: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_time(t)?;
        if x0.len() != x_t.len() {
            return Err(Error::shape("x0 and x_t differ in dimension"));
        }
        match self.kind {
            ScheduleKind::VarianceExploding => {
                let s2 = self.sigma_at(t).powi(2);
                if !(s2 > 0.0) {
                    return Err(Error::invalid("noise level is zero"));
                }
                Ok(x0.iter().zip(x_t).map(|(a, b)| -(b - a) / s2).collect())
            }
            ScheduleKind::VariancePreserving => {
                let ab = self.alpha_bar(t);
                let var = 1.0 - ab;
                if !(var > 0.0) {
                    return Err(Error::invalid("noise level is zero"));
                }
                let a = ab.sqrt();
                Ok(x0.iter().zip(x_t).map(|(x0, xt)| -(xt - a * x0) / var).collect())
            }
        }
    }
}

pub const TIME_FEATURES: usize = 7;
const TIME_FREQUENCIES: [f64; 3] = [1.0, 2.0, 4.0];

/// `(c, sin(w c), cos(w c))` for `c = ln(sqrt(sigma^2 + floor^2)) / 4` and a
/// few frequencies. The embedding flattens out below `floor`.
pub fn time_features(sigma: f64, floor: f64) -> [f64; TIME_FEATURES] {
    let c = (sigma * sigma + floor * floor).ln() / 8.0;
    let mut f = [0.0; TIME_FEATURES];
    f[0] = c;
    for (i, w) in TIME_FREQUENCIES.iter().enumerate() {
        f[1 + 2 * i] = (w * c).sin();
        f[2 + 2 * i] = (w * c).cos();
    }
    f
}

/// Noise level below which the time embedding saturates, relative to the
/// data scale.
pub fn time_floor(sigma_data: f64) -> f64 {
    TIME_FLOOR_RATIO * sigma_data
}

pub const TIME_FLOOR_RATIO: f64 = 0.2;

/// Class conditioning rows for a batch: one-hot (or soft) label vectors.
pub(crate) fn one_hot(labels: &[usize], num_classes: usize) -> Result<Array2<f64>> {
    let mut m = Array2::zeros((labels.len(), num_classes));
    for (i, &y) in labels.iter().enumerate() {
        let y = if num_classes == 1 { 0 } else { y };
        if y >= num_classes {
            return Err(Error::invalid(format!("label {y} outside [0, {num_classes})")));
        }
        m[[i, y]] = 1.0;
    }
    Ok(m)
}

/// Network input rows `[c_in (x - mean), label vector, time features]`.
pub(crate) fn conditioned_input(
    x: ArrayView2<'_, f64>,
    label_rows: ArrayView2<'_, f64>,
    sigmas: &[f64],
    mean: &[f64],
    sigma_data: f64,
) -> Array2<f64> {
    let (b, d) = x.dim();
    let k = label_rows.ncols();
    let mut input = Array2::zeros((b, d + k + TIME_FEATURES));
    for i in 0..b {
        let sigma = sigmas[i];
        let c_in = 1.0 / (sigma * sigma + sigma_data * sigma_data).sqrt();
        for j in 0..d {
            input[[i, j]] = c_in * (x[[i, j]] - mean[j]);
        }
        for j in 0..k {
            input[[i, d + j]] = label_rows[[i, j]];
        }
        let tf = time_features(sigma, time_floor(sigma_data));
        for j in 0..TIME_FEATURES {
            input[[i, d + k + j]] = tf[j];
        }
    }
    input
}

/// A score field in unscaled coordinates: `grad_x log p_sigma(x | y)`.
pub trait ScoreField {
    fn dim(&self) -> usize;
    fn score(&self, x: ArrayView2<'_, f64>, labels: &[usize], sigma: f64) -> Result<Array2<f64>>;
}

/// Conditional score network with input/output preconditioning:
///
/// `s(x, y, sigma) = c_in^2 (sigma_data F(c_in (x - mu), y, t(sigma)) - (x - mu))`,
/// `c_in = 1 / sqrt(sigma^2 + sigma_data^2)`.
///
/// With `F = 0` this is the exact score of `N(mu, sigma_data^2 I)`, so the
/// network only has to learn the departure from a Gaussian. The implied
/// denoiser `x + sigma^2 s` moves by at most `sigma_data |dF|` for an output
/// error `dF`, at every noise level.
///
/// With `mirror_axis = Some(a)` the output is averaged with its reflection,
/// `F <- (F(x) + R F(R x)) / 2` where `R` reflects coordinate `a` about the
/// data mean, which makes the score exactly mirror-equivariant.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModel {
    pub net: DenseNetwork,
    pub dim: usize,
    pub num_classes: usize,
    pub schedule: NoiseSchedule,
    pub sigma_data: f64,
    pub data_mean: Vec<f64>,
    pub mirror_axis: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ScoreMeta {
    dim: usize,
    num_classes: usize,
    schedule: NoiseSchedule,
    sigma_data: f64,
    data_mean: Vec<f64>,
    #[serde(default)]
    mirror_axis: Option<usize>,
}

impl ScoreModel {
    pub fn new<R: Rng + ?Sized>(
        dim: usize,
        num_classes: usize,
        hidden: &[usize],
        schedule: NoiseSchedule,
        rng: &mut R,
    ) -> Result<Self> {
        schedule.validate()?;
        if num_classes == 0 || dim == 0 {
            return Err(Error::invalid("score model needs dim > 0 and at least one class"));
        }
        let mut widths = vec![dim + num_classes + TIME_FEATURES];
        widths.extend_from_slice(hidden);
        widths.push(dim);
        let mut net = DenseNetwork::new(&widths, rng)?;
        // start from the Gaussian score implied by the preconditioning
        let head = net.layers_mut().last_mut().unwrap();
        head.weight.fill(0.0);
        head.bias.fill(0.0);
        Ok(ScoreModel {
            net,
            dim,
            num_classes,
            schedule,
            sigma_data: 0.5,
            data_mean: vec![0.0; dim],
            mirror_axis: None,
        })
    }

    /// Sets the preconditioning constants from data: per-coordinate mean
    /// and the RMS per-coordinate standard deviation.
    pub fn fit_preconditioning(&mut self, x: ArrayView2<'_, f64>) -> Result<()> {
        if x.ncols() != self.dim || x.nrows() < 2 {
            return Err(Error::shape("preconditioning needs at least two rows of matching dimension"));
        }
        let mean = x.mean_axis(Axis(0)).unwrap();
        let var = x.var_axis(Axis(0), 0.0).mean().unwrap();
        self.data_mean = mean.to_vec();
        self.sigma_data = var.sqrt().max(1e-3);
        Ok(())
    }

    fn check_batch(&self, x: &ArrayView2<'_, f64>, labels: &[usize]) -> Result<()> {
        if x.ncols() != self.dim {
            return Err(Error::shape(format!("expected {} coordinates, got {}", self.dim, x.ncols())));
        }
        if labels.len() != x.nrows() {
            return Err(Error::shape(format!("{} labels for {} rows", labels.len(), x.nrows())));
        }
        Ok(())
    }

    fn input(&self, x: ArrayView2<'_, f64>, labels: &[usize], sigmas: &[f64]) -> Result<Array2<f64>> {
        let onehot = one_hot(labels, self.num_classes)?;
        Ok(conditioned_input(x, onehot.view(), sigmas, &self.data_mean, self.sigma_data))
    }

    /// Combines raw network output with the preconditioning.
    fn assemble(&self, x: ArrayView2<'_, f64>, raw: &Array2<f64>, sigmas: &[f64]) -> Array2<f64> {
        let mut out = raw.clone();
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let c2 = 1.0 / (sigmas[i].powi(2) + self.sigma_data.powi(2));
            for j in 0..self.dim {
                row[j] = c2 * (self.sigma_data * row[j] - (x[[i, j]] - self.data_mean[j]));
            }
        }
        out
    }

    /// Score at per-row noise levels, unscaled coordinates.
    pub fn score_rows(&self, x: ArrayView2<'_, f64>, labels: &[usize], sigmas: &[f64]) -> Result<Array2<f64>> {
        self.check_batch(&x, labels)?;
        let mut raw = self.net.forward(self.input(x, labels, sigmas)?.view())?;
        if let Some(a) = self.mirror_axis {
            let mut xr = x.to_owned();
            xr.column_mut(a).mapv_inplace(|v| 2.0 * self.data_mean[a] - v);
            let mut other = self.net.forward(self.input(xr.view(), labels, sigmas)?.view())?;
            other.column_mut(a).mapv_inplace(|v| -v);
            raw = (raw + other) * 0.5;
        }
        Ok(self.assemble(x, &raw, sigmas))
    }

    /// Score with respect to schedule-native `x_t` at schedule time `t`.
    pub fn score_at_time(&self, x_t: ArrayView2<'_, f64>, labels: &[usize], t: f64) -> Result<Array2<f64>> {
        self.schedule.check_time(t)?;
        let sigma = self.schedule.sigma_at(t);
        let scale = self.schedule.scale_at(sigma);
        let x = x_t.mapv(|v| v / scale);
        let s = self.score(x.view(), labels, sigma)?;
        Ok(s.mapv(|v| v / scale))
    }

    /// Denoised estimate `x + sigma^2 s(x, y, sigma)`.
    pub fn denoise(&self, x: ArrayView2<'_, f64>, labels: &[usize], sigma: f64) -> Result<Array2<f64>> {
        let s = self.score(x, labels, sigma)?;
        Ok(&x + &(s * (sigma * sigma)))
    }

    pub fn to_checkpoint(&self, optimizer: Option<&Adam>, seed: u64, step: u64) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(ModelRole::Score, &self.net, optimizer, seed, step);
        ck.model = serde_json::to_value(ScoreMeta {
            dim: self.dim,
            num_classes: self.num_classes,
            schedule: self.schedule.clone(),
            sigma_data: self.sigma_data,
            data_mean: self.data_mean.clone(),
            mirror_axis: self.mirror_axis,
        })?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_role(ModelRole::Score)?;
        let meta: ScoreMeta = serde_json::from_value(ck.model.clone())?;
        let net = ck.network()?;
        if net.input_width() != meta.dim + meta.num_classes + TIME_FEATURES || net.output_width() != meta.dim {
            return Err(Error::shape("score checkpoint widths disagree with its metadata"));
        }
        Ok(ScoreModel {
            net,
            dim: meta.dim,
            num_classes: meta.num_classes,
            schedule: meta.schedule,
            sigma_data: meta.sigma_data,
            data_mean: meta.data_mean,
            mirror_axis: meta.mirror_axis,
        })
    }
}

impl ScoreField for ScoreModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, x: ArrayView2<'_, f64>, labels: &[usize], sigma: f64) -> Result<Array2<f64>> {
        let sigmas = vec![sigma; x.nrows()];
        self.score_rows(x, labels, &sigmas)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Reflect this coordinate about the data mean with probability 1/2 and
    /// symmetrize the trained model's output along it.
    #[serde(default)]
    pub mirror_axis: Option<usize>,
    /// Learning rate decays along a half cosine to this fraction of its
    /// initial value.
    #[serde(default = "default_lr_floor")]
    pub lr_final_fraction: f64,
}

fn default_lr_floor() -> f64 {
    0.02
}

/// Half-cosine learning-rate factor at `step` of `total`.
pub(crate) fn cosine_factor(step: usize, total: usize, floor: f64) -> f64 {
    if total <= 1 {
        return 1.0;
    }
    let p = step as f64 / (total - 1) as f64;
    floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

impl Default for ScoreTrainConfig {
    fn default() -> Self {
        ScoreTrainConfig {
            steps: 4000,
            batch_size: 256,
            optimizer: AdamConfig { ..AdamConfig::default() },
            mirror_axis: None,
            lr_final_fraction: default_lr_floor(),
        }
    }
}

/// Per-step training losses.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub raw: Vec<f64>,
    /// Running minimum of an exponential moving average of `raw`; never
    /// increases.
    pub smoothed: Vec<f64>,
    #[serde(skip)]
    ema: Option<f64>,
}

impl LossTrace {
    pub(crate) fn push(&mut self, loss: f64) {
        const DECAY: f64 = 0.98;
        let ema = match self.ema {
            None => loss,
            Some(prev) => DECAY * prev + (1.0 - DECAY) * loss,
        };
        self.raw.push(loss);
        let best = self.smoothed.last().copied().unwrap_or(f64::INFINITY).min(ema);
        self.smoothed.push(best);
        self.ema = Some(ema);
    }

    pub fn final_smoothed(&self) -> Option<f64> {
        self.smoothed.last().copied()
    }
}

/// Fits the score model by denoising score matching on `(x, label)` pairs.
///
/// Each row draws `ln sigma ~ U(ln sigma_min, ln sigma_max)` and
/// `eps ~ N(0, I)`; the per-row loss is
/// `(1 + sigma^2 / sigma_data^2) |sigma s(x0 + sigma eps) + eps|^2`, which
/// weights the raw network residual evenly at large noise.
pub fn train_score(
    model: &mut ScoreModel,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    config: &ScoreTrainConfig,
    seed: u64,
) -> Result<(LossTrace, Adam)> {
    let mut opt = Adam::new(config.optimizer, &model.net);
    let trace = train_score_with(model, &mut opt, x, labels, config, seed)?;
    Ok((trace, opt))
}

pub fn train_score_with(
    model: &mut ScoreModel,
    opt: &mut Adam,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    config: &ScoreTrainConfig,
    seed: u64,
) -> Result<LossTrace> {
    model.check_batch(&x, labels)?;
    if x.nrows() == 0 {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    if let Some(a) = config.mirror_axis {
        if a >= model.dim {
            return Err(Error::Config(format!("mirror axis {a} out of range")));
        }
        model.mirror_axis = Some(a);
    }
    let mut rng = rng::stream(seed, streams::SCORE_TRAIN);
    let (ln_lo, ln_hi) = (model.schedule.sigma_min.ln(), model.schedule.sigma_max.ln());
    let n = x.nrows();
    let d = model.dim;
    let b = config.batch_size;
    let mut trace = LossTrace::default();
    let base_lr = opt.config.lr;
    let mut x0 = Array2::zeros((b, d));
    let mut eps = Array2::zeros((b, d));
    let mut xt = Array2::zeros((b, d));
    let mut batch_labels = vec![0usize; b];
    let mut sigmas = vec![0.0; b];
    for step in 0..config.steps {
        for i in 0..b {
            let idx = rng.random_range(0..n);
            batch_labels[i] = labels[idx];
            for j in 0..d {
                x0[[i, j]] = x[[idx, j]];
            }
            if let Some(a) = config.mirror_axis {
                if rng.random::<bool>() {
                    x0[[i, a]] = 2.0 * model.data_mean[a] - x0[[i, a]];
                }
            }
            sigmas[i] = rng.random_range(ln_lo..ln_hi).exp();
            for j in 0..d {
                let e: f64 = rng.sample(StandardNormal);
                eps[[i, j]] = e;
                xt[[i, j]] = x0[[i, j]] + sigmas[i] * e;
            }
        }
        let input = model.input(xt.view(), &batch_labels, &sigmas)?;
        let loss = |raw: ArrayView2<'_, f64>| {
            let mut per_row = Array1::zeros(b);
            let mut grad = Array2::zeros(raw.raw_dim());
            for i in 0..b {
                let sigma = sigmas[i];
                let sd = model.sigma_data;
                let c2 = 1.0 / (sigma * sigma + sd * sd);
                let w = 1.0 + sigma * sigma / (sd * sd);
                let mut acc = 0.0;
                for j in 0..d {
                    let s = c2 * (sd * raw[[i, j]] - (xt[[i, j]] - model.data_mean[j]));
                    let r = sigma * s + eps[[i, j]];
                    acc += w * r * r;
                    grad[[i, j]] = 2.0 * w * r * sigma * c2 * sd / b as f64;
                }
                per_row[i] = acc / b as f64;
            }
            LossEval { per_row, grad }
        };
        let bp = match model.net.backward(input.view(), &loss) {
            Ok(bp) => bp,
            Err(Error::NonFiniteLoss { .. }) => return Err(Error::Diverged { step }),
            Err(e) => return Err(e),
        };
        opt.config.lr = base_lr * cosine_factor(step, config.steps, config.lr_final_fraction);
        opt.step(&mut model.net, &bp.grads)?;
        trace.push(bp.loss);
    }
    opt.config.lr = base_lr;
    Ok(trace)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeunPhase {
    Predictor,
    Corrector,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HookContext {
    /// Sampling step, 0-based from the highest noise level.
    pub step: usize,
    pub sigma: f64,
    pub time: f64,
    pub phase: HeunPhase,
}

/// Additive score correction applied during sampling. Corrections are in
/// unscaled coordinates; `None` means no correction at this evaluation.
pub trait ScoreHook {
    fn correction(&self, ctx: &HookContext, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Option<Array2<f64>>>;
}

pub struct NoHook;

impl ScoreHook for NoHook {
    fn correction(&self, _: &HookContext, _: ArrayView2<'_, f64>, _: &[usize]) -> Result<Option<Array2<f64>>> {
        Ok(None)
    }
}

/// Batched sampling output. Index `k` of `states`/`denoised` is the state at
/// `sigmas[k]`; the last entry is the final sample at `sigma = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub labels: Vec<usize>,
    pub seed: u64,
    pub chain_offset: usize,
    pub sigmas: Vec<f64>,
    pub times: Vec<f64>,
    /// Schedule-native states, one `B x d` matrix per recorded step.
    pub states: Vec<Array2<f64>>,
    /// Denoised estimates at each recorded step.
    pub denoised: Vec<Array2<f64>>,
    /// Per-chain norm of the predictor-phase correction at each sampling step.
    pub correction_norms: Vec<Array1<f64>>,
}

impl SampleBatch {
    pub fn num_chains(&self) -> usize {
        self.labels.len()
    }

    pub fn num_steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn final_samples(&self) -> &Array2<f64> {
        self.states.last().unwrap()
    }

    pub fn trajectory(&self, chain: usize) -> Trajectory {
        let points = (0..self.states.len())
            .map(|k| TrajectoryPoint {
                step: k,
                t: self.times[k],
                x: self.states[k].row(chain).to_vec(),
                denoised: self.denoised[k].row(chain).to_vec(),
            })
            .collect();
        Trajectory {
            label: self.labels[chain],
            seed: self.seed,
            chain: self.chain_offset + chain,
            points,
        }
    }

    /// Concatenates chain blocks sampled with the same schedule.
    pub fn concat(parts: Vec<SampleBatch>) -> Result<SampleBatch> {
        let mut it = parts.into_iter();
        let mut out = it.next().ok_or_else(|| Error::invalid("nothing to concatenate"))?;
        for p in it {
            if p.sigmas != out.sigmas {
                return Err(Error::invalid("sample blocks use different schedules"));
            }
            out.labels.extend(p.labels);
            for (a, b) in out.states.iter_mut().zip(p.states) {
                *a = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap();
            }
            for (a, b) in out.denoised.iter_mut().zip(p.denoised) {
                *a = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap();
            }
            for (a, b) in out.correction_norms.iter_mut().zip(p.correction_norms) {
                *a = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).unwrap();
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub denoised: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub label: usize,
    pub seed: u64,
    pub chain: usize,
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// CSV `step,t,x0,x1,xhat0_0,xhat0_1` (2D trajectories only).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        if self.points.first().map_or(false, |p| p.x.len() != 2) {
            return Err(Error::shape("trajectory CSV expects 2D states"));
        }
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["step", "t", "x0", "x1", "xhat0_0", "xhat0_1"])?;
        for p in &self.points {
            wr.write_record([
                p.step.to_string(),
                format!("{:.16e}", p.t),
                format!("{:.16e}", p.x[0]),
                format!("{:.16e}", p.x[1]),
                format!("{:.16e}", p.denoised[0]),
                format!("{:.16e}", p.denoised[1]),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Initial states `sigma_max * z`, each chain drawing from its own stream.
fn initial_states(dim: usize, sigma_max: f64, seed: u64, chain_offset: usize, chains: usize) -> Array2<f64> {
    let mut x = Array2::zeros((chains, dim));
    for i in 0..chains {
        let mut r = rng::chain_stream(seed, chain_offset + i);
        for j in 0..dim {
            let z: f64 = r.sample(StandardNormal);
            x[[i, j]] = sigma_max * z;
        }
    }
    x
}

/// Deterministic second-order Heun integration of the probability-flow ODE
/// `dx/dsigma = -sigma * score(x, sigma)` over the schedule's levels, with a
/// final Euler step to `sigma = 0`. At every evaluation the score is
/// `field + hook`.
pub fn sample_batch<F, H>(
    field: &F,
    schedule: &NoiseSchedule,
    labels: &[usize],
    seed: u64,
    chain_offset: usize,
    hook: &H,
) -> Result<SampleBatch>
where
    F: ScoreField + ?Sized,
    H: ScoreHook + ?Sized,
{
    schedule.validate()?;
    let chains = labels.len();
    let d = field.dim();
    let mut sigmas = schedule.sigmas();
    sigmas.push(0.0);
    let times: Vec<f64> = sigmas.iter().map(|&s| if s > 0.0 { schedule.time_at(s) } else { 0.0 }).collect();
    let n = schedule.steps;

    let effective = |x: ArrayView2<'_, f64>, step: usize, phase: HeunPhase| -> Result<(Array2<f64>, Option<Array2<f64>>)> {
        let sigma = sigmas[step + usize::from(phase == HeunPhase::Corrector)];
        let mut s = field.score(x, labels, sigma)?;
        let ctx = HookContext { step, sigma, time: schedule.time_at(sigma), phase };
        let corr = hook.correction(&ctx, x, labels)?;
        if let Some(c) = &corr {
            if c.dim() != s.dim() {
                return Err(Error::shape("hook correction has the wrong shape"));
            }
            s += c;
        }
        Ok((s, corr))
    };

    let mut x = initial_states(d, sigmas[0], seed, chain_offset, chains);
    let mut states = Vec::with_capacity(n + 1);
    let mut denoised = Vec::with_capacity(n + 1);
    let mut correction_norms = Vec::with_capacity(n);
    for k in 0..n {
        let (sig, next) = (sigmas[k], sigmas[k + 1]);
        let (s, corr) = effective(x.view(), k, HeunPhase::Predictor)?;
        correction_norms.push(match corr {
            Some(c) => c.map_axis(Axis(1), |r| r.dot(&r).sqrt()),
            None => Array1::zeros(chains),
        });
        let x0_hat = &x + &(&s * (sig * sig));
        let drift = s.mapv(|v| -sig * v);
        states.push(x.mapv(|v| v * schedule.scale_at(sig)));
        denoised.push(x0_hat);
        let h = next - sig;
        let mut x_next = &x + &(&drift * h);
        if next > 0.0 {
            let (s2, _) = effective(x_next.view(), k, HeunPhase::Corrector)?;
            let drift2 = s2.mapv(|v| -next * v);
            x_next = &x + &((&drift + &drift2) * (0.5 * h));
        }
        if x_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: k });
        }
        x = x_next;
    }
    states.push(x.clone());
    denoised.push(x);
    Ok(SampleBatch {
        labels: labels.to_vec(),
        seed,
        chain_offset,
        sigmas,
        times,
        states,
        denoised,
        correction_norms,
    })
}

/// Single-chain sampling (chain index 0 of `seed`).
pub fn heun_sample<F, H>(field: &F, schedule: &NoiseSchedule, label: usize, seed: u64, hook: &H) -> Result<Trajectory>
where
    F: ScoreField + ?Sized,
    H: ScoreHook + ?Sized,
{
    Ok(sample_batch(field, schedule, &[label], seed, 0, hook)?.trajectory(0))
}

/// Chains are processed in fixed blocks of this size regardless of the
/// worker count, so outputs do not depend on parallelism.
pub const CHAIN_BLOCK: usize = 512;

/// Samples `labels.len()` chains in fixed-size blocks, running up to `jobs`
/// blocks concurrently.
pub fn sample_chains<F, H>(
    field: &F,
    schedule: &NoiseSchedule,
    labels: &[usize],
    seed: u64,
    hook: &H,
    jobs: usize,
) -> Result<SampleBatch>
where
    F: ScoreField + Sync + ?Sized,
    H: ScoreHook + Sync + ?Sized,
{
    if labels.is_empty() {
        return Err(Error::invalid("no chains requested"));
    }
    let blocks: Vec<(usize, &[usize])> = labels
        .chunks(CHAIN_BLOCK)
        .enumerate()
        .map(|(i, c)| (i * CHAIN_BLOCK, c))
        .collect();
    let jobs = jobs.max(1);
    let mut results: Vec<Option<Result<SampleBatch>>> = (0..blocks.len()).map(|_| None).collect();
    if jobs == 1 || blocks.len() == 1 {
        for (slot, (off, chunk)) in results.iter_mut().zip(&blocks) {
            *slot = Some(sample_batch(field, schedule, chunk, seed, *off, hook));
        }
    } else {
        for group in blocks.chunks(jobs).zip(results.chunks_mut(jobs)) {
            let (work, slots) = group;
            std::thread::scope(|scope| {
                let handles: Vec<_> = work
                    .iter()
                    .map(|(off, chunk)| scope.spawn(move || sample_batch(field, schedule, chunk, seed, *off, hook)))
                    .collect();
                for (slot, h) in slots.iter_mut().zip(handles) {
                    *slot = Some(h.join().expect("sampling worker panicked"));
                }
            });
        }
    }
    let parts = results.into_iter().map(|r| r.unwrap()).collect::<Result<Vec<_>>>()?;
    SampleBatch::concat(parts)
}

/// Slices rows `[start, end)` of every recorded step.
pub fn select_chains(batch: &SampleBatch, start: usize, end: usize) -> SampleBatch {
    SampleBatch {
        labels: batch.labels[start..end].to_vec(),
        seed: batch.seed,
        chain_offset: batch.chain_offset + start,
        sigmas: batch.sigmas.clone(),
        times: batch.times.clone(),
        states: batch.states.iter().map(|m| m.slice(s![start..end, ..]).to_owned()).collect(),
        denoised: batch.denoised.iter().map(|m| m.slice(s![start..end, ..]).to_owned()).collect(),
        correction_norms: batch.correction_norms.iter().map(|v| v.slice(s![start..end]).to_owned()).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{AnalyticMixture, MixtureScore};
    use crate::metrics::gaussian_frechet;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    struct ZeroHook;

    impl ScoreHook for ZeroHook {
        fn correction(&self, _: &HookContext, x: ArrayView2<'_, f64>, _: &[usize]) -> Result<Option<Array2<f64>>> {
            Ok(Some(Array2::zeros(x.raw_dim())))
        }
    }

    fn gaussian_field() -> MixtureScore {
        MixtureScore::new(vec![AnalyticMixture::gaussian(&[1.0, -0.5], 0.3).unwrap()]).unwrap()
    }

    #[test]
    fn sigma_levels_decrease_between_the_endpoints() {
        let s = NoiseSchedule::edm(18).sigmas();
        assert_eq!(s.len(), 18);
        assert_eq!((s[0], s[17]), (80.0, 0.002));
        assert!(s.windows(2).all(|w| w[0] > w[1]));
        let vp = NoiseSchedule::vp(10);
        assert!(vp.sigmas().windows(2).all(|w| w[0] > w[1]));
        assert!(NoiseSchedule::edm(1).validate().is_err());
    }

    #[test]
    fn perturb_examples() {
        let ve = NoiseSchedule::edm(18);
        assert_eq!(ve.perturb(&[0.3, -0.2], 5.0, &[0.0, 0.0]).unwrap(), vec![0.3, -0.2]);
        assert_eq!(ve.perturb(&[1.0, 1.0], 2.0, &[1.0, -1.0]).unwrap(), vec![3.0, -1.0]);
        assert!(matches!(ve.perturb(&[0.0, 0.0], 100.0, &[0.0, 0.0]), Err(Error::TimeOutOfRange { .. })));
        let vp = NoiseSchedule::vp(18);
        let (lo, _) = vp.time_range();
        let x = vp.perturb(&[1.0, 2.0], lo, &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(x[0], 1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(x[1], 2.0, epsilon = 1e-3);
    }

    #[test]
    fn vp_time_round_trips_through_sigma() {
        let vp = NoiseSchedule::vp(18);
        for t in [1e-3, 0.1, 0.5, 1.0] {
            assert_abs_diff_eq!(vp.time_at(vp.sigma_at(t)), t, epsilon = 1e-10);
            let s = vp.sigma_at(t);
            assert_abs_diff_eq!(vp.scale_at(s).powi(2), vp.alpha_bar(t), epsilon = 1e-12);
        }
    }

    #[test]
    fn dsm_target_examples() {
        let ve = NoiseSchedule::edm(18);
        assert_eq!(ve.dsm_target(&[0.4, 0.1], &[0.4, 0.1], 1.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(ve.dsm_target(&[0.0, 0.0], &[2.0, 0.0], 1.0).unwrap(), vec![-2.0, 0.0]);
    }

    #[test]
    fn dsm_target_matches_finite_differences() {
        for sched in [NoiseSchedule::edm(18), NoiseSchedule::vp(18)] {
            let t = sched.time_at(0.7);
            let (a, var) = match sched.kind {
                ScheduleKind::VarianceExploding => (1.0, 0.49),
                ScheduleKind::VariancePreserving => (sched.alpha_bar(t).sqrt(), 1.0 - sched.alpha_bar(t)),
            };
            let x0 = [0.3, -1.2];
            let xt = [0.9, -0.4];
            let logp = |x: [f64; 2]| -((x[0] - a * x0[0]).powi(2) + (x[1] - a * x0[1]).powi(2)) / (2.0 * var);
            let target = sched.dsm_target(&x0, &xt, t).unwrap();
            let h = 1e-5;
            for j in 0..2 {
                let (mut p, mut m) = (xt, xt);
                p[j] += h;
                m[j] -= h;
                assert_abs_diff_eq!(target[j], (logp(p) - logp(m)) / (2.0 * h), epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn untrained_model_is_the_preconditioning_gaussian() {
        let mut m = ScoreModel::new(2, 3, &[8], NoiseSchedule::edm(18), &mut rng::stream(0, 3)).unwrap();
        m.sigma_data = 0.5;
        m.data_mean = vec![1.0, -1.0];
        let x = array![[2.0, 0.0]];
        let s = m.score(x.view(), &[1], 0.5).unwrap();
        assert_abs_diff_eq!(s[[0, 0]], -1.0 / 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(s[[0, 1]], -1.0 / 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_steps_leave_parameters_unchanged() {
        let x = array![[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]];
        let mut m = ScoreModel::new(2, 2, &[8, 8], NoiseSchedule::edm(18), &mut rng::stream(1, 3)).unwrap();
        let before = m.net.clone();
        let cfg = ScoreTrainConfig { steps: 0, ..Default::default() };
        let (trace, _) = train_score(&mut m, x.view(), &[0, 1, 0], &cfg, 4).unwrap();
        assert!(trace.raw.is_empty());
        assert_eq!(m.net, before);
    }

    #[test]
    fn training_is_deterministic_and_reduces_loss() {
        let g = AnalyticMixture::gaussian(&[0.5, 0.0], 0.2).unwrap();
        let x = g.sample(500, &mut rng::stream(2, 1));
        let labels = vec![0; 500];
        let cfg = ScoreTrainConfig { steps: 300, batch_size: 64, ..Default::default() };
        let run = || {
            let mut m = ScoreModel::new(2, 1, &[16, 16], NoiseSchedule::edm(18), &mut rng::stream(2, 3)).unwrap();
            m.fit_preconditioning(x.view()).unwrap();
            let (t, _) = train_score(&mut m, x.view(), &labels, &cfg, 9).unwrap();
            (m, t)
        };
        let (a, ta) = run();
        let (b, tb) = run();
        assert_eq!(a.net, b.net);
        assert_eq!(ta.raw, tb.raw);
        assert!(ta.smoothed.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn non_finite_data_reports_divergence() {
        let x = array![[f64::MAX, 0.0], [0.0, 1.0]];
        let mut m = ScoreModel::new(2, 1, &[4], NoiseSchedule::edm(18), &mut rng::stream(0, 3)).unwrap();
        m.net.layers_mut().last_mut().unwrap().weight.fill(1.0);
        let cfg = ScoreTrainConfig { steps: 5, batch_size: 8, ..Default::default() };
        assert!(matches!(train_score(&mut m, x.view(), &[0, 0], &cfg, 0), Err(Error::Diverged { step: 0 })));
    }

    #[test]
    fn single_class_model_ignores_labels() {
        let m = ScoreModel::new(2, 1, &[8], NoiseSchedule::edm(18), &mut rng::stream(5, 3)).unwrap();
        let mut m = m;
        for l in m.net.layers_mut() {
            l.weight.mapv_inplace(|v| v + 0.1);
        }
        let x = array![[0.3, 0.2], [0.3, 0.2]];
        let s = m.score_rows(x.view(), &[0, 7], &[1.0, 1.0]).unwrap();
        assert_eq!(s.row(0), s.row(1));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = ScoreModel::new(2, 2, &[8], NoiseSchedule::vp(12), &mut rng::stream(3, 3)).unwrap();
        m.sigma_data = 0.7;
        let back = ScoreModel::from_checkpoint(&m.to_checkpoint(None, 3, 0).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn sampling_is_bitwise_reproducible_and_zero_hook_is_inert() {
        let f = gaussian_field();
        let s = NoiseSchedule::edm(10);
        let a = heun_sample(&f, &s, 0, 11, &NoHook).unwrap();
        let b = heun_sample(&f, &s, 0, 11, &NoHook).unwrap();
        let z = heun_sample(&f, &s, 0, 11, &ZeroHook).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, z);
        assert_eq!(a.len(), 11);
        assert!(a.points.windows(2).all(|w| w[0].t > w[1].t));
    }

    #[test]
    fn analytic_gaussian_sampling_recovers_moments() {
        let g = AnalyticMixture::gaussian(&[1.0, -0.5], 0.3).unwrap();
        let (mean, cov) = g.moments();
        // 18 Heun steps inflate this variance by ~11%; 64 steps leave <1%.
        for sched in [NoiseSchedule::edm(64), NoiseSchedule::vp(64)] {
            let batch = sample_chains(&gaussian_field(), &sched, &vec![0; 10_000], 3, &NoHook, 1).unwrap();
            let (m, c) = crate::metrics::moments(batch.final_samples().view());
            for j in 0..2 {
                assert!((m[j] - mean[j]).abs() <= 0.05 * mean[j].abs(), "{:?} mean {m}", sched.kind);
                assert!((c[(j, j)] - cov[(j, j)]).abs() <= 0.05 * cov[(j, j)], "{:?} cov {c}", sched.kind);
            }
            assert!(c[(0, 1)].abs() <= 0.05 * cov[(0, 0)]);
        }
    }

    #[test]
    fn refining_the_schedule_shrinks_the_change() {
        let f = MixtureScore::new(vec![AnalyticMixture::isotropic(&[vec![-1.0, 0.0], vec![1.0, 0.5]], 0.05, None).unwrap()])
            .unwrap();
        let labels = vec![0; 2000];
        let run = |n| sample_chains(&f, &NoiseSchedule::edm(n), &labels, 4, &NoHook, 1).unwrap().final_samples().clone();
        let (a, b, c) = (run(6), run(12), run(24));
        let d1 = gaussian_frechet(a.view(), b.view()).unwrap().value;
        let d2 = gaussian_frechet(b.view(), c.view()).unwrap().value;
        assert!(d2 < d1, "{d1} {d2}");
    }

    #[test]
    fn worker_count_does_not_change_samples() {
        let f = gaussian_field();
        let labels = vec![0; CHAIN_BLOCK * 2 + 37];
        let s = NoiseSchedule::edm(6);
        let one = sample_chains(&f, &s, &labels, 8, &NoHook, 1).unwrap();
        let three = sample_chains(&f, &s, &labels, 8, &NoHook, 3).unwrap();
        assert_eq!(one, three);
        let tail = sample_batch(&f, &s, &labels[CHAIN_BLOCK..], 8, CHAIN_BLOCK, &NoHook).unwrap();
        assert_eq!(tail.final_samples().row(0), one.final_samples().row(CHAIN_BLOCK));
    }

    #[test]
    fn trajectory_csv_header() {
        let t = heun_sample(&gaussian_field(), &NoiseSchedule::edm(4), 0, 1, &NoHook).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,t,x0,x1,xhat0_0,xhat0_1\n"));
        assert_eq!(text.lines().count(), 6);
    }
}
