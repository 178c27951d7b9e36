//! Labeled 2D datasets and label-noise operators.
//!
//! Noise operators only rewrite `y_obs`; coordinates and `y_true` are left
//! untouched.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use nalgebra::Matrix2;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::rng::{self, streams, LabRng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verification {
    Clean,
    Corrupt,
    Unknown,
}

/// Verified-label flag plus its soft weight in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifiedLabel {
    pub flag: Verification,
    pub weight: f64,
}

impl VerifiedLabel {
    pub fn clean() -> Self {
        VerifiedLabel { flag: Verification::Clean, weight: 1.0 }
    }

    pub fn corrupt() -> Self {
        VerifiedLabel { flag: Verification::Corrupt, weight: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint2D {
    pub x: [f64; 2],
    pub y_true: usize,
    pub y_obs: usize,
    pub r: Option<VerifiedLabel>,
}

impl LabeledPoint2D {
    pub fn new(x: [f64; 2], y: usize) -> Self {
        LabeledPoint2D { x, y_true: y, y_obs: y, r: None }
    }

    pub fn is_corrupted(&self) -> bool {
        self.y_obs != self.y_true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub points: Vec<LabeledPoint2D>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(points: Vec<LabeledPoint2D>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("dataset needs at least one class"));
        }
        if let Some(i) = points
            .iter()
            .position(|p| p.y_true >= num_classes || p.y_obs >= num_classes)
        {
            return Err(Error::invalid(format!("point {i} has a label outside [0, {num_classes})")));
        }
        Ok(Dataset { points, num_classes })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for p in &self.points {
            c[p.y_true] += 1;
        }
        c
    }

    pub fn class_counts_observed(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for p in &self.points {
            c[p.y_obs] += 1;
        }
        c
    }

    pub fn flip_fraction(&self) -> f64 {
        if self.points.is_empty() {
            return 0.0;
        }
        self.points.iter().filter(|p| p.is_corrupted()).count() as f64 / self.points.len() as f64
    }

    /// Coordinates as an `n x 2` matrix.
    pub fn coords(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.points.len(), 2), |(i, j)| self.points[i].x[j])
    }

    pub fn observed_labels(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.y_obs).collect()
    }

    pub fn true_labels(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.y_true).collect()
    }

    /// Points whose true label is `class`.
    pub fn class_coords(&self, class: usize) -> Array2<f64> {
        let rows: Vec<[f64; 2]> = self.points.iter().filter(|p| p.y_true == class).map(|p| p.x).collect();
        Array2::from_shape_fn((rows.len(), 2), |(i, j)| rows[i][j])
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// CSV with header `x0,x1,y_true,y_obs,r`; `r` is blank when unknown,
    /// otherwise the soft weight. Coordinates use 17 significant digits.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x0", "x1", "y_true", "y_obs", "r"])?;
        for p in &self.points {
            let r = match p.r {
                Some(v) if v.flag != Verification::Unknown => format!("{:.16e}", v.weight),
                _ => String::new(),
            };
            wr.write_record([
                format!("{:.16e}", p.x[0]),
                format!("{:.16e}", p.x[1]),
                p.y_true.to_string(),
                p.y_obs.to_string(),
                r,
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(File::create(path)?)
    }

    pub fn read_csv<R: std::io::Read>(reader: R, num_classes: usize) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(reader);
        let headers = rd.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["x0", "x1", "y_true", "y_obs", "r"] {
            return Err(Error::invalid(format!("unexpected dataset header {:?}", headers)));
        }
        let mut points = Vec::new();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let num = |i: usize| -> Result<f64> {
                field(i)
                    .parse::<f64>()
                    .map_err(|e| Error::invalid(format!("row {}: column {i}: {e}", line + 1)))
            };
            let label = |i: usize| -> Result<usize> {
                field(i)
                    .parse::<usize>()
                    .map_err(|e| Error::invalid(format!("row {}: column {i}: {e}", line + 1)))
            };
            let r = match field(4) {
                "" => None,
                s => {
                    let w: f64 = s
                        .parse()
                        .map_err(|e| Error::invalid(format!("row {}: r: {e}", line + 1)))?;
                    if !(0.0..=1.0).contains(&w) {
                        return Err(Error::invalid(format!("row {}: r = {w} outside [0, 1]", line + 1)));
                    }
                    let flag = if w >= 0.5 { Verification::Clean } else { Verification::Corrupt };
                    Some(VerifiedLabel { flag, weight: w })
                }
            };
            points.push(LabeledPoint2D { x: [num(0)?, num(1)?], y_true: label(2)?, y_obs: label(3)?, r });
        }
        Dataset::new(points, num_classes)
    }

    pub fn load_csv(path: &Path, num_classes: usize) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::read_csv(File::open(path)?, num_classes)
    }
}

/// Two interleaved half circles. Class 0 lies on the upper unit half circle
/// centred at the origin, class 1 on the lower half circle centred at
/// `(1, 0.5)`; arc angles are uniform on `[0, pi]` and `noise_std` adds
/// isotropic Gaussian jitter.
pub fn make_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid(format!("two moons needs n >= 2, got {n}")));
    }
    if !(noise_std >= 0.0) {
        return Err(Error::invalid("noise_std must be non-negative"));
    }
    let mut rng = rng::stream(seed, streams::DATASET);
    let n0 = n / 2;
    let mut points = Vec::with_capacity(n);
    for i in 0..n {
        let class = usize::from(i >= n0);
        let theta: f64 = rng.random_range(0.0..=std::f64::consts::PI);
        let mut x = moon_arc_point(class, theta);
        if noise_std > 0.0 {
            x[0] += noise_std * rng.sample::<f64, _>(StandardNormal);
            x[1] += noise_std * rng.sample::<f64, _>(StandardNormal);
        }
        points.push(LabeledPoint2D::new(x, class));
    }
    points.shuffle(&mut rng);
    Dataset::new(points, 2)
}

/// Noiseless arc point for angle `theta` in `[0, pi]`.
pub fn moon_arc_point(class: usize, theta: f64) -> [f64; 2] {
    if class == 0 {
        [theta.cos(), theta.sin()]
    } else {
        [1.0 - theta.cos(), 0.5 - theta.sin()]
    }
}

/// Gaussian mixture with a shared 2x2 covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub means: Vec<[f64; 2]>,
    pub cov: [[f64; 2]; 2],
    pub weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(means: Vec<[f64; 2]>, cov: [[f64; 2]; 2], weights: Option<Vec<f64>>) -> Result<Self> {
        let k = means.len();
        if k == 0 {
            return Err(Error::invalid("mixture needs at least one component"));
        }
        for i in 0..k {
            for j in i + 1..k {
                if means[i] == means[j] {
                    return Err(Error::invalid(format!("components {i} and {j} share a mean")));
                }
            }
        }
        let weights = weights.unwrap_or_else(|| vec![1.0 / k as f64; k]);
        if weights.len() != k || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::invalid("mixture weights must be non-negative, one per component"));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::invalid("mixture weights sum to zero"));
        }
        let gm = GaussianMixture {
            means,
            cov,
            weights: weights.into_iter().map(|w| w / total).collect(),
        };
        gm.cholesky()?;
        Ok(gm)
    }

    pub fn num_components(&self) -> usize {
        self.means.len()
    }

    fn cov_matrix(&self) -> Matrix2<f64> {
        Matrix2::new(self.cov[0][0], self.cov[0][1], self.cov[1][0], self.cov[1][1])
    }

    fn cholesky(&self) -> Result<Matrix2<f64>> {
        let c = self.cov_matrix();
        if (c[(0, 1)] - c[(1, 0)]).abs() > 1e-12 {
            return Err(Error::invalid("covariance must be symmetric"));
        }
        c.cholesky()
            .map(|ch| ch.l())
            .ok_or_else(|| Error::invalid("covariance is singular or not positive definite"))
    }

    /// Log density of component `k` at `x`, optionally convolved with
    /// isotropic Gaussian noise of standard deviation `sigma`.
    pub fn component_log_density(&self, k: usize, x: [f64; 2], sigma: f64) -> f64 {
        let c = self.cov_matrix() + Matrix2::identity() * (sigma * sigma);
        let det = c.determinant();
        let inv = c.try_inverse().expect("positive definite covariance");
        let d = nalgebra::Vector2::new(x[0] - self.means[k][0], x[1] - self.means[k][1]);
        let q = (d.transpose() * inv * d)[(0, 0)];
        -0.5 * q - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln()
    }

    /// Mixture density, optionally convolved with `N(0, sigma^2 I)`.
    pub fn density(&self, x: [f64; 2], sigma: f64) -> f64 {
        (0..self.num_components())
            .map(|k| self.weights[k] * self.component_log_density(k, x, sigma).exp())
            .sum()
    }

    pub fn sample(&self, n: usize, seed: u64) -> Result<Dataset> {
        let l = self.cholesky()?;
        let mut rng = rng::stream(seed, streams::DATASET);
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.num_components() - 1;
            for (j, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = j;
                    break;
                }
            }
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            let x = [
                self.means[k][0] + l[(0, 0)] * z0,
                self.means[k][1] + l[(1, 0)] * z0 + l[(1, 1)] * z1,
            ];
            points.push(LabeledPoint2D::new(x, k));
        }
        Dataset::new(points, self.num_components())
    }
}

/// `n` points from a `k`-component mixture with equal weights and shared
/// covariance; labels are component indices.
pub fn make_gaussian_mixture(
    k: usize,
    means: &[[f64; 2]],
    cov: [[f64; 2]; 2],
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if k < 2 {
        return Err(Error::invalid(format!("need at least 2 classes, got {k}")));
    }
    if means.len() != k {
        return Err(Error::invalid(format!("{} means for {k} classes", means.len())));
    }
    GaussianMixture::new(means.to_vec(), cov, None)?.sample(n, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseSpec {
    Symmetric { rate: f64 },
    Asymmetric { rate: f64, flip_map: Vec<usize> },
    #[serde(alias = "idn")]
    InstanceDependent { rate: f64 },
}

impl NoiseSpec {
    pub const KINDS: [&'static str; 3] = ["symmetric", "asymmetric", "instance_dependent"];

    pub fn rate(&self) -> f64 {
        match self {
            NoiseSpec::Symmetric { rate }
            | NoiseSpec::Asymmetric { rate, .. }
            | NoiseSpec::InstanceDependent { rate } => *rate,
        }
    }

    pub fn apply(&self, dataset: &Dataset, seed: u64) -> Result<Dataset> {
        match self {
            NoiseSpec::Symmetric { rate } => apply_symmetric_noise(dataset, *rate, seed),
            NoiseSpec::Asymmetric { rate, flip_map } => apply_asymmetric_noise(dataset, *rate, flip_map, seed),
            NoiseSpec::InstanceDependent { rate } => apply_idn_noise(dataset, *rate, seed).map(|o| o.dataset),
        }
    }

    /// Expected fraction of points whose observed label differs from the
    /// true label.
    pub fn expected_flip_fraction(&self, num_classes: usize) -> f64 {
        match self {
            NoiseSpec::Symmetric { rate } => rate * (num_classes as f64 - 1.0) / num_classes as f64,
            NoiseSpec::Asymmetric { rate, .. } => *rate,
            NoiseSpec::InstanceDependent { rate } => truncated_normal_mean(*rate, IDN_STD, 0.0, 1.0),
        }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::invalid(format!("noise rate {rate} outside [0, 1]")));
    }
    Ok(())
}

/// With probability `rate` each point's observed label is replaced by a
/// label drawn uniformly from all classes (it may coincide with the true one).
pub fn apply_symmetric_noise(dataset: &Dataset, rate: f64, seed: u64) -> Result<Dataset> {
    check_rate(rate)?;
    let mut rng = rng::stream(seed, streams::NOISE);
    let k = dataset.num_classes;
    let mut out = dataset.clone();
    for p in &mut out.points {
        let u: f64 = rng.random();
        let draw = rng.random_range(0..k);
        p.y_obs = if u < rate { draw } else { p.y_true };
    }
    Ok(out)
}

/// With probability `rate` each point's observed label becomes
/// `flip_map[y_true]`.
pub fn apply_asymmetric_noise(dataset: &Dataset, rate: f64, flip_map: &[usize], seed: u64) -> Result<Dataset> {
    check_rate(rate)?;
    let k = dataset.num_classes;
    if flip_map.len() != k || flip_map.iter().any(|&c| c >= k) {
        return Err(Error::invalid(format!("flip map must send each of {k} classes into [0, {k})")));
    }
    let mut rng = rng::stream(seed, streams::NOISE);
    let mut out = dataset.clone();
    for p in &mut out.points {
        let u: f64 = rng.random();
        p.y_obs = if u < rate { flip_map[p.y_true] } else { p.y_true };
    }
    Ok(out)
}

pub const IDN_STD: f64 = 0.1;

/// Instance-dependent noise together with the per-instance quantities that
/// produced it.
#[derive(Clone, Debug)]
pub struct IdnOutcome {
    pub dataset: Dataset,
    /// Per-instance flip rates.
    pub flip_rates: Vec<f64>,
    /// Per-instance label distributions the noisy label was drawn from.
    pub label_probs: Vec<Vec<f64>>,
    /// One `2 x K` projection per class, row-major.
    pub projections: Vec<Array2<f64>>,
}

/// Instance-dependent label noise:
/// 1. `q_i ~ N(rate, 0.1^2)` truncated to `[0, 1]`;
/// 2. one `2 x K` projection per class with standard normal entries;
/// 3. class scores `p = x_i W_{y_i}`, the true class masked to `-inf`;
/// 4. `p = q_i softmax(p)`, then `p_{y_i} = 1 - q_i`;
/// 5. the observed label is drawn from `p`.
pub fn apply_idn_noise(dataset: &Dataset, rate: f64, seed: u64) -> Result<IdnOutcome> {
    check_rate(rate)?;
    let k = dataset.num_classes;
    let mut rng = rng::stream(seed, streams::NOISE);
    let n = dataset.len();
    let flip_rates: Vec<f64> = (0..n)
        .map(|_| sample_truncated_normal(&mut rng, rate, IDN_STD, 0.0, 1.0))
        .collect();
    let projections: Vec<Array2<f64>> = (0..k)
        .map(|_| Array2::from_shape_fn((2, k), |_| rng.sample(StandardNormal)))
        .collect();
    let mut out = dataset.clone();
    let mut label_probs = Vec::with_capacity(n);
    for (p, &q) in out.points.iter_mut().zip(&flip_rates) {
        let probs = idn_label_distribution(p.x, p.y_true, q, &projections[p.y_true]);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = k - 1;
        for (c, &pc) in probs.iter().enumerate() {
            acc += pc;
            if u < acc {
                chosen = c;
                break;
            }
        }
        p.y_obs = chosen;
        label_probs.push(probs);
    }
    Ok(IdnOutcome { dataset: out, flip_rates, label_probs, projections })
}

/// Label distribution for one instance given its flip rate and its class
/// projection (`2 x K`).
pub fn idn_label_distribution(x: [f64; 2], y: usize, q: f64, projection: &Array2<f64>) -> Vec<f64> {
    let k = projection.ncols();
    if k == 1 {
        return vec![1.0];
    }
    let scores: Vec<f64> = (0..k)
        .map(|c| {
            if c == y {
                f64::NEG_INFINITY
            } else {
                x[0] * projection[[0, c]] + x[1] * projection[[1, c]]
            }
        })
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let mut p: Vec<f64> = exps.iter().map(|e| q * e / z).collect();
    p[y] = 1.0 - q;
    p
}

/// Rejection sampling from `N(mean, std^2)` restricted to `[lo, hi]`.
pub fn sample_truncated_normal(rng: &mut LabRng, mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
    let normal = Normal::new(mean, std).expect("valid normal");
    loop {
        let v: f64 = normal.sample(rng);
        if (lo..=hi).contains(&v) {
            return v;
        }
    }
}

/// Mean of `N(mean, std^2)` truncated to `[lo, hi]`.
pub fn truncated_normal_mean(mean: f64, std: f64, lo: f64, hi: f64) -> f64 {
    let a = (lo - mean) / std;
    let b = (hi - mean) / std;
    let z = std_normal_cdf(b) - std_normal_cdf(a);
    mean + std * (std_normal_pdf(a) - std_normal_pdf(b)) / z
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}
