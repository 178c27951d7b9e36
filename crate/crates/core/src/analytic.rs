//! Closed-form Gaussian-mixture scores and log-ratios.
//!
//! These plug into the sampler and guidance hook in place of trained
//! networks and serve as oracles in tests.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::GaussianMixture;
use crate::diffusion::ScoreField;
use crate::error::{Error, Result};
use crate::guidance::LogitField;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianComponent {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// Gaussian mixture in any dimension, convolved on demand with `N(0, sigma^2 I)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticMixture {
    dim: usize,
    components: Vec<GaussianComponent>,
}

struct Prepared {
    log_coef: f64,
    mean: DVector<f64>,
    precision: DMatrix<f64>,
}

impl AnalyticMixture {
    pub fn new(components: Vec<GaussianComponent>) -> Result<Self> {
        let first = components.first().ok_or_else(|| Error::invalid("mixture needs a component"))?;
        let dim = first.mean.len();
        let total: f64 = components.iter().map(|c| c.weight).sum();
        for c in &components {
            if c.mean.len() != dim || c.cov.shape() != (dim, dim) {
                return Err(Error::shape("mixture components disagree in dimension"));
            }
            if !(c.weight > 0.0) {
                return Err(Error::invalid("component weights must be positive"));
            }
            if c.cov.clone().cholesky().is_none() {
                return Err(Error::invalid("component covariance is not positive definite"));
            }
        }
        let components = components
            .into_iter()
            .map(|c| GaussianComponent { weight: c.weight / total, ..c })
            .collect();
        Ok(AnalyticMixture { dim, components })
    }

    /// Single Gaussian `N(mean, var I)`.
    pub fn gaussian(mean: &[f64], var: f64) -> Result<Self> {
        Self::isotropic(&[mean.to_vec()], var, None)
    }

    /// Equal-variance isotropic components.
    pub fn isotropic(means: &[Vec<f64>], var: f64, weights: Option<&[f64]>) -> Result<Self> {
        let comps = means
            .iter()
            .enumerate()
            .map(|(i, m)| GaussianComponent {
                weight: weights.map_or(1.0, |w| w[i]),
                mean: DVector::from_column_slice(m),
                cov: DMatrix::identity(m.len(), m.len()) * var,
            })
            .collect();
        Self::new(comps)
    }

    /// Weighted union of mixtures, e.g. a contaminated pool.
    pub fn blend(parts: &[(f64, &AnalyticMixture)]) -> Result<Self> {
        let mut comps = Vec::new();
        for (w, m) in parts {
            for c in &m.components {
                if *w > 0.0 {
                    comps.push(GaussianComponent { weight: w * c.weight, ..c.clone() });
                }
            }
        }
        Self::new(comps)
    }

    /// Single component `k` of a dataset mixture.
    pub fn from_component(gm: &GaussianMixture, k: usize) -> Result<Self> {
        let m = gm.means[k];
        let c = gm.cov;
        Self::new(vec![GaussianComponent {
            weight: 1.0,
            mean: DVector::from_column_slice(&m),
            cov: DMatrix::from_row_slice(2, 2, &[c[0][0], c[0][1], c[1][0], c[1][1]]),
        }])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    fn prepare(&self, sigma: f64) -> Vec<Prepared> {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        self.components
            .iter()
            .map(|c| {
                let cov = &c.cov + DMatrix::identity(self.dim, self.dim) * (sigma * sigma);
                let chol = cov.cholesky().expect("positive definite after adding noise");
                let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                Prepared {
                    log_coef: c.weight.ln() - 0.5 * (self.dim as f64 * ln2pi + logdet),
                    mean: c.mean.clone(),
                    precision: chol.inverse(),
                }
            })
            .collect()
    }

    fn eval_prepared(prep: &[Prepared], x: &DVector<f64>) -> (f64, DVector<f64>) {
        let terms: Vec<(f64, DVector<f64>)> = prep
            .iter()
            .map(|p| {
                let diff = x - &p.mean;
                let pd = &p.precision * &diff;
                (p.log_coef - 0.5 * diff.dot(&pd), -pd)
            })
            .collect();
        let max = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        let mut grad = DVector::zeros(x.len());
        for (l, g) in &terms {
            let w = (l - max).exp();
            z += w;
            grad += g * w;
        }
        (max + z.ln(), grad / z)
    }

    /// `log p_sigma(x)` and `grad_x log p_sigma(x)` for each row.
    pub fn log_density_and_score(&self, x: ArrayView2<'_, f64>, sigma: f64) -> Result<(Array1<f64>, Array2<f64>)> {
        if x.ncols() != self.dim {
            return Err(Error::shape(format!("expected {} coordinates, got {}", self.dim, x.ncols())));
        }
        let prep = self.prepare(sigma);
        let mut logp = Array1::zeros(x.nrows());
        let mut score = Array2::zeros(x.raw_dim());
        for (i, row) in x.rows().into_iter().enumerate() {
            let v = DVector::from_iterator(self.dim, row.iter().copied());
            let (l, g) = Self::eval_prepared(&prep, &v);
            logp[i] = l;
            for j in 0..self.dim {
                score[[i, j]] = g[j];
            }
        }
        Ok((logp, score))
    }

    pub fn log_density(&self, x: &[f64], sigma: f64) -> Result<f64> {
        let v = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.log_density_and_score(v, sigma)?.0[0])
    }

    pub fn score_at(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let v = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.log_density_and_score(v, sigma)?.1.row(0).to_vec())
    }

    /// Mixture mean and covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let mut mean = DVector::zeros(self.dim);
        for c in &self.components {
            mean += &c.mean * c.weight;
        }
        let mut cov = DMatrix::zeros(self.dim, self.dim);
        for c in &self.components {
            let d = &c.mean - &mean;
            cov += (&c.cov + &d * d.transpose()) * c.weight;
        }
        (mean, cov)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let chols: Vec<DMatrix<f64>> =
            self.components.iter().map(|c| c.cov.clone().cholesky().unwrap().l()).collect();
        let mut out = Array2::zeros((n, self.dim));
        for i in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.components.len() - 1;
            for (j, c) in self.components.iter().enumerate() {
                acc += c.weight;
                if u < acc {
                    k = j;
                    break;
                }
            }
            let z = DVector::from_iterator(self.dim, (0..self.dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let v = &self.components[k].mean + &chols[k] * z;
            for j in 0..self.dim {
                out[[i, j]] = v[j];
            }
        }
        out
    }
}

fn class_index(labels_per_class: usize, y: usize) -> Result<usize> {
    if labels_per_class == 1 {
        Ok(0)
    } else if y < labels_per_class {
        Ok(y)
    } else {
        Err(Error::invalid(format!("label {y} outside [0, {labels_per_class})")))
    }
}

/// Exact class-conditional score `grad log p_sigma(x | y)` of one mixture
/// per class. With a single class, labels are ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureScore {
    pub classes: Vec<AnalyticMixture>,
}

impl MixtureScore {
    pub fn new(classes: Vec<AnalyticMixture>) -> Result<Self> {
        let d = classes.first().ok_or_else(|| Error::invalid("no classes"))?.dim();
        if classes.iter().any(|c| c.dim() != d) {
            return Err(Error::shape("class mixtures disagree in dimension"));
        }
        Ok(MixtureScore { classes })
    }
}

/// Applies `f` to the rows of each label group and scatters the results back.
fn per_label(
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    groups: usize,
    width: usize,
    mut f: impl FnMut(usize, ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array2<f64>)>,
) -> Result<(Array1<f64>, Array2<f64>)> {
    if labels.len() != x.nrows() {
        return Err(Error::shape(format!("{} labels for {} rows", labels.len(), x.nrows())));
    }
    let mut vals = Array1::zeros(x.nrows());
    let mut grads = Array2::zeros((x.nrows(), width));
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); groups];
    for (i, &y) in labels.iter().enumerate() {
        buckets[class_index(groups, y)?].push(i);
    }
    for (c, rows) in buckets.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let sub = x.select(ndarray::Axis(0), rows);
        let (v, g) = f(c, sub.view())?;
        for (k, &i) in rows.iter().enumerate() {
            vals[i] = v[k];
            grads.row_mut(i).assign(&g.row(k));
        }
    }
    Ok((vals, grads))
}

impl ScoreField for MixtureScore {
    fn dim(&self) -> usize {
        self.classes[0].dim()
    }

    fn score(&self, x: ArrayView2<'_, f64>, labels: &[usize], sigma: f64) -> Result<Array2<f64>> {
        let d = self.dim();
        let (_, s) = per_label(x, labels, self.classes.len(), d, |c, sub| {
            self.classes[c].log_density_and_score(sub, sigma)
        })?;
        Ok(s)
    }
}

/// Exact log density ratio `log p_real_sigma(x | y) - log p_fake_sigma(x | y)`,
/// the optimum of the discriminator objective.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureLogRatio {
    pub real: Vec<AnalyticMixture>,
    pub fake: Vec<AnalyticMixture>,
}

impl MixtureLogRatio {
    pub fn new(real: Vec<AnalyticMixture>, fake: Vec<AnalyticMixture>) -> Result<Self> {
        if real.is_empty() || real.len() != fake.len() {
            return Err(Error::invalid("need one real and one fake mixture per class"));
        }
        let d = real[0].dim();
        if real.iter().chain(&fake).any(|m| m.dim() != d) {
            return Err(Error::shape("mixtures disagree in dimension"));
        }
        Ok(MixtureLogRatio { real, fake })
    }

    fn eval(&self, x: ArrayView2<'_, f64>, labels: &[usize], sigma: f64) -> Result<(Array1<f64>, Array2<f64>)> {
        per_label(x, labels, self.real.len(), self.real[0].dim(), |c, sub| {
            let (lr, sr) = self.real[c].log_density_and_score(sub, sigma)?;
            let (lf, sf) = self.fake[c].log_density_and_score(sub, sigma)?;
            Ok((lr - lf, sr - sf))
        })
    }

    /// `p_real / (p_real + p_fake)`, the optimal discriminator output.
    pub fn optimal_output(&self, x: ArrayView2<'_, f64>, labels: &[usize], sigma: f64) -> Result<Array1<f64>> {
        Ok(self.logit(x, labels, sigma)?.mapv(crate::nn::sigmoid))
    }
}

impl LogitField for MixtureLogRatio {
    fn dim(&self) -> usize {
        self.real[0].dim()
    }

    fn logit(&self, x: ArrayView2<'_, f64>, labels: &[usize], sigma: f64) -> Result<Array1<f64>> {
        Ok(self.eval(x, labels, sigma)?.0)
    }

    fn logit_grad(&self, x: ArrayView2<'_, f64>, labels: &[usize], sigma: f64) -> Result<Array2<f64>> {
        Ok(self.eval(x, labels, sigma)?.1)
    }
}
