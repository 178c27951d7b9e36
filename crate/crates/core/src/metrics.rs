//! Diagnostics: a Bayes-oracle classifier, confidence and instability
//! curves along sampling trajectories, Gaussian Fréchet distance and k-NN
//! density/coverage, overall and per class.
//!
//! All sample-quality metrics operate on raw coordinates; no embedding is
//! involved.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::analytic::AnalyticMixture;
use crate::data::{moon_arc_point, GaussianMixture};
use crate::diffusion::{sample_chains, NoHook, NoiseSchedule, SampleBatch, ScoreField};
use crate::error::{Error, Result};
use crate::rng::{self, streams};

#[derive(Clone, Debug, PartialEq)]
enum ClassDensity {
    Mixture(AnalyticMixture),
    /// Equal-weight isotropic Gaussian kernels of one bandwidth.
    Kernel { centers: Vec<[f64; 2]>, bandwidth: f64 },
}

impl ClassDensity {
    fn log_density(&self, x: [f64; 2]) -> f64 {
        match self {
            ClassDensity::Mixture(m) => m.log_density(&x, 0.0).expect("2D mixture"),
            ClassDensity::Kernel { centers, bandwidth } => {
                let h2 = bandwidth * bandwidth;
                let logs: Vec<f64> = centers
                    .iter()
                    .map(|c| -((x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2)) / (2.0 * h2))
                    .collect();
                let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = logs.iter().map(|l| (l - m).exp()).sum();
                m + (s / centers.len() as f64).ln() - (2.0 * std::f64::consts::PI * h2).ln()
            }
        }
    }
}

/// Posterior classifier from known class-conditional densities and priors.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesClassifier {
    classes: Vec<ClassDensity>,
    log_priors: Vec<f64>,
}

/// Kernel centres per moon arc.
pub const MOON_ARC_POINTS: usize = 512;

impl BayesClassifier {
    /// Exact classifier for a Gaussian mixture dataset.
    pub fn gaussian_mixture(gm: &GaussianMixture) -> Result<Self> {
        let classes = (0..gm.means.len())
            .map(|k| AnalyticMixture::from_component(gm, k).map(ClassDensity::Mixture))
            .collect::<Result<Vec<_>>>()?;
        let total: f64 = gm.weights.iter().sum();
        Ok(BayesClassifier { classes, log_priors: gm.weights.iter().map(|w| (w / total).ln()).collect() })
    }

    /// Two-moons classifier: each class density is the arc blurred by
    /// `N(0, noise_std^2 I)`, approximated by kernels at evenly spaced arc
    /// positions. Equal priors.
    pub fn two_moons(noise_std: f64) -> Result<Self> {
        if !(noise_std > 0.0) {
            return Err(Error::invalid("two-moons classifier needs a positive bandwidth"));
        }
        let classes = (0..2)
            .map(|c| {
                let centers = (0..MOON_ARC_POINTS)
                    .map(|i| moon_arc_point(c, std::f64::consts::PI * (i as f64 + 0.5) / MOON_ARC_POINTS as f64))
                    .collect();
                ClassDensity::Kernel { centers, bandwidth: noise_std }
            })
            .collect();
        Ok(BayesClassifier { classes, log_priors: vec![0.5f64.ln(); 2] })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn posterior(&self, x: [f64; 2]) -> Vec<f64> {
        let logs: Vec<f64> = self.classes.iter().zip(&self.log_priors).map(|(c, p)| c.log_density(x) + p).collect();
        let m = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            return vec![1.0 / logs.len() as f64; logs.len()];
        }
        let e: Vec<f64> = logs.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.iter().map(|v| v / z).collect()
    }

    /// Most probable class; ties go to the lowest index.
    pub fn classify(&self, x: [f64; 2]) -> usize {
        let p = self.posterior(x);
        let mut best = 0;
        for (i, &v) in p.iter().enumerate() {
            if v > p[best] {
                best = i;
            }
        }
        best
    }

    pub fn classify_rows(&self, x: ArrayView2<'_, f64>) -> Result<Vec<usize>> {
        if x.ncols() != 2 {
            return Err(Error::shape("the Bayes classifier expects 2D points"));
        }
        Ok(x.rows().into_iter().map(|r| self.classify([r[0], r[1]])).collect())
    }
}

/// Per-step confidence `C` and instability `I` along sampling trajectories.
///
/// `confidence[k]` is the fraction of chains whose denoised estimate at step
/// `k` is classified as the conditioning label. `instability[k]` is the
/// fraction whose classification changes between steps `k` and `k + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseCurves {
    pub sigmas: Vec<f64>,
    pub times: Vec<f64>,
    pub confidence: Vec<f64>,
    pub instability: Vec<f64>,
    /// Zero when read back from CSV, which does not record it.
    pub chains: usize,
}

impl PhaseCurves {
    /// Curves from a batch of unguided (or guided) trajectories.
    pub fn from_batch(batch: &SampleBatch, classifier: &BayesClassifier) -> Result<Self> {
        let n = batch.num_steps();
        let chains = batch.num_chains();
        if chains == 0 {
            return Err(Error::invalid("no chains"));
        }
        let classes: Vec<Vec<usize>> =
            (0..n).map(|k| classifier.classify_rows(batch.denoised[k].view())).collect::<Result<_>>()?;
        let confidence = classes
            .iter()
            .map(|c| c.iter().zip(&batch.labels).filter(|(a, b)| a == b).count() as f64 / chains as f64)
            .collect();
        let instability = classes
            .windows(2)
            .map(|w| w[0].iter().zip(&w[1]).filter(|(a, b)| a != b).count() as f64 / chains as f64)
            .collect();
        Ok(PhaseCurves {
            sigmas: batch.sigmas[..n].to_vec(),
            times: batch.times[..n].to_vec(),
            confidence,
            instability,
            chains,
        })
    }

    pub fn num_steps(&self) -> usize {
        self.confidence.len()
    }

    /// CSV `step,t,confidence,instability`; the instability column of the
    /// last step is empty.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["step", "t", "confidence", "instability"])?;
        for k in 0..self.num_steps() {
            wr.write_record([
                k.to_string(),
                format!("{:.16e}", self.times[k]),
                format!("{:.16e}", self.confidence[k]),
                self.instability.get(k).map_or(String::new(), |v| format!("{v:.16e}")),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let (mut times, mut confidence, mut instability) = (Vec::new(), Vec::new(), Vec::new());
        for rec in rd.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .unwrap_or("")
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad phase-curve field {:?}", rec.get(i))))
            };
            times.push(num(1)?);
            confidence.push(num(2)?);
            if !rec.get(3).unwrap_or("").is_empty() {
                instability.push(num(3)?);
            }
        }
        if confidence.is_empty() {
            return Err(Error::invalid("phase-curve file has no rows"));
        }
        Ok(PhaseCurves { sigmas: times.clone(), times, confidence, instability, chains: 0 })
    }
}

/// Runs `chains` unguided chains with labels drawn uniformly from `0..K`
/// and measures their phase curves.
pub fn measure_phase_curves<F: ScoreField + Sync + ?Sized>(
    field: &F,
    schedule: &NoiseSchedule,
    num_classes: usize,
    chains: usize,
    seed: u64,
    classifier: &BayesClassifier,
    jobs: usize,
) -> Result<PhaseCurves> {
    if chains == 0 {
        return Err(Error::invalid("need at least one chain"));
    }
    let labels = chain_labels(num_classes, chains, seed);
    let batch = sample_chains(field, schedule, &labels, seed, &NoHook, jobs)?;
    PhaseCurves::from_batch(&batch, classifier)
}

/// Conditioning labels drawn uniformly from `0..num_classes`.
pub fn chain_labels(num_classes: usize, chains: usize, seed: u64) -> Vec<usize> {
    use rand::Rng;
    let mut r = rng::stream(seed, streams::CHAIN_LABELS);
    (0..chains).map(|_| r.random_range(0..num_classes.max(1))).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalSuggestion {
    pub s_clip_min: f64,
    pub s_clip_max: f64,
    pub steps: Vec<usize>,
    pub warning: Option<String>,
}

/// Smallest noise interval covering every step with
/// `instability >= fraction * max`. The interval for steps `a..=b` is
/// `(sigma_{b+1}, sigma_{a-1}]`, clamped to the schedule ends. A flat curve
/// yields the full range with a warning.
pub fn suggest_interval(curves: &PhaseCurves, fraction: f64) -> Result<IntervalSuggestion> {
    if curves.instability.is_empty() || curves.sigmas.is_empty() {
        return Err(Error::invalid("empty phase curves"));
    }
    let i = &curves.instability;
    let max = i.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = i.iter().copied().fold(f64::INFINITY, f64::min);
    let s = &curves.sigmas;
    let top = s[0];
    if max - min <= 1e-12 {
        return Ok(IntervalSuggestion {
            s_clip_min: 0.0,
            s_clip_max: top,
            steps: (0..s.len()).collect(),
            warning: Some("instability curve is flat; using the full noise range".into()),
        });
    }
    let steps: Vec<usize> = (0..i.len()).filter(|&k| i[k] >= fraction * max).collect();
    let (a, b) = (steps[0], *steps.last().unwrap());
    let hi = if a == 0 { top } else { s[a - 1] };
    let lo = if b + 1 < s.len() { s[b + 1] } else { 0.0 };
    Ok(IntervalSuggestion { s_clip_min: lo, s_clip_max: hi, steps, warning: None })
}

/// Gaussian Fréchet distance between two point sets, with a flag telling
/// whether a covariance had to be regularized.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frechet {
    pub value: f64,
    pub regularized: bool,
}

/// Mean and unbiased covariance of the rows.
pub fn moments(x: ArrayView2<'_, f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let d = x.ncols();
    let mean = x.mean_axis(Axis(0)).unwrap();
    let mut cov = DMatrix::zeros(d, d);
    for row in x.rows() {
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (row[a] - mean[a]) * (row[b] - mean[b]);
            }
        }
    }
    (DVector::from_iterator(d, mean.iter().copied()), cov / (n as f64 - 1.0))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

const DEGENERATE: f64 = 1e-12;
const RIDGE: f64 = 1e-10;

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)` over
/// fitted means and unbiased covariances.
pub fn gaussian_frechet(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Frechet> {
    if a.nrows() < 3 || b.nrows() < 3 {
        return Err(Error::invalid("Fréchet distance needs at least 3 points per set"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::shape("point sets differ in dimension"));
    }
    let (ma, mut sa) = moments(a);
    let (mb, mut sb) = moments(b);
    let d = a.ncols();
    let mut regularized = false;
    for s in [&mut sa, &mut sb] {
        let min = SymmetricEigen::new(s.clone()).eigenvalues.min();
        if min <= DEGENERATE {
            *s += DMatrix::identity(d, d) * RIDGE;
            regularized = true;
        }
    }
    let ra = sym_sqrt(&sa);
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = SymmetricEigen::new(inner).eigenvalues.map(|v| v.max(0.0).sqrt()).sum();
    let value = (ma - mb).norm_squared() + sa.trace() + sb.trace() - 2.0 * cross;
    Ok(Frechet { value: value.max(0.0), regularized })
}

fn sq_dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Density and coverage with k-NN balls around real points. A point is
/// inside a ball when its distance is strictly below the radius.
pub fn knn_density_coverage(real: ArrayView2<'_, f64>, gen: ArrayView2<'_, f64>, k: usize) -> Result<(f64, f64)> {
    let n = real.nrows();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k = {k} needs 0 < k < {n} real points")));
    }
    if gen.nrows() == 0 {
        return Err(Error::invalid("no generated points"));
    }
    if real.ncols() != gen.ncols() {
        return Err(Error::shape("point sets differ in dimension"));
    }
    let radii: Vec<f64> = (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq_dist(real.row(i), real.row(j))).collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1]
        })
        .collect();
    let mut inside = 0usize;
    let mut covered = vec![false; n];
    for g in gen.rows() {
        for i in 0..n {
            if sq_dist(g, real.row(i)) < radii[i] {
                inside += 1;
                covered[i] = true;
            }
        }
    }
    let density = inside as f64 / (k as f64 * gen.nrows() as f64);
    let coverage = covered.iter().filter(|c| **c).count() as f64 / n as f64;
    Ok((density, coverage))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub count: usize,
    pub frechet: f64,
    pub density: f64,
    pub coverage: f64,
    pub regularized: bool,
}

/// Overall and per-class sample-quality report. `cw` maps class index to
/// its metrics or `None` when too few samples carry that label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub frechet: f64,
    pub density: f64,
    pub coverage: f64,
    pub cw: BTreeMap<String, Option<ClassMetrics>>,
    pub purity: f64,
    /// Row = conditioning label, column = Bayes label.
    pub confusion: Vec<Vec<usize>>,
}

impl MetricsReport {
    pub fn mean_cw_frechet(&self) -> Option<f64> {
        let v: Vec<f64> = self.cw.values().flatten().map(|m| m.frechet).collect();
        if v.len() == self.cw.len() && !v.is_empty() {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        } else {
            None
        }
    }
}

/// Fraction of samples whose Bayes label equals the conditioning label.
pub fn class_purity(gen: ArrayView2<'_, f64>, labels: &[usize], classifier: &BayesClassifier) -> Result<f64> {
    if labels.len() != gen.nrows() || labels.is_empty() {
        return Err(Error::shape("need one label per generated point"));
    }
    let pred = classifier.classify_rows(gen)?;
    Ok(pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
}

/// Overall metrics plus per-class metrics against real points of the same
/// (true) class, purity and the confusion matrix.
pub fn classwise_metrics(
    real: ArrayView2<'_, f64>,
    real_labels: &[usize],
    gen: ArrayView2<'_, f64>,
    gen_labels: &[usize],
    k: usize,
    classifier: &BayesClassifier,
) -> Result<MetricsReport> {
    let nc = classifier.num_classes();
    if real_labels.len() != real.nrows() || gen_labels.len() != gen.nrows() {
        return Err(Error::shape("labels and points differ in count"));
    }
    let frechet = gaussian_frechet(real, gen)?;
    let (density, coverage) = knn_density_coverage(real, gen, k)?;
    let pred = classifier.classify_rows(gen)?;
    let mut confusion = vec![vec![0usize; nc]; nc];
    for (&y, &p) in gen_labels.iter().zip(&pred) {
        if y >= nc {
            return Err(Error::invalid(format!("label {y} outside [0, {nc})")));
        }
        confusion[y][p] += 1;
    }
    let purity = pred.iter().zip(gen_labels).filter(|(a, b)| a == b).count() as f64 / gen_labels.len().max(1) as f64;
    let mut cw = BTreeMap::new();
    for c in 0..nc {
        let ri: Vec<usize> = (0..real_labels.len()).filter(|&i| real_labels[i] == c).collect();
        if ri.len() <= k {
            return Err(Error::invalid(format!("class {c} has too few real points")));
        }
        let gi: Vec<usize> = (0..gen_labels.len()).filter(|&i| gen_labels[i] == c).collect();
        let entry = if gi.len() < 3 {
            None
        } else {
            let r = real.select(Axis(0), &ri);
            let g = gen.select(Axis(0), &gi);
            let f = gaussian_frechet(r.view(), g.view())?;
            let (d, cov) = knn_density_coverage(r.view(), g.view(), k)?;
            Some(ClassMetrics { count: gi.len(), frechet: f.value, density: d, coverage: cov, regularized: f.regularized })
        };
        cw.insert(c.to_string(), entry);
    }
    Ok(MetricsReport { frechet: frechet.value, density, coverage, cw, purity, confusion })
}

/// Row-subset helper shared by examples and the pipeline.
pub fn rows_with_label(x: ArrayView2<'_, f64>, labels: &[usize], class: usize) -> Array2<f64> {
    let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
    x.select(Axis(0), &idx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = array![[0.0, 1.0], [2.0, -1.0], [1.0, 0.5], [3.0, 3.0]];
        let f = gaussian_frechet(a.view(), a.view()).unwrap();
        assert!(f.value.abs() < 1e-9);
        assert!(!f.regularized);
    }

    #[test]
    fn translation_adds_squared_shift() {
        let a = array![[0.0, 1.0], [2.0, -1.0], [1.0, 0.5], [3.0, 3.0]];
        let b = &a + &array![[3.0, 0.0]];
        assert_abs_diff_eq!(gaussian_frechet(a.view(), b.view()).unwrap().value, 9.0, epsilon = 1e-9);
    }

    #[test]
    fn collinear_sets_are_regularized() {
        let a = array![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        let b = array![[0.0, 1.0], [1.0, 0.0], [2.0, 2.0]];
        assert!(gaussian_frechet(a.view(), b.view()).unwrap().regularized);
    }

    #[test]
    fn coverage_of_identical_sets_is_one() {
        let a = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [0.5, 0.4], [2.0, 2.0], [3.0, 0.0]];
        let (_, c) = knn_density_coverage(a.view(), a.view(), 5).unwrap();
        assert_eq!(c, 1.0);
    }

    #[test]
    fn far_away_samples_score_zero() {
        let a = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let g = array![[100.0, 100.0], [101.0, 100.0]];
        assert_eq!(knn_density_coverage(a.view(), g.view(), 1).unwrap(), (0.0, 0.0));
        assert!(knn_density_coverage(a.view(), g.view(), 3).is_err());
    }

    #[test]
    fn moon_classifier_separates_the_arcs() {
        let c = BayesClassifier::two_moons(0.1).unwrap();
        assert_eq!(c.classify([0.0, 1.0]), 0);
        assert_eq!(c.classify([1.0, -0.5]), 1);
        let p = c.posterior([0.5, 0.25]);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn interval_around_a_single_spike() {
        let sigmas: Vec<f64> = (0..6).map(|k| 2f64.powi(5 - k)).collect();
        let curves = PhaseCurves {
            times: sigmas.clone(),
            sigmas: sigmas.clone(),
            confidence: vec![0.5; 6],
            instability: vec![0.0, 0.0, 0.4, 0.0, 0.0],
            chains: 10,
        };
        let s = suggest_interval(&curves, 0.5).unwrap();
        assert_eq!(s.steps, vec![2]);
        assert_eq!((s.s_clip_min, s.s_clip_max), (sigmas[3], sigmas[1]));
        let flat = PhaseCurves { instability: vec![0.1; 5], ..curves };
        let f = suggest_interval(&flat, 0.5).unwrap();
        assert!(f.warning.is_some());
        assert_eq!(f.s_clip_max, 32.0);
    }

    #[test]
    fn confusion_rows_sum_to_label_counts() {
        let c = BayesClassifier::two_moons(0.1).unwrap();
        let real = array![[0.0, 1.0], [-1.0, 0.0], [0.7, 0.7], [1.0, -0.5], [2.0, 0.0], [1.5, -0.4]];
        let gen = array![[0.0, 1.0], [1.0, -0.5], [-0.9, 0.1], [2.0, 0.1], [0.6, 0.8], [1.4, -0.3], [0.1, 0.9]];
        let gl = [0, 0, 0, 1, 1, 1, 0];
        let r = classwise_metrics(real.view(), &[0, 0, 0, 1, 1, 1], gen.view(), &gl, 1, &c).unwrap();
        assert_eq!(r.confusion[0].iter().sum::<usize>(), 4);
        assert_eq!(r.confusion[1].iter().sum::<usize>(), 3);
        assert_abs_diff_eq!(r.purity, 5.0 / 7.0, epsilon = 1e-12);
    }
}
