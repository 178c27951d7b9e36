//! Splitting a noisy dataset into pseudo-clean and pseudo-corrupt parts.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, VerifiedLabel};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, DenseNetwork, LossEval};
use crate::rng::{self, streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Clean,
    Corrupt,
}

/// Precision, recall and F1 with "corrupt" as the positive class. Ratios
/// with a zero denominator are `None`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionScores {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub true_negatives: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl DetectionScores {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if a + b == 0 { None } else { Some(a as f64 / (a + b) as f64) };
        let precision = ratio(tp, fp);
        let recall = ratio(tp, fn_);
        let f1 = match (precision, recall) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        };
        DetectionScores {
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
            true_negatives: tn,
            precision,
            recall,
            f1,
        }
    }
}

/// Scores verdicts against `y_obs != y_true`.
pub fn score_detector(verdicts: &[Verdict], dataset: &Dataset) -> Result<DetectionScores> {
    if verdicts.len() != dataset.len() {
        return Err(Error::shape(format!("{} verdicts for {} points", verdicts.len(), dataset.len())));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (v, p) in verdicts.iter().zip(&dataset.points) {
        match (v, p.is_corrupted()) {
            (Verdict::Corrupt, true) => tp += 1,
            (Verdict::Corrupt, false) => fp += 1,
            (Verdict::Clean, true) => fn_ += 1,
            (Verdict::Clean, false) => tn += 1,
        }
    }
    Ok(DetectionScores::from_counts(tp, fp, fn_, tn))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorReport {
    pub detector: String,
    pub verdicts: Vec<Verdict>,
    pub scores: DetectionScores,
    /// Per-point averaged observed-label confidence, when the detector
    /// produces one.
    #[serde(default)]
    pub confidence: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct ReportSummary<'a> {
    detector: &'a str,
    precision: Option<f64>,
    recall: Option<f64>,
    f1: Option<f64>,
    flagged_fraction: f64,
}

impl DetectorReport {
    fn new(detector: &str, verdicts: Vec<Verdict>, dataset: &Dataset, confidence: Option<Vec<f64>>) -> Result<Self> {
        let scores = score_detector(&verdicts, dataset)?;
        Ok(DetectorReport { detector: detector.to_string(), verdicts, scores, confidence })
    }

    pub fn clean_indices(&self) -> Vec<usize> {
        self.indices(Verdict::Clean)
    }

    pub fn corrupt_indices(&self) -> Vec<usize> {
        self.indices(Verdict::Corrupt)
    }

    fn indices(&self, v: Verdict) -> Vec<usize> {
        self.verdicts.iter().enumerate().filter(|(_, x)| **x == v).map(|(i, _)| i).collect()
    }

    pub fn flagged_fraction(&self) -> f64 {
        if self.verdicts.is_empty() {
            return 0.0;
        }
        self.corrupt_indices().len() as f64 / self.verdicts.len() as f64
    }

    /// Copy of `dataset` with `r` set from the verdicts.
    pub fn apply(&self, dataset: &Dataset) -> Result<Dataset> {
        if self.verdicts.len() != dataset.len() {
            return Err(Error::shape("report and dataset differ in length"));
        }
        let mut out = dataset.clone();
        for (p, v) in out.points.iter_mut().zip(&self.verdicts) {
            p.r = Some(match v {
                Verdict::Clean => VerifiedLabel::clean(),
                Verdict::Corrupt => VerifiedLabel::corrupt(),
            });
        }
        Ok(out)
    }

    /// CSV `index,verdict`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["index", "verdict"])?;
        for (i, v) in self.verdicts.iter().enumerate() {
            let s = match v {
                Verdict::Clean => "clean",
                Verdict::Corrupt => "corrupt",
            };
            wr.write_record([i.to_string().as_str(), s])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ReportSummary {
            detector: &self.detector,
            precision: self.scores.precision,
            recall: self.scores.recall,
            f1: self.scores.f1,
            flagged_fraction: self.flagged_fraction(),
        })?)
    }

    pub fn save(&self, csv_path: &Path, json_path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(csv_path)?)?;
        std::fs::write(json_path, self.summary_json()?)?;
        Ok(())
    }

    pub fn load_csv(path: &Path, dataset: &Dataset) -> Result<Self> {
        let mut rd = csv::Reader::from_path(path)?;
        let mut verdicts = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            verdicts.push(match rec.get(1) {
                Some("clean") => Verdict::Clean,
                Some("corrupt") => Verdict::Corrupt,
                other => return Err(Error::invalid(format!("unknown verdict {other:?}"))),
            });
        }
        DetectorReport::new("loaded", verdicts, dataset, None)
    }
}

fn contamination_count(ratio: f64, pool: usize) -> usize {
    if ratio <= 0.0 || pool == 0 {
        0
    } else {
        ((ratio * pool as f64).round() as usize).clamp(1, pool)
    }
}

/// Ground-truth verdicts with controlled mistakes: a `clean_contamination`
/// fraction of the truly corrupt points is marked clean and a
/// `corrupt_contamination` fraction of the truly clean points is marked
/// corrupt. Counts are rounded, with at least one point moved whenever the
/// ratio is positive and the source is nonempty.
pub fn detect_oracle_with_errors(
    dataset: &Dataset,
    clean_contamination: f64,
    corrupt_contamination: f64,
    seed: u64,
) -> Result<DetectorReport> {
    for r in [clean_contamination, corrupt_contamination] {
        if !(0.0..1.0).contains(&r) {
            return Err(Error::Config(format!("contamination ratio {r} outside [0, 1)")));
        }
    }
    let mut rng = rng::stream(seed, streams::DETECTOR);
    let corrupt: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.points[i].is_corrupted()).collect();
    let clean: Vec<usize> = (0..dataset.len()).filter(|&i| !dataset.points[i].is_corrupted()).collect();
    let mut verdicts: Vec<Verdict> = dataset
        .points
        .iter()
        .map(|p| if p.is_corrupted() { Verdict::Corrupt } else { Verdict::Clean })
        .collect();
    let n_hide = contamination_count(clean_contamination, corrupt.len());
    for i in index::sample(&mut rng, corrupt.len(), n_hide) {
        verdicts[corrupt[i]] = Verdict::Clean;
    }
    let n_fake = contamination_count(corrupt_contamination, clean.len());
    for i in index::sample(&mut rng, clean.len(), n_fake) {
        verdicts[clean[i]] = Verdict::Corrupt;
    }
    DetectorReport::new("oracle", verdicts, dataset, None)
}

/// How the corrupt flag threshold is chosen from averaged confidences.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    /// Flag the `round(q n)` least confident points.
    Quantile { q: f64 },
    /// Flag points below the deepest histogram bin between the two highest
    /// peaks; flag nothing when the histogram has a single peak.
    Valley { bins: usize },
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::Valley { bins: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub optimizer: AdamConfig,
    pub threshold: ThresholdPolicy,
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        ConfidenceConfig {
            epochs: 30,
            batch_size: 128,
            hidden: vec![32, 32],
            optimizer: AdamConfig { lr: 5e-3, ..AdamConfig::default() },
            threshold: ThresholdPolicy::default(),
        }
    }
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
    p
}

/// Standardized coordinates for the classifier input.
fn standardize(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let mean = x.mean_axis(Axis(0)).unwrap();
    let std = x.std_axis(Axis(0), 0.0).mapv(|s| s.max(1e-12));
    (&x - &mean) / &std
}

/// Trains a softmax classifier on `(x, y_obs)` and records each point's
/// probability of its observed label after every epoch. Returns the mean
/// over the final third of epochs.
pub fn observed_label_confidence(dataset: &Dataset, config: &ConfidenceConfig, seed: u64) -> Result<Vec<f64>> {
    let k = dataset.num_classes;
    let present = dataset.class_counts_observed().iter().filter(|&&c| c > 0).count();
    if k < 2 || present < 2 {
        return Err(Error::invalid("confidence detection needs at least two observed classes"));
    }
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(Error::Config("detector epochs and batch_size must be positive".into()));
    }
    let mut rng = rng::stream(seed, streams::DETECTOR);
    let mut widths = vec![2];
    widths.extend_from_slice(&config.hidden);
    widths.push(k);
    let mut net = DenseNetwork::new(&widths, &mut rng)?;
    let mut opt = Adam::new(config.optimizer, &net);
    let x = standardize(dataset.coords().view());
    let y = dataset.observed_labels();
    let n = dataset.len();
    let tail_start = config.epochs - (config.epochs / 3).max(1);
    let mut acc = Array1::<f64>::zeros(n);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let b = chunk.len() as f64;
            let loss = |out: ArrayView2<'_, f64>| {
                let p = softmax_rows(&out.to_owned());
                let mut grad = p.clone();
                let mut per_row = Array1::zeros(out.nrows());
                for (i, &c) in yb.iter().enumerate() {
                    per_row[i] = -p[[i, c]].max(1e-300).ln() / b;
                    grad[[i, c]] -= 1.0;
                }
                grad.mapv_inplace(|v| v / b);
                LossEval { per_row, grad }
            };
            let bp = net.backward(xb.view(), &loss)?;
            opt.step(&mut net, &bp.grads)?;
        }
        if epoch >= tail_start {
            let p = softmax_rows(&net.forward(x.view())?);
            for i in 0..n {
                acc[i] += p[[i, y[i]]];
            }
        }
    }
    let epochs = (config.epochs - tail_start) as f64;
    Ok(acc.iter().map(|v| v / epochs).collect())
}

/// Verdicts from confidences under a threshold policy.
pub fn threshold_verdicts(confidence: &[f64], policy: ThresholdPolicy) -> Result<Vec<Verdict>> {
    let n = confidence.len();
    let mut verdicts = vec![Verdict::Clean; n];
    match policy {
        ThresholdPolicy::Quantile { q } => {
            if !(0.0..=1.0).contains(&q) {
                return Err(Error::Config(format!("quantile {q} outside [0, 1]")));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| confidence[a].total_cmp(&confidence[b]).then(a.cmp(&b)));
            let count = (q * n as f64).round() as usize;
            for &i in &order[..count.min(n)] {
                verdicts[i] = Verdict::Corrupt;
            }
        }
        ThresholdPolicy::Valley { bins } => {
            if let Some(t) = valley_threshold(confidence, bins)? {
                for (v, &c) in verdicts.iter_mut().zip(confidence) {
                    if c < t {
                        *v = Verdict::Corrupt;
                    }
                }
            }
        }
    }
    Ok(verdicts)
}

/// Lower edge of the lowest bin between the two highest histogram peaks on
/// `[0, 1]`, or `None` for a single-peaked histogram.
pub fn valley_threshold(values: &[f64], bins: usize) -> Result<Option<f64>> {
    if bins < 3 {
        return Err(Error::Config("valley policy needs at least 3 bins".into()));
    }
    let mut h = vec![0usize; bins];
    for &v in values {
        let b = ((v.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
        h[b] += 1;
    }
    // local maxima, plateaus counted once at their left end
    let mut peaks: Vec<usize> = (0..bins)
        .filter(|&i| {
            h[i] > 0
                && (i == 0 || h[i] > h[i - 1])
                && (i + 1..bins).find(|&j| h[j] != h[i]).is_none_or(|j| h[j] < h[i])
        })
        .collect();
    if peaks.len() < 2 {
        return Ok(None);
    }
    peaks.sort_by(|&a, &b| h[b].cmp(&h[a]).then(a.cmp(&b)));
    let (a, b) = (peaks[0].min(peaks[1]), peaks[0].max(peaks[1]));
    let valley = (a + 1..b).min_by(|&i, &j| h[i].cmp(&h[j]).then(j.cmp(&i)));
    Ok(valley.map(|v| v as f64 / bins as f64 + 0.5 / bins as f64))
}

/// Small-loss style detector: points whose averaged observed-label
/// confidence falls below the policy threshold are flagged corrupt.
pub fn detect_confidence(dataset: &Dataset, config: &ConfidenceConfig, seed: u64) -> Result<DetectorReport> {
    let conf = observed_label_confidence(dataset, config, seed)?;
    let verdicts = threshold_verdicts(&conf, config.threshold)?;
    DetectorReport::new("confidence", verdicts, dataset, Some(conf))
}

/// Random split of indices `0..n` into two halves, used to keep the
/// discriminator's training data disjoint from other stages.
pub fn split_half(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = rng::stream(seed, streams::DISC_SPLIT);
    let mut a = index::sample(&mut rng, n, n / 2).into_vec();
    a.sort_unstable();
    let mut mask = vec![false; n];
    for &i in &a {
        mask[i] = true;
    }
    let b = (0..n).filter(|&i| !mask[i]).collect();
    (a, b)
}
