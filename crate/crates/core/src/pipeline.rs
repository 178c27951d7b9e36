//! End-to-end runs: a sectioned [`RunConfig`], one resumable stage per
//! artifact group, and a [`RunManifest`] of content hashes and timings.
//!
//! A run directory holds everything a stage needs from earlier stages, so
//! each stage can be rerun on its own. Config files are TOML (or JSON) and
//! are merged key-by-key over a named preset; `preset = "..."` at the top
//! level picks the base, defaulting to `toy-moons-50sym`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{make_two_moons, Dataset, GaussianMixture, NoiseSpec};
use crate::detection::{detect_confidence, detect_oracle_with_errors, split_half, ConfidenceConfig, DetectorReport};
use crate::diffusion::{sample_chains, LossTrace, NoHook, NoiseSchedule, ScoreModel, ScoreTrainConfig};
use crate::discriminator::{train_discriminator, DiscTrainConfig, DiscriminatorModel, LabeledPool};
use crate::error::{Error, Result};
use crate::guidance::{guided_sample, GuidanceConfig};
use crate::metrics::{chain_labels, classwise_metrics, measure_phase_curves, suggest_interval, BayesClassifier, MetricsReport, PhaseCurves};
use crate::nn::{AdamConfig, Checkpoint};
use crate::plot;
use crate::rng::{self, streams};

pub const PRESETS: [&str; 3] = ["toy-moons-50sym", "gauss2-analytic", "idn-40"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    TwoMoons { n: usize, noise_std: f64 },
    GaussianMixture { n: usize, means: Vec<[f64; 2]>, cov: [[f64; 2]; 2], weights: Option<Vec<f64>> },
}

impl DatasetSpec {
    pub const KINDS: [&'static str; 2] = ["two_moons", "gaussian_mixture"];

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::TwoMoons { .. } => 2,
            DatasetSpec::GaussianMixture { means, .. } => means.len(),
        }
    }

    fn mixture(&self) -> Result<Option<GaussianMixture>> {
        match self {
            DatasetSpec::TwoMoons { .. } => Ok(None),
            DatasetSpec::GaussianMixture { means, cov, weights, .. } => {
                Ok(Some(GaussianMixture::new(means.clone(), *cov, weights.clone())?))
            }
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::TwoMoons { n, noise_std } => make_two_moons(*n, *noise_std, seed),
            DatasetSpec::GaussianMixture { n, .. } => self.mixture()?.unwrap().sample(*n, seed),
        }
    }

    /// Bayes-oracle classifier for the generating distribution.
    pub fn classifier(&self) -> Result<BayesClassifier> {
        match self {
            DatasetSpec::TwoMoons { noise_std, .. } => BayesClassifier::two_moons(*noise_std),
            DatasetSpec::GaussianMixture { .. } => BayesClassifier::gaussian_mixture(&self.mixture()?.unwrap()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSection {
    pub hidden: Vec<usize>,
    pub train: ScoreTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DetectorSpec {
    Oracle { clean_contamination: f64, corrupt_contamination: f64 },
    Confidence { config: ConfidenceConfig },
}

impl DetectorSpec {
    pub const KINDS: [&'static str; 2] = ["oracle", "confidence"];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscSection {
    pub hidden: Vec<usize>,
    pub train: DiscTrainConfig,
    /// Train on a random half of the data instead of all of it.
    pub half_split: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    pub chains: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    pub knn_k: usize,
    pub phase_chains: usize,
    pub interval_fraction: f64,
}

/// Complete description of a run. Serializing it (TOML) and loading it back
/// reproduces the run exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    /// Default output directory; the command line takes precedence.
    pub output: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub noise: NoiseSpec,
    pub schedule: NoiseSchedule,
    pub score: ScoreSection,
    pub detector: DetectorSpec,
    pub discriminator: DiscSection,
    pub guidance: GuidanceConfig,
    pub sampling: SamplingSection,
    pub analysis: AnalysisSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset("toy-moons-50sym").unwrap()
    }
}

impl RunConfig {
    /// Named preset.
    ///
    /// * `toy-moons-50sym`: two moons, half of all labels flipped, oracle
    ///   detector with 1:2 contamination, discriminator on half the data,
    ///   constant `gamma = 1.5`.
    /// * `gauss2-analytic`: two Gaussians, 25% flips, a perfect detector and
    ///   the default gated guidance.
    /// * `idn-40`: two moons with 40% instance-dependent noise and the
    ///   confidence detector.
    pub fn preset(name: &str) -> Result<Self> {
        let moons = DatasetSpec::TwoMoons { n: 4000, noise_std: 0.1 };
        let base = RunConfig {
            preset: name.to_string(),
            seed: 0,
            output: None,
            dataset: moons,
            noise: NoiseSpec::Symmetric { rate: 1.0 },
            schedule: NoiseSchedule::edm(18),
            score: ScoreSection { hidden: vec![128, 128, 128], train: ScoreTrainConfig::default() },
            detector: DetectorSpec::Oracle { clean_contamination: 1.0 / 3.0, corrupt_contamination: 1.0 / 3.0 },
            discriminator: DiscSection { hidden: vec![256, 256, 256], train: DiscTrainConfig::default(), half_split: true },
            guidance: GuidanceConfig::full_range(1.5),
            sampling: SamplingSection { chains: 2000 },
            analysis: AnalysisSection { knn_k: 5, phase_chains: 2000, interval_fraction: 0.5 },
        };
        match name {
            "toy-moons-50sym" => Ok(base),
            "gauss2-analytic" => Ok(RunConfig {
                dataset: DatasetSpec::GaussianMixture {
                    n: 4000,
                    means: vec![[-1.0, 0.0], [1.0, 0.0]],
                    cov: [[0.25, 0.0], [0.0, 0.25]],
                    weights: None,
                },
                noise: NoiseSpec::Symmetric { rate: 0.5 },
                detector: DetectorSpec::Oracle { clean_contamination: 0.0, corrupt_contamination: 0.0 },
                guidance: GuidanceConfig::default(),
                ..base
            }),
            "idn-40" => Ok(RunConfig {
                noise: NoiseSpec::InstanceDependent { rate: 0.4 },
                detector: DetectorSpec::Confidence { config: ConfidenceConfig::default() },
                guidance: GuidanceConfig::default(),
                ..base
            }),
            other => Err(Error::Config(format!("unknown preset `{other}`; available: {}", PRESETS.join(", ")))),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.dataset.num_classes()
    }

    /// Parses TOML, or JSON when the text starts with `{`, and merges it over
    /// the preset it names.
    pub fn from_str(text: &str) -> Result<Self> {
        let user: toml::Table = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("JSON config: {e}")))?
        } else {
            toml::from_str(text)?
        };
        let preset = match user.get("preset") {
            None => "toy-moons-50sym".to_string(),
            Some(toml::Value::String(s)) => s.clone(),
            Some(v) => return Err(Error::Config(format!("preset must be a string, got {v}"))),
        };
        let mut merged = toml::Table::try_from(RunConfig::preset(&preset)?)?;
        merge(&mut merged, user);
        let cfg: RunConfig = toml::Value::Table(merged).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Range checks that do not need data.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match &self.dataset {
            DatasetSpec::TwoMoons { n, noise_std } => {
                if *n < 2 || !(*noise_std > 0.0) {
                    return bad(format!("dataset: two_moons needs n >= 2 and noise_std > 0, got n = {n}, noise_std = {noise_std}"));
                }
            }
            DatasetSpec::GaussianMixture { n, means, .. } => {
                if *n < 2 || means.len() < 2 {
                    return bad("dataset: gaussian_mixture needs n >= 2 and at least two means".into());
                }
                self.dataset.mixture().map_err(|e| Error::Config(format!("dataset: {e}")))?;
            }
        }
        let rate = self.noise.rate();
        if !(0.0..=1.0).contains(&rate) {
            return bad(format!("noise.rate {rate} outside [0, 1]"));
        }
        if let NoiseSpec::Asymmetric { flip_map, .. } = &self.noise {
            if flip_map.len() != self.num_classes() || flip_map.iter().any(|&c| c >= self.num_classes()) {
                return bad("noise.flip_map needs one in-range target per class".into());
            }
        }
        self.schedule.validate()?;
        for (name, hidden) in [("score", &self.score.hidden), ("discriminator", &self.discriminator.hidden)] {
            if hidden.is_empty() || hidden.contains(&0) {
                return bad(format!("{name}.hidden needs at least one nonzero width"));
            }
        }
        if self.score.train.batch_size == 0 || self.discriminator.train.batch_size < 2 {
            return bad("batch sizes must be positive (discriminator: at least 2)".into());
        }
        match &self.detector {
            DetectorSpec::Oracle { clean_contamination: a, corrupt_contamination: b } => {
                if !(0.0..1.0).contains(a) || !(0.0..1.0).contains(b) {
                    return bad("detector contamination ratios must lie in [0, 1)".into());
                }
            }
            DetectorSpec::Confidence { config } => {
                if config.epochs == 0 || config.batch_size == 0 {
                    return bad("detector.config needs epochs and batch_size > 0".into());
                }
            }
        }
        self.discriminator.train.aug.validate()?;
        self.guidance.validate()?;
        if self.sampling.chains == 0 || self.analysis.phase_chains == 0 {
            return bad("sampling.chains and analysis.phase_chains must be positive".into());
        }
        if self.analysis.knn_k == 0 || !(self.analysis.interval_fraction > 0.0 && self.analysis.interval_fraction <= 1.0) {
            return bad("analysis needs knn_k > 0 and interval_fraction in (0, 1]".into());
        }
        Ok(())
    }
}

/// Recursive table merge; a table whose `kind` changes is replaced whole.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                let same_kind = match (b.get("kind"), o.get("kind")) {
                    (Some(x), Some(y)) => x == y,
                    _ => true,
                };
                if same_kind {
                    merge(b, o);
                } else {
                    *b = o;
                }
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Generate,
    TrainScore,
    Detect,
    TrainDisc,
    Sample,
    Analyze,
    Plot,
}

impl Stage {
    pub const ALL: [Stage; 7] =
        [Stage::Generate, Stage::TrainScore, Stage::Detect, Stage::TrainDisc, Stage::Sample, Stage::Analyze, Stage::Plot];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::TrainScore => "train-score",
            Stage::Detect => "detect",
            Stage::TrainDisc => "train-disc",
            Stage::Sample => "sample",
            Stage::Analyze => "analyze",
            Stage::Plot => "plot",
        }
    }

    /// Files the stage writes, relative to the run directory.
    pub fn outputs(self) -> &'static [&'static str] {
        match self {
            Stage::Generate => &[files::CLEAN, files::NOISY, files::NOISE_SUMMARY],
            Stage::TrainScore => &[files::SCORE, files::SCORE_LOSS],
            Stage::Detect => &[files::DETECTION_CSV, files::DETECTION_JSON],
            Stage::TrainDisc => &[files::DISC, files::DISC_LOSS],
            Stage::Sample => &[
                files::SAMPLES_UNGUIDED,
                files::SAMPLES_GUIDED,
                files::GATE_TRACE,
                files::TRAJECTORY_UNGUIDED,
                files::TRAJECTORY_GUIDED,
            ],
            Stage::Analyze => &[
                files::METRICS_UNGUIDED,
                files::METRICS_GUIDED,
                files::COMPARISON,
                files::PHASE_CURVES,
                files::INTERVAL,
            ],
            Stage::Plot => &[files::PHASE_SVG, files::SCATTER_UNGUIDED_SVG, files::SCATTER_GUIDED_SVG],
        }
    }
}

/// File names inside a run directory.
pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const MANIFEST: &str = "manifest.json";
    pub const CLEAN: &str = "clean.csv";
    pub const NOISY: &str = "noisy.csv";
    pub const NOISE_SUMMARY: &str = "noise_summary.json";
    pub const SCORE: &str = "score.json";
    pub const SCORE_LOSS: &str = "score_loss.csv";
    pub const DETECTION_CSV: &str = "detection.csv";
    pub const DETECTION_JSON: &str = "detection.json";
    pub const DISC: &str = "discriminator.json";
    pub const DISC_LOSS: &str = "discriminator_loss.csv";
    pub const SAMPLES_UNGUIDED: &str = "samples_unguided.csv";
    pub const SAMPLES_GUIDED: &str = "samples_guided.csv";
    pub const GATE_TRACE: &str = "gate_trace.csv";
    pub const TRAJECTORY_UNGUIDED: &str = "trajectory_unguided_0.csv";
    pub const TRAJECTORY_GUIDED: &str = "trajectory_guided_0.csv";
    pub const METRICS_UNGUIDED: &str = "metrics_unguided.json";
    pub const METRICS_GUIDED: &str = "metrics_guided.json";
    pub const COMPARISON: &str = "comparison.json";
    pub const PHASE_CURVES: &str = "phase_curves.csv";
    pub const INTERVAL: &str = "interval.json";
    pub const PHASE_SVG: &str = "phase_curves.svg";
    pub const SCATTER_UNGUIDED_SVG: &str = "samples_unguided.svg";
    pub const SCATTER_GUIDED_SVG: &str = "samples_guided.svg";
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSummary {
    pub kind: String,
    pub rate: f64,
    pub n: usize,
    pub num_classes: usize,
    pub flip_fraction: f64,
    pub expected_flip_fraction: f64,
    pub class_counts_true: Vec<usize>,
    pub class_counts_observed: Vec<usize>,
}

/// Unguided and guided metric blocks side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub unguided: MetricsReport,
    pub guided: MetricsReport,
    pub purity_gain: f64,
    pub mean_cw_frechet_unguided: Option<f64>,
    pub mean_cw_frechet_guided: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    /// TOML snapshot of the config the outputs were produced with.
    pub config: String,
    /// Wall-clock seconds per stage (not part of the reproducibility check).
    pub timings: BTreeMap<String, f64>,
    /// SHA-256 of every output file.
    pub hashes: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    /// Files under `dir` whose current hash differs from the recorded one.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for (name, h) in &self.hashes {
            let p = dir.join(name);
            if !p.exists() || &sha256_file(&p)? != h {
                bad.push(name.clone());
            }
        }
        Ok(bad)
    }

    pub fn run_config(&self) -> Result<RunConfig> {
        RunConfig::from_str(&self.config)
    }
}

/// A run directory bound to a config.
#[derive(Clone, Debug)]
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
    pub jobs: usize,
}

fn write_loss(trace: &LossTrace, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss", "smoothed"])?;
    for (i, (r, s)) in trace.raw.iter().zip(&trace.smoothed).enumerate() {
        w.write_record([i.to_string(), format!("{r:.16e}"), format!("{s:.16e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes samples as CSV `x0,x1,label`.
pub fn write_samples(path: &Path, x: &Array2<f64>, labels: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x0", "x1", "label"])?;
    for (row, y) in x.rows().into_iter().zip(labels) {
        w.write_record([format!("{:.17e}", row[0]), format!("{:.17e}", row[1]), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a sample CSV; an empty file is an error.
pub fn read_samples(path: &Path) -> Result<(Array2<f64>, Vec<usize>)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut pts = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::invalid(format!("{}: bad number `{s}`", path.display())));
        pts.push([parse(field(0))?, parse(field(1))?]);
        labels.push(field(2).parse().map_err(|_| Error::invalid(format!("{}: bad label", path.display())))?);
    }
    if pts.is_empty() {
        return Err(Error::invalid(format!("{} contains no samples", path.display())));
    }
    Ok((Array2::from_shape_fn((pts.len(), 2), |(i, j)| pts[i][j]), labels))
}

impl Run {
    /// Creates the directory and writes the config snapshot.
    pub fn create(config: RunConfig, dir: impl Into<PathBuf>, jobs: usize) -> Result<Self> {
        config.validate()?;
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(files::CONFIG), config.to_toml()?)?;
        Ok(Run { config, dir, jobs: jobs.max(1) })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn input(&self, name: &str) -> Result<PathBuf> {
        let p = self.path(name);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingInput(p))
        }
    }

    fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn load_clean(&self) -> Result<Dataset> {
        Dataset::load_csv(&self.input(files::CLEAN)?, self.config.num_classes())
    }

    pub fn load_noisy(&self) -> Result<Dataset> {
        Dataset::load_csv(&self.input(files::NOISY)?, self.config.num_classes())
    }

    pub fn load_score(&self) -> Result<ScoreModel> {
        ScoreModel::from_checkpoint(&Checkpoint::load(&self.input(files::SCORE)?)?)
    }

    pub fn load_discriminator(&self) -> Result<DiscriminatorModel> {
        DiscriminatorModel::from_checkpoint(&Checkpoint::load(&self.input(files::DISC)?)?)
    }

    pub fn generate(&self) -> Result<NoiseSummary> {
        let c = &self.config;
        let clean = c.dataset.generate(self.seed())?;
        let noisy = c.noise.apply(&clean, self.seed())?;
        clean.save_csv(&self.path(files::CLEAN))?;
        noisy.save_csv(&self.path(files::NOISY))?;
        let kind = serde_json::to_value(&c.noise)?["kind"].as_str().unwrap_or_default().to_string();
        let summary = NoiseSummary {
            kind,
            rate: c.noise.rate(),
            n: noisy.len(),
            num_classes: noisy.num_classes,
            flip_fraction: noisy.flip_fraction(),
            expected_flip_fraction: c.noise.expected_flip_fraction(noisy.num_classes),
            class_counts_true: noisy.class_counts(),
            class_counts_observed: noisy.class_counts_observed(),
        };
        fs::write(self.path(files::NOISE_SUMMARY), serde_json::to_string_pretty(&summary)?)?;
        Ok(summary)
    }

    pub fn train_score(&self) -> Result<LossTrace> {
        let c = &self.config;
        let noisy = self.load_noisy()?;
        let x = noisy.coords();
        let mut model = ScoreModel::new(
            2,
            c.num_classes(),
            &c.score.hidden,
            c.schedule.clone(),
            &mut rng::stream(self.seed(), streams::SCORE_INIT),
        )?;
        model.fit_preconditioning(x.view())?;
        let (trace, opt) = crate::diffusion::train_score(&mut model, x.view(), &noisy.observed_labels(), &c.score.train, self.seed())?;
        model
            .to_checkpoint(Some(&opt), self.seed(), c.score.train.steps as u64)?
            .save(&self.path(files::SCORE))?;
        write_loss(&trace, &self.path(files::SCORE_LOSS))?;
        Ok(trace)
    }

    pub fn detect(&self) -> Result<DetectorReport> {
        let noisy = self.load_noisy()?;
        let report = match &self.config.detector {
            DetectorSpec::Oracle { clean_contamination, corrupt_contamination } => {
                detect_oracle_with_errors(&noisy, *clean_contamination, *corrupt_contamination, self.seed())?
            }
            DetectorSpec::Confidence { config } => detect_confidence(&noisy, config, self.seed())?,
        };
        report.save(&self.path(files::DETECTION_CSV), &self.path(files::DETECTION_JSON))?;
        Ok(report)
    }

    pub fn train_discriminator(&self) -> Result<LossTrace> {
        let c = &self.config;
        let noisy = self.load_noisy()?;
        let report = DetectorReport::load_csv(&self.input(files::DETECTION_CSV)?, &noisy)?;
        let train_idx: Vec<usize> =
            if c.discriminator.half_split { split_half(noisy.len(), self.seed()).0 } else { (0..noisy.len()).collect() };
        let mut clean_idx = Vec::new();
        let mut corrupt_idx = Vec::new();
        for &i in &train_idx {
            match report.verdicts[i] {
                crate::detection::Verdict::Clean => clean_idx.push(i),
                crate::detection::Verdict::Corrupt => corrupt_idx.push(i),
            }
        }
        let pool = |idx: &[usize]| {
            let d = noisy.subset(idx);
            LabeledPool::new(d.coords(), d.observed_labels())
        };
        let (clean, corrupt) = (pool(&clean_idx)?, pool(&corrupt_idx)?);
        let mut disc = DiscriminatorModel::new(
            2,
            c.num_classes(),
            &c.discriminator.hidden,
            c.schedule.clone(),
            &mut rng::stream(self.seed(), streams::DISC_INIT),
        )?;
        disc.fit_preconditioning(noisy.subset(&train_idx).coords().view())?;
        let (trace, opt) = train_discriminator(&mut disc, &clean, &corrupt, &c.discriminator.train, self.seed())?;
        disc.to_checkpoint(Some(&opt), self.seed(), c.discriminator.train.steps as u64)?
            .save(&self.path(files::DISC))?;
        write_loss(&trace, &self.path(files::DISC_LOSS))?;
        Ok(trace)
    }

    /// Labels for the sampling stage; shared by guided and unguided runs.
    pub fn chain_labels(&self) -> Vec<usize> {
        chain_labels(self.config.num_classes(), self.config.sampling.chains, self.seed())
    }

    pub fn sample(&self) -> Result<()> {
        let c = &self.config;
        let score = self.load_score()?;
        let disc = self.load_discriminator()?;
        let labels = self.chain_labels();
        let plain = sample_chains(&score, &c.schedule, &labels, self.seed(), &NoHook, self.jobs)?;
        let (guided, trace) = guided_sample(&score, &disc, &labels, &c.schedule, &c.guidance, self.seed(), self.jobs)?;
        write_samples(&self.path(files::SAMPLES_UNGUIDED), plain.final_samples(), &labels)?;
        write_samples(&self.path(files::SAMPLES_GUIDED), guided.final_samples(), &labels)?;
        trace.save_csv(&self.path(files::GATE_TRACE))?;
        plain.trajectory(0).save_csv(&self.path(files::TRAJECTORY_UNGUIDED))?;
        guided.trajectory(0).save_csv(&self.path(files::TRAJECTORY_GUIDED))?;
        Ok(())
    }

    pub fn analyze(&self) -> Result<Comparison> {
        let c = &self.config;
        let clean = self.load_clean()?;
        let classifier = c.dataset.classifier()?;
        let real = clean.coords();
        let real_labels = clean.true_labels();
        let report = |name: &str| -> Result<MetricsReport> {
            let (x, y) = read_samples(&self.input(name)?)?;
            classwise_metrics(real.view(), &real_labels, x.view(), &y, c.analysis.knn_k, &classifier)
        };
        let unguided = report(files::SAMPLES_UNGUIDED)?;
        let guided = report(files::SAMPLES_GUIDED)?;
        fs::write(self.path(files::METRICS_UNGUIDED), serde_json::to_string_pretty(&unguided)?)?;
        fs::write(self.path(files::METRICS_GUIDED), serde_json::to_string_pretty(&guided)?)?;
        let cmp = Comparison {
            purity_gain: guided.purity - unguided.purity,
            mean_cw_frechet_unguided: unguided.mean_cw_frechet(),
            mean_cw_frechet_guided: guided.mean_cw_frechet(),
            unguided,
            guided,
        };
        fs::write(self.path(files::COMPARISON), serde_json::to_string_pretty(&cmp)?)?;

        let score = self.load_score()?;
        let curves =
            measure_phase_curves(&score, &c.schedule, c.num_classes(), c.analysis.phase_chains, self.seed(), &classifier, self.jobs)?;
        curves.save_csv(&self.path(files::PHASE_CURVES))?;
        let interval = suggest_interval(&curves, c.analysis.interval_fraction)?;
        fs::write(self.path(files::INTERVAL), serde_json::to_string_pretty(&interval)?)?;
        Ok(cmp)
    }

    pub fn plot(&self) -> Result<()> {
        let classifier = self.config.dataset.classifier()?;
        let curves = PhaseCurves::read_csv(fs::File::open(self.input(files::PHASE_CURVES)?)?)?;
        fs::write(self.path(files::PHASE_SVG), plot::phase_curves_svg(&curves)?)?;
        for (csv_name, svg, title) in [
            (files::SAMPLES_UNGUIDED, files::SCATTER_UNGUIDED_SVG, "unguided samples by Bayes class"),
            (files::SAMPLES_GUIDED, files::SCATTER_GUIDED_SVG, "guided samples by Bayes class"),
        ] {
            let (x, _) = read_samples(&self.input(csv_name)?)?;
            let pts: Vec<[f64; 2]> = x.rows().into_iter().map(|r| [r[0], r[1]]).collect();
            fs::write(self.path(svg), plot::scatter_svg(&pts, &classifier, title)?)?;
        }
        Ok(())
    }

    fn execute(&self, stage: Stage) -> Result<()> {
        match stage {
            Stage::Generate => self.generate().map(drop),
            Stage::TrainScore => self.train_score().map(drop),
            Stage::Detect => self.detect().map(drop),
            Stage::TrainDisc => self.train_discriminator().map(drop),
            Stage::Sample => self.sample(),
            Stage::Analyze => self.analyze().map(drop),
            Stage::Plot => self.plot(),
        }
    }

    /// Runs one stage, wrapping failures with the stage name, and records
    /// its timing and output hashes in the manifest.
    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        let t0 = Instant::now();
        self.execute(stage).map_err(|e| Error::Stage { stage: stage.name(), source: Box::new(e) })?;
        let secs = t0.elapsed().as_secs_f64();
        let wrap = |e: Error| Error::Stage { stage: stage.name(), source: Box::new(e) };
        let mut manifest = self.manifest().map_err(wrap)?;
        manifest.timings.insert(stage.name().to_string(), secs);
        for name in stage.outputs() {
            manifest.hashes.insert(name.to_string(), sha256_file(&self.path(name)).map_err(wrap)?);
        }
        manifest.save(&self.path(files::MANIFEST)).map_err(wrap)
    }

    /// Current manifest, or a fresh one when none exists or it was produced
    /// with a different config.
    pub fn manifest(&self) -> Result<RunManifest> {
        let config = self.config.to_toml()?;
        let path = self.path(files::MANIFEST);
        if path.exists() {
            let m = RunManifest::load(&path)?;
            if m.config == config {
                return Ok(m);
            }
        }
        Ok(RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            ..Default::default()
        })
    }

    fn complete(&self, stage: Stage, manifest: &RunManifest) -> bool {
        stage.outputs().iter().all(|name| {
            let p = self.path(name);
            matches!((manifest.hashes.get(*name), sha256_file(&p)), (Some(h), Ok(now)) if *h == now)
        })
    }

    /// Every stage in order. With `resume`, stages whose recorded outputs
    /// are present and unchanged are skipped.
    pub fn pipeline(&self, resume: bool) -> Result<Comparison> {
        for stage in Stage::ALL {
            if resume && self.complete(stage, &self.manifest()?) {
                continue;
            }
            self.run_stage(stage)?;
        }
        Ok(serde_json::from_str(&fs::read_to_string(self.path(files::COMPARISON))?)?)
    }
}

/// Test and example helper: a config small enough to run in seconds.
pub fn quick_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::preset("toy-moons-50sym").unwrap();
    c.seed = seed;
    c.dataset = DatasetSpec::TwoMoons { n: 600, noise_std: 0.1 };
    c.score.hidden = vec![32, 32];
    c.score.train.steps = 150;
    c.score.train.batch_size = 64;
    c.discriminator.hidden = vec![32, 32];
    c.discriminator.train.steps = 100;
    c.discriminator.train.batch_size = 64;
    c.sampling.chains = 200;
    c.analysis.phase_chains = 200;
    c.schedule = NoiseSchedule::edm(12);
    c.discriminator.train.optimizer = AdamConfig::default();
    c
}
