//! Gated discriminator guidance.
//!
//! The corrected score is `s(x, y, sigma) + gate(sigma) * grad_x g(x, y, sigma)`
//! where `g` is the discriminator logit. `grad_x log(D / (1 - D))` is exactly
//! `grad_x g`, so the sigmoid is never inverted.

use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::diffusion::{
    sample_chains, HeunPhase, HookContext, NoiseSchedule, SampleBatch, ScoreField, ScoreHook,
};
use crate::error::{Error, Result};

/// A scalar logit `g(x, y, sigma)` over unscaled coordinates, with its input
/// gradient.
pub trait LogitField {
    fn dim(&self) -> usize;
    fn logit(&self, x: ArrayView2<'_, f64>, labels: &[usize], sigma: f64) -> Result<Array1<f64>>;
    fn logit_grad(&self, x: ArrayView2<'_, f64>, labels: &[usize], sigma: f64) -> Result<Array2<f64>>;
}

/// Which axis the interval bounds live on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateAxis {
    /// Noise level `sigma`.
    #[default]
    Sigma,
    /// Schedule time `t`; differs from `sigma` only for variance-preserving
    /// schedules.
    Time,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub gamma: f64,
    pub s_clip_min: f64,
    pub s_clip_max: f64,
    #[serde(default = "yes")]
    pub enabled: bool,
    /// Skip the correction in the second Heun evaluation.
    #[serde(default)]
    pub predictor_only: bool,
    #[serde(default)]
    pub axis: GateAxis,
}

fn yes() -> bool {
    true
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            gamma: 0.9,
            s_clip_min: 1.5,
            s_clip_max: 50.0,
            enabled: true,
            predictor_only: false,
            axis: GateAxis::Sigma,
        }
    }
}

impl GuidanceConfig {
    /// Constant `gamma` at every noise level.
    pub fn full_range(gamma: f64) -> Self {
        GuidanceConfig { gamma, s_clip_min: 0.0, s_clip_max: f64::INFINITY, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if !(self.s_clip_min < self.s_clip_max) {
            return Err(Error::Config(format!(
                "s_clip_min must be below s_clip_max, got ({}, {}]",
                self.s_clip_min, self.s_clip_max
            )));
        }
        Ok(())
    }

    fn coordinate(&self, schedule: &NoiseSchedule, sigma: f64) -> f64 {
        match self.axis {
            GateAxis::Sigma => sigma,
            GateAxis::Time => schedule.time_at(sigma),
        }
    }
}

/// `gamma` when `t` is in `(s_clip_min, s_clip_max]`, otherwise 0.
pub fn gamma_gate(t: f64, config: &GuidanceConfig) -> f64 {
    if config.enabled && t > config.s_clip_min && t <= config.s_clip_max {
        config.gamma
    } else {
        0.0
    }
}

/// Gate value for each sampling step of `schedule`.
///
/// Step `k` integrates from `sigma_k` towards `sigma_{k+1}` and is treated as
/// owning the band `[sigma_k, sigma_{k-1})` (with `sigma_{-1} = inf`). A step
/// fires when its band meets `(s_clip_min, s_clip_max]`, which rounds the
/// interval outward to whole steps: `(1.5, 50]` on the 18-level `[0.002, 80]`
/// schedule fires on `k = 2..=10`.
pub fn step_gates(config: &GuidanceConfig, schedule: &NoiseSchedule) -> Vec<f64> {
    let sigmas = schedule.sigmas();
    (0..sigmas.len())
        .map(|k| {
            let lo = config.coordinate(schedule, sigmas[k]);
            let hi = if k == 0 { f64::INFINITY } else { config.coordinate(schedule, sigmas[k - 1]) };
            if config.enabled && lo <= config.s_clip_max && hi > config.s_clip_min {
                config.gamma
            } else {
                0.0
            }
        })
        .collect()
}

/// Sampling steps (0-based) whose gate is nonzero.
pub fn firing_steps(config: &GuidanceConfig, schedule: &NoiseSchedule) -> Vec<usize> {
    step_gates(config, schedule)
        .iter()
        .enumerate()
        .filter(|(_, g)| **g != 0.0)
        .map(|(k, _)| k)
        .collect()
}

fn checked_gradient<L: LogitField + ?Sized>(
    logit: &L,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    sigma: f64,
    t: f64,
) -> Result<Array2<f64>> {
    let g = logit.logit_grad(x, labels, sigma)?;
    if g.dim() != x.dim() {
        return Err(Error::shape("logit gradient has the wrong shape"));
    }
    for (i, row) in g.rows().into_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGuidance { t, x: x.row(i).to_vec() });
        }
    }
    Ok(g)
}

/// `s(x, y, sigma) + gamma_gate(sigma) grad_x g(x, y, sigma)`. The
/// discriminator is not evaluated when the gate is closed.
pub fn guided_score<F, L>(
    score: &F,
    logit: &L,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    sigma: f64,
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
) -> Result<Array2<f64>>
where
    F: ScoreField + ?Sized,
    L: LogitField + ?Sized,
{
    let mut s = score.score(x, labels, sigma)?;
    let gate = gamma_gate(config.coordinate(schedule, sigma), config);
    if gate != 0.0 {
        let g = checked_gradient(logit, x, labels, sigma, schedule.time_at(sigma))?;
        s.scaled_add(gate, &g);
    }
    Ok(s)
}

/// Sampler hook adding the gated logit gradient. Counts logit-gradient row
/// evaluations so tests can confirm closed gates skip the discriminator.
pub struct GuidanceHook<'a, L: LogitField + ?Sized> {
    logit: &'a L,
    config: GuidanceConfig,
    gates: Vec<f64>,
    evaluations: AtomicUsize,
}

impl<'a, L: LogitField + ?Sized> GuidanceHook<'a, L> {
    pub fn new(logit: &'a L, config: &GuidanceConfig, schedule: &NoiseSchedule) -> Result<Self> {
        config.validate()?;
        Ok(GuidanceHook {
            logit,
            config: config.clone(),
            gates: step_gates(config, schedule),
            evaluations: AtomicUsize::new(0),
        })
    }

    pub fn gates(&self) -> &[f64] {
        &self.gates
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations.load(Ordering::Relaxed)
    }
}

impl<L: LogitField + Sync + ?Sized> ScoreHook for GuidanceHook<'_, L> {
    fn correction(&self, ctx: &HookContext, x: ArrayView2<'_, f64>, labels: &[usize]) -> Result<Option<Array2<f64>>> {
        if self.config.predictor_only && ctx.phase == HeunPhase::Corrector {
            return Ok(None);
        }
        let gate = self.gates.get(ctx.step).copied().unwrap_or(0.0);
        if gate == 0.0 {
            return Ok(None);
        }
        self.evaluations.fetch_add(x.nrows(), Ordering::Relaxed);
        let g = checked_gradient(self.logit, x, labels, ctx.sigma, ctx.time)?;
        Ok(Some(g * gate))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub step: usize,
    pub t: f64,
    pub gate: f64,
    /// Mean over chains of the predictor-phase correction norm.
    pub guidance_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GateTrace {
    pub records: Vec<GateRecord>,
}

impl GateTrace {
    pub fn from_batch(batch: &SampleBatch, gates: &[f64]) -> Self {
        let records = batch
            .correction_norms
            .iter()
            .enumerate()
            .map(|(k, norms)| GateRecord {
                step: k,
                t: batch.times[k],
                gate: gates.get(k).copied().unwrap_or(0.0),
                guidance_norm: norms.mean().unwrap_or(0.0),
            })
            .collect();
        GateTrace { records }
    }

    pub fn fired_steps(&self) -> Vec<usize> {
        self.records.iter().filter(|r| r.gate != 0.0).map(|r| r.step).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["step", "t", "gate", "guidance_norm"])?;
        for r in &self.records {
            wr.write_record([
                r.step.to_string(),
                format!("{:.16e}", r.t),
                format!("{:.16e}", r.gate),
                format!("{:.16e}", r.guidance_norm),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Guided Heun sampling of `labels.len()` chains.
pub fn guided_sample<F, L>(
    score: &F,
    logit: &L,
    labels: &[usize],
    schedule: &NoiseSchedule,
    config: &GuidanceConfig,
    seed: u64,
    jobs: usize,
) -> Result<(SampleBatch, GateTrace)>
where
    F: ScoreField + Sync + ?Sized,
    L: LogitField + Sync + ?Sized,
{
    if logit.dim() != score.dim() {
        return Err(Error::shape("score and discriminator disagree in dimension"));
    }
    let hook = GuidanceHook::new(logit, config, schedule)?;
    let batch = sample_chains(score, schedule, labels, seed, &hook, jobs)?;
    let trace = GateTrace::from_batch(&batch, hook.gates());
    Ok((batch, trace))
}
