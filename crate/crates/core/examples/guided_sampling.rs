//! Gated guidance on an analytic testbed: an unconditional two-bump score
//! plus the exact log ratio of the left bump over the right one.

use sbdc_lab::analytic::{AnalyticMixture, MixtureLogRatio, MixtureScore};
use sbdc_lab::diffusion::NoiseSchedule;
use sbdc_lab::guidance::{firing_steps, guided_sample, GuidanceConfig};

fn main() -> sbdc_lab::Result<()> {
    let left = AnalyticMixture::gaussian(&[-2.0, 0.0], 0.25)?;
    let right = AnalyticMixture::gaussian(&[2.0, 0.0], 0.25)?;
    let base = AnalyticMixture::blend(&[(0.5, &left), (0.5, &right)])?;
    let score = MixtureScore::new(vec![base])?;
    let logit = MixtureLogRatio::new(vec![left], vec![right])?;

    let schedule = NoiseSchedule::edm(18);
    let gated = GuidanceConfig { gamma: 1.0, ..Default::default() };
    println!("(1.5, 50] fires on steps {:?}", firing_steps(&gated, &schedule));

    let labels = vec![0; 4000];
    for cfg in [GuidanceConfig::full_range(0.0), GuidanceConfig::full_range(0.5), GuidanceConfig::full_range(1.0), gated] {
        let (batch, trace) = guided_sample(&score, &logit, &labels, &schedule, &cfg, 0, 1)?;
        let left_share = batch.final_samples().column(0).iter().filter(|&&v| v < 0.0).count() as f64 / labels.len() as f64;
        println!(
            "gamma {:.1} on ({}, {}]: {:>2} steps fired, left share {left_share:.3}",
            cfg.gamma,
            cfg.s_clip_min,
            cfg.s_clip_max,
            trace.fired_steps().len()
        );
    }
    Ok(())
}
