//! Confidence and instability along sampling trajectories, an interval
//! suggestion derived from them, and the SVG rendering.
//!
//!     cargo run --example phase_curves -- [out.svg]

use sbdc_lab::analytic::{AnalyticMixture, MixtureScore};
use sbdc_lab::data::GaussianMixture;
use sbdc_lab::diffusion::NoiseSchedule;
use sbdc_lab::metrics::{measure_phase_curves, suggest_interval, BayesClassifier};
use sbdc_lab::plot::phase_curves_svg;

fn main() -> sbdc_lab::Result<()> {
    let gm = GaussianMixture::new(vec![[-1.0, 0.0], [1.0, 0.0]], [[0.25, 0.0], [0.0, 0.25]], None)?;
    let classes = (0..2).map(|k| AnalyticMixture::from_component(&gm, k)).collect::<sbdc_lab::Result<Vec<_>>>()?;
    let score = MixtureScore::new(classes)?;
    let classifier = BayesClassifier::gaussian_mixture(&gm)?;
    let schedule = NoiseSchedule::edm(18);

    let curves = measure_phase_curves(&score, &schedule, 2, 2000, 0, &classifier, 1)?;
    println!("step  sigma      C      I");
    for k in 0..curves.num_steps() {
        let i = curves.instability.get(k).map_or(String::new(), |v| format!("{v:.3}"));
        println!("{k:>4}  {:>8.3}  {:.3}  {i}", curves.sigmas[k], curves.confidence[k]);
    }
    let s = suggest_interval(&curves, 0.5)?;
    println!("suggested gate ({:.3}, {:.3}] over steps {:?}", s.s_clip_min, s.s_clip_max, s.steps);

    let path = std::env::args().nth(1).unwrap_or_else(|| "phase_curves.svg".into());
    std::fs::write(&path, phase_curves_svg(&curves)?)?;
    println!("wrote {path}");
    Ok(())
}
