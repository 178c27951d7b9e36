//! Splits noisy two-moons data into pseudo-clean and pseudo-corrupt sets.

use sbdc_lab::data::{apply_symmetric_noise, make_two_moons};
use sbdc_lab::detection::{detect_confidence, detect_oracle_with_errors, ConfidenceConfig, DetectionScores};

fn show(name: &str, s: &DetectionScores) {
    let f = |v: Option<f64>| v.map_or("-".into(), |v| format!("{v:.3}"));
    println!("{name:<22} precision {}  recall {}  F1 {}", f(s.precision), f(s.recall), f(s.f1));
}

fn main() -> sbdc_lab::Result<()> {
    let clean = make_two_moons(3000, 0.1, 4)?;
    let noisy = apply_symmetric_noise(&clean, 0.4, 4)?;
    println!("flipped fraction {:.3}", noisy.flip_fraction());

    show("oracle exact", &detect_oracle_with_errors(&noisy, 0.0, 0.0, 4)?.scores);
    show("oracle 1/3 mistakes", &detect_oracle_with_errors(&noisy, 1.0 / 3.0, 1.0 / 3.0, 4)?.scores);
    let report = detect_confidence(&noisy, &ConfidenceConfig::default(), 4)?;
    show("confidence (valley)", &report.scores);
    println!("flagged {:.3} of the data", report.flagged_fraction());
    Ok(())
}
