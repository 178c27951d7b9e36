//! Synthetic datasets and the three label-noise operators.
//!
//!     cargo run --example label_noise -- [out.csv]

use sbdc_lab::data::{apply_asymmetric_noise, apply_idn_noise, apply_symmetric_noise, make_gaussian_mixture, make_two_moons};

fn main() -> sbdc_lab::Result<()> {
    let moons = make_two_moons(10_000, 0.1, 0)?;
    for tau in [0.2, 0.5, 1.0] {
        let noisy = apply_symmetric_noise(&moons, tau, 0)?;
        println!("symmetric tau {tau:.1}: flipped {:.4} (expected {:.4})", noisy.flip_fraction(), tau / 2.0);
    }

    let means = [[0.0, 0.0], [3.0, 0.0], [0.0, 3.0]];
    let blobs = make_gaussian_mixture(3, &means, [[0.3, 0.0], [0.0, 0.3]], 9_000, 1)?;
    let asym = apply_asymmetric_noise(&blobs, 0.3, &[1, 2, 0], 1)?;
    println!("asymmetric 0->1->2->0 at 0.3: flipped {:.4}", asym.flip_fraction());
    println!("  observed class counts {:?}", asym.class_counts_observed());

    let idn = apply_idn_noise(&blobs, 0.4, 2)?;
    println!("instance-dependent at 0.4: flipped {:.4}", idn.dataset.flip_fraction());
    for i in 0..3 {
        let p: Vec<String> = idn.label_probs[i].iter().map(|v| format!("{v:.3}")).collect();
        println!("  point {i}: y = {}, q = {:.3}, p = [{}]", blobs.points[i].y_true, idn.flip_rates[i], p.join(", "));
    }

    if let Some(path) = std::env::args().nth(1) {
        apply_symmetric_noise(&moons, 1.0, 0)?.save_csv(path.as_ref())?;
        println!("wrote {path}");
    }
    Ok(())
}
