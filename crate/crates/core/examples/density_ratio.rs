//! A time-dependent discriminator trained on samples from N(-1, 1) (clean)
//! and N(1, 1) (corrupt) recovers the log density ratio of the perturbed
//! densities, which is what guidance adds to the score.
//!
//!     cargo run --release --example density_ratio

use ndarray::{Array2, Axis};
use sbdc_lab::analytic::{AnalyticMixture, MixtureLogRatio};
use sbdc_lab::diffusion::NoiseSchedule;
use sbdc_lab::discriminator::{train_discriminator, AugConfig, DiscTrainConfig, DiscriminatorModel, LabeledPool};
use sbdc_lab::guidance::LogitField;
use sbdc_lab::rng;

fn main() -> sbdc_lab::Result<()> {
    let real = AnalyticMixture::gaussian(&[-1.0], 1.0)?;
    let fake = AnalyticMixture::gaussian(&[1.0], 1.0)?;
    let n = 20_000;
    let clean = LabeledPool::new(real.sample(n, &mut rng::stream(0, 1)), vec![0; n])?;
    let corrupt = LabeledPool::new(fake.sample(n, &mut rng::stream(0, 2)), vec![0; n])?;

    let schedule = NoiseSchedule::edm(18);
    let mut disc = DiscriminatorModel::new(1, 1, &[64, 64], schedule.clone(), &mut rng::stream(0, 6))?;
    disc.fit_preconditioning(ndarray::concatenate(Axis(0), &[clean.x.view(), corrupt.x.view()]).unwrap().view())?;
    let cfg = DiscTrainConfig { steps: 3000, aug: AugConfig::none(), ..Default::default() };
    train_discriminator(&mut disc, &clean, &corrupt, &cfg, 0)?;

    let exact = MixtureLogRatio::new(vec![real], vec![fake])?;
    let x = Array2::from_shape_fn((9, 1), |(i, _)| -2.0 + 0.5 * i as f64);
    let labels = vec![0; 9];
    for sigma in [0.002, 0.5, 2.0] {
        let g = disc.logit_grad(x.view(), &labels, sigma)?;
        let want = exact.logit_grad(x.view(), &labels, sigma)?;
        println!("sigma {sigma}");
        for i in 0..9 {
            println!("  x {:>5.2}  grad g {:>7.3}  exact {:>7.3}", x[[i, 0]], g[[i, 0]], want[[i, 0]]);
        }
    }
    Ok(())
}
