//! Trains a class-conditional score model on a two-component Gaussian
//! mixture and samples it with the Heun sampler.
//!
//!     cargo run --release --example score_sampling

use sbdc_lab::data::GaussianMixture;
use sbdc_lab::diffusion::{sample_chains, train_score, NoHook, NoiseSchedule, ScoreModel, ScoreTrainConfig};
use sbdc_lab::metrics::{gaussian_frechet, rows_with_label};
use sbdc_lab::rng;

fn main() -> sbdc_lab::Result<()> {
    let gm = GaussianMixture::new(vec![[-1.5, 0.0], [1.5, 0.5]], [[0.2, 0.05], [0.05, 0.1]], None)?;
    let data = gm.sample(8000, 0)?;
    let x = data.coords();
    let labels = data.observed_labels();

    let schedule = NoiseSchedule::edm(18);
    let mut model = ScoreModel::new(2, 2, &[64, 64], schedule.clone(), &mut rng::stream(0, 3))?;
    model.fit_preconditioning(x.view())?;
    let cfg = ScoreTrainConfig { steps: 3000, ..Default::default() };
    let (trace, _) = train_score(&mut model, x.view(), &labels, &cfg, 0)?;
    println!("final smoothed loss {:.4}", trace.final_smoothed().unwrap_or(f64::NAN));

    let chain_labels: Vec<usize> = (0..2000).map(|i| i % 2).collect();
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    let batch = sample_chains(&model, &schedule, &chain_labels, 1, &NoHook, jobs)?;
    let out = batch.final_samples();
    for class in 0..2 {
        let real = rows_with_label(x.view(), &labels, class);
        let gen = rows_with_label(out.view(), &chain_labels, class);
        let f = gaussian_frechet(real.view(), gen.view())?;
        println!("class {class}: Frechet to training data {:.4}", f.value);
    }
    batch.trajectory(0).save_csv("trajectory_chain0.csv".as_ref())?;
    println!("wrote trajectory_chain0.csv");
    Ok(())
}
