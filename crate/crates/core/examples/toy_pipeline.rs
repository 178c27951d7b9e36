//! The whole loop on noisy two-moons: generate, train the score model,
//! detect, train the discriminator, sample with and without guidance,
//! analyze and plot.
//!
//!     cargo run --release --example toy_pipeline -- [run-dir] [--full]
//!
//! Without `--full` a reduced config runs in seconds; with it the
//! `toy-moons-50sym` preset runs (about a minute in release mode).

use sbdc_lab::pipeline::{quick_config, Run, RunConfig};

fn main() -> sbdc_lab::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let full = args.iter().any(|a| a == "--full");
    let dir = args.iter().find(|a| !a.starts_with("--")).cloned().unwrap_or_else(|| "toy-run".into());
    let config = if full { RunConfig::preset("toy-moons-50sym")? } else { quick_config(0) };

    let run = Run::create(config, &dir, std::thread::available_parallelism().map_or(1, |n| n.get()))?;
    let cmp = run.pipeline(true)?;
    println!("                 unguided  guided");
    println!("purity           {:>8.3}  {:>6.3}", cmp.unguided.purity, cmp.guided.purity);
    if let (Some(u), Some(g)) = (cmp.mean_cw_frechet_unguided, cmp.mean_cw_frechet_guided) {
        println!("class Frechet    {u:>8.3}  {g:>6.3}");
    }
    println!("density          {:>8.3}  {:>6.3}", cmp.unguided.density, cmp.guided.density);
    println!("coverage         {:>8.3}  {:>6.3}", cmp.unguided.coverage, cmp.guided.coverage);
    for (stage, secs) in &run.manifest()?.timings {
        println!("{stage:<12} {secs:>7.2}s");
    }
    println!("artifacts in {dir}");
    Ok(())
}
