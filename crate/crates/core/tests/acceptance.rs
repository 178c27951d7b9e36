//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! with its measurements and wall time. Criteria are serialized so the
//! timings are not inflated by each other.
//!
//! `cargo test --test acceptance -- --nocapture` shows the lines.

use std::fs;
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use sbdc_lab::analytic::{AnalyticMixture, MixtureLogRatio};
use sbdc_lab::data::{
    apply_asymmetric_noise, apply_idn_noise, apply_symmetric_noise, make_gaussian_mixture, make_two_moons, Dataset,
    LabeledPoint2D,
};
use sbdc_lab::detection::{score_detector, Verdict};
use sbdc_lab::diffusion::{sample_chains, HookContext, NoHook, NoiseSchedule, ScoreHook, ScoreModel, ScoreTrainConfig};
use sbdc_lab::discriminator::{train_discriminator, AugConfig, DiscTrainConfig, DiscriminatorModel, LabeledPool};
use sbdc_lab::guidance::{firing_steps, gamma_gate, guided_sample, GuidanceConfig, LogitField};
use sbdc_lab::metrics::{gaussian_frechet, knn_density_coverage, measure_phase_curves, PhaseCurves};
use sbdc_lab::nn::{Checkpoint, DenseNetwork, LossEval};
use sbdc_lab::pipeline::{files, quick_config, Comparison, Run, RunConfig, RunManifest};
use sbdc_lab::rng;

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Prints the criterion line and fails the test when any check failed or the
/// time budget was exceeded.
fn report(id: u32, name: &str, checks: &[(String, bool)], elapsed: Duration, budget: Duration) {
    let in_time = elapsed <= budget;
    let ok = in_time && checks.iter().all(|(_, pass)| *pass);
    let details: Vec<&str> = checks.iter().map(|(d, _)| d.as_str()).collect();
    println!(
        "[{}] criterion {id} {name}: {} ({:.1}s of {:.0}s)",
        if ok { "PASS" } else { "FAIL" },
        details.join("; "),
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    assert!(in_time, "criterion {id} exceeded its time budget");
    for (d, pass) in checks {
        assert!(*pass, "criterion {id}: {d}");
    }
}

fn check(desc: String, pass: bool) -> (String, bool) {
    (desc, pass)
}

// ---------------------------------------------------------------- 1

/// `L = sum_ij c_ij o_ij + 0.5 o_ij^2` for fixed random `c`.
fn probe_loss(c: &Array2<f64>) -> impl Fn(ArrayView2<'_, f64>) -> LossEval + '_ {
    move |o: ArrayView2<'_, f64>| {
        let per_row = (c * &o + &o.mapv(|v| 0.5 * v * v)).sum_axis(Axis(1));
        LossEval { per_row, grad: c + &o }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom == 0.0 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

#[test]
fn criterion_1_gradient_check() {
    let _g = serial();
    let t0 = Instant::now();
    let shapes: [&[usize]; 4] = [&[2, 16, 1], &[3, 8, 8, 2], &[11, 32, 32, 2], &[11, 24, 24, 24, 1]];
    let probes = 120;
    let h = 1e-5;
    let mut checks = Vec::new();
    let mut r = rng::stream(1, 100);
    for widths in shapes {
        let net = DenseNetwork::new(widths, &mut r).unwrap();
        let x = Array2::from_shape_fn((5, widths[0]), |_| r.random_range(-1.5..1.5));
        let c = Array2::from_shape_fn((5, *widths.last().unwrap()), |_| r.random_range(-1.0..1.0));
        let loss = probe_loss(&c);
        let bp = net.backward(x.view(), &loss).unwrap();
        let analytic = bp.grads.flatten();
        let base = net.flat_params();
        let eval = |p: &[f64]| {
            let mut n = net.clone();
            n.set_flat_params(p).unwrap();
            loss(n.forward(x.view()).unwrap().view()).total()
        };
        let mut worst: f64 = 0.0;
        for _ in 0..probes {
            let i = r.random_range(0..base.len());
            let mut p = base.clone();
            p[i] = base[i] + h;
            let up = eval(&p);
            p[i] = base[i] - h;
            let down = eval(&p);
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * h)));
        }
        // input gradients through the same reverse pass
        for _ in 0..probes / 4 {
            let (i, j) = (r.random_range(0..x.nrows()), r.random_range(0..x.ncols()));
            let f = |d: f64| {
                let mut xp = x.clone();
                xp[[i, j]] += d;
                loss(net.forward(xp.view()).unwrap().view()).total()
            };
            worst = worst.max(rel_err(bp.input_grad[[i, j]], (f(h) - f(-h)) / (2.0 * h)));
        }
        checks.push(check(format!("{widths:?} max rel err {worst:.2e}"), worst <= 1e-4));
    }

    // Discriminator input gradient, including its input preconditioning.
    let sched = NoiseSchedule::edm(18);
    let mut d = DiscriminatorModel::new(2, 3, &[16, 16], sched, &mut rng::stream(2, 0)).unwrap();
    d.sigma_data = 0.6;
    d.data_mean = vec![0.3, -0.2];
    let flat: Vec<f64> = d.net.flat_params().iter().map(|_| r.random_range(-0.5..0.5)).collect();
    d.net.set_flat_params(&flat).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let x = Array2::from_shape_fn((1, 2), |_| r.random_range(-2.0..2.0));
        let label = [r.random_range(0..3)];
        let sigma = [0.01, 0.5, 3.0, 40.0][r.random_range(0..4)];
        let g = d.logit_grad(x.view(), &label, sigma).unwrap();
        let j = r.random_range(0..2);
        let f = |delta: f64| {
            let mut xp = x.clone();
            xp[[0, j]] += delta;
            d.logit(xp.view(), &label, sigma).unwrap()[0]
        };
        let fd = (f(h * sigma.max(1.0)) - f(-h * sigma.max(1.0))) / (2.0 * h * sigma.max(1.0));
        worst = worst.max(rel_err(g[[0, j]], fd));
    }
    checks.push(check(format!("discriminator logit input grad max rel err {worst:.2e}"), worst <= 1e-4));
    report(1, "gradient correctness", &checks, t0.elapsed(), Duration::from_secs(60));
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_dsm_matches_analytic_gaussian_score() {
    let _g = serial();
    let t0 = Instant::now();
    let mean = [0.5, -0.3];
    let var = 0.25;
    let target = AnalyticMixture::gaussian(&mean, var).unwrap();
    let n = 100_000;
    let x = target.sample(n, &mut rng::stream(1, 1));
    let sched = NoiseSchedule::edm(18);
    let mut model = ScoreModel::new(2, 1, &[64, 64], sched.clone(), &mut rng::stream(1, 3)).unwrap();
    model.fit_preconditioning(x.view()).unwrap();
    let cfg = ScoreTrainConfig { steps: 20_000, ..Default::default() };
    sbdc_lab::diffusion::train_score(&mut model, x.view(), &vec![0; n], &cfg, 1).unwrap();

    let half = 3.0 * var.sqrt();
    let grid = Array2::from_shape_fn((441, 2), |(p, j)| {
        let idx = if j == 0 { p / 21 } else { p % 21 };
        mean[j] - half + 2.0 * half * idx as f64 / 20.0
    });
    let sigma_min = sched.sigma_min;
    let s = sbdc_lab::diffusion::ScoreField::score(&model, grid.view(), &vec![0; 441], sigma_min).unwrap();
    // Exact score of N(mu, (var + sigma^2) I).
    let v = var + sigma_min * sigma_min;
    let exact = Array2::from_shape_fn((441, 2), |(p, j)| -(grid[[p, j]] - mean[j]) / v);
    let worst = (&s - &exact).rows().into_iter().map(|r| r.dot(&r).sqrt()).fold(0.0, f64::max);
    let checks = [check(format!("max |s - s*| over 21x21 grid at sigma_min = {worst:.4}"), worst <= 0.1)];
    report(2, "DSM sanity", &checks, t0.elapsed(), Duration::from_secs(180));
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_3_discriminator_recovers_density_ratio() {
    let _g = serial();
    let t0 = Instant::now();
    let real = AnalyticMixture::gaussian(&[-1.0], 1.0).unwrap();
    let fake = AnalyticMixture::gaussian(&[1.0], 1.0).unwrap();
    let n = 50_000;
    let clean = LabeledPool::new(real.sample(n, &mut rng::stream(1, 1)), vec![0; n]).unwrap();
    let corrupt = LabeledPool::new(fake.sample(n, &mut rng::stream(1, 2)), vec![0; n]).unwrap();
    let sched = NoiseSchedule::edm(18);
    let mut d = DiscriminatorModel::new(1, 1, &[64, 64, 64], sched.clone(), &mut rng::stream(1, 6)).unwrap();
    let all = ndarray::concatenate(Axis(0), &[clean.x.view(), corrupt.x.view()]).unwrap();
    d.fit_preconditioning(all.view()).unwrap();
    let cfg = DiscTrainConfig { steps: 8000, aug: AugConfig::none(), ..Default::default() };
    train_discriminator(&mut d, &clean, &corrupt, &cfg, 1).unwrap();

    let oracle = MixtureLogRatio::new(vec![real], vec![fake]).unwrap();
    let sigmas = sched.sigmas();
    let mut checks = Vec::new();
    for sigma in [sigmas[17], sigmas[11], sigmas[9]] {
        // Central 90% of the pooled perturbed density 0.5 N(-1, v) + 0.5 N(1, v).
        let pooled = Normal::new(0.0, (1.0 + sigma * sigma).sqrt()).unwrap();
        let cdf = |x: f64| 0.5 * (pooled.cdf(x + 1.0) + pooled.cdf(x - 1.0));
        let quantile = |p: f64| {
            let (mut a, mut b) = (-50.0, 50.0);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if cdf(m) < p {
                    a = m
                } else {
                    b = m
                }
            }
            0.5 * (a + b)
        };
        let m = 200;
        let x = Array2::from_shape_fn((m, 1), |(i, _)| quantile(0.05 + 0.9 * (i as f64 + 0.5) / m as f64));
        let labels = vec![0; m];
        let mae_d = (&d.probability(x.view(), &labels, sigma).unwrap()
            - &oracle.optimal_output(x.view(), &labels, sigma).unwrap())
            .mapv(f64::abs)
            .mean()
            .unwrap();
        let mae_g = (&d.logit_grad(x.view(), &labels, sigma).unwrap()
            - &oracle.logit_grad(x.view(), &labels, sigma).unwrap())
            .mapv(f64::abs)
            .mean()
            .unwrap();
        checks.push(check(format!("sigma {sigma:.3}: D MAE {mae_d:.4}"), mae_d <= 0.05));
        checks.push(check(format!("grad MAE {mae_g:.4}"), mae_g <= 0.15));
    }
    report(3, "density-ratio recovery", &checks, t0.elapsed(), Duration::from_secs(180));
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_4_gate_semantics() {
    let _g = serial();
    let t0 = Instant::now();
    let cfg = GuidanceConfig { gamma: 1.5, s_clip_min: 1.5, s_clip_max: 50.0, ..Default::default() };
    let sched = NoiseSchedule::edm(18);
    let fired = firing_steps(&cfg, &sched);
    let n = sched.steps;
    // Steps counted down from the end of sampling.
    let mut countdown: Vec<usize> = fired.iter().map(|k| n - k).collect();
    countdown.sort_unstable();
    let checks = [
        check(format!("gate(max) = {}", gamma_gate(50.0, &cfg)), gamma_gate(50.0, &cfg) == 1.5),
        check(format!("gate(min) = {}", gamma_gate(1.5, &cfg)), gamma_gate(1.5, &cfg) == 0.0),
        check(format!("fires on steps {countdown:?}"), countdown == (8..=16).collect::<Vec<_>>()),
    ];
    report(4, "gate semantics", &checks, t0.elapsed(), Duration::from_secs(1));
}

// ---------------------------------------------------------------- 5, 6

struct ToyRun {
    dir: PathBuf,
    comparison: Comparison,
    elapsed: Duration,
}

static TOY: [OnceLock<ToyRun>; 3] = [OnceLock::new(), OnceLock::new(), OnceLock::new()];

fn toy_run(seed: u64) -> &'static ToyRun {
    TOY[seed as usize].get_or_init(|| {
        let t0 = Instant::now();
        let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("acceptance-toy-seed{seed}"));
        let _ = fs::remove_dir_all(&dir);
        let mut cfg = RunConfig::preset("toy-moons-50sym").unwrap();
        cfg.seed = seed;
        let comparison = Run::create(cfg, &dir, 1).unwrap().pipeline(false).unwrap();
        ToyRun { dir, comparison, elapsed: t0.elapsed() }
    })
}

#[test]
fn criterion_5_toy_correction_across_seeds() {
    let _g = serial();
    let t0 = Instant::now();
    let mut checks = Vec::new();
    let mut model_time = Duration::ZERO;
    for seed in 0..3 {
        let run = toy_run(seed);
        model_time += run.elapsed;
        let c = &run.comparison;
        let (fu, fg) = (c.mean_cw_frechet_unguided.unwrap(), c.mean_cw_frechet_guided.unwrap());
        checks.push(check(
            format!("seed {seed}: purity {:.3} -> {:.3}", c.unguided.purity, c.guided.purity),
            c.guided.purity - c.unguided.purity >= 0.10,
        ));
        checks.push(check(format!("CW-Frechet {fu:.3} -> {fg:.3}"), fg < fu));
    }
    // Runs already built by criterion 6 still count towards the budget.
    let elapsed = t0.elapsed().max(model_time);
    report(5, "toy correction", &checks, elapsed, Duration::from_secs(600));
}

#[test]
fn criterion_6_phase_curve_shape() {
    let _g = serial();
    let t0 = Instant::now();
    let run = toy_run(0);
    let cfg = RunConfig::preset("toy-moons-50sym").unwrap();
    let model = ScoreModel::from_checkpoint(&Checkpoint::load(&run.dir.join(files::SCORE)).unwrap()).unwrap();
    let classifier = cfg.dataset.classifier().unwrap();
    let curves = measure_phase_curves(&model, &cfg.schedule, 2, 2000, 0, &classifier, 1).unwrap();
    let saved = PhaseCurves::read_csv(fs::File::open(run.dir.join(files::PHASE_CURVES)).unwrap()).unwrap();
    let k = 2.0;
    let band = 3.0 * ((1.0 / k) * (1.0 - 1.0 / k) / curves.chains as f64).sqrt();
    let c0 = curves.confidence[0];
    let argmax = curves
        .instability
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0;
    let last = curves.instability.len() - 1;
    let checks = [
        check(format!("{} chains", curves.chains), curves.chains == 2000),
        check("matches the pipeline's curves".into(), saved.confidence == curves.confidence),
        check(format!("C(first) = {c0:.4}, 1/K +- {band:.4}"), (c0 - 1.0 / k).abs() <= band),
        check(format!("argmax I at step {argmax} of 0..={last}"), argmax > 0 && argmax < last),
    ];
    let elapsed = t0.elapsed().max(run.elapsed);
    report(6, "phase-curve shape", &checks, elapsed, Duration::from_secs(300));
}

// ---------------------------------------------------------------- 7

fn truncated_normal_mean(mu: f64, sd: f64) -> f64 {
    let z = Normal::new(0.0, 1.0).unwrap();
    let (a, b) = ((0.0 - mu) / sd, (1.0 - mu) / sd);
    mu + sd * (z.pdf(a) - z.pdf(b)) / (z.cdf(b) - z.cdf(a))
}

fn within_3_sigma(data: &Dataset, p: f64) -> (f64, bool) {
    let n = data.len() as f64;
    let flips = data.points.iter().filter(|q| q.y_obs != q.y_true).count() as f64 / n;
    (flips, (flips - p).abs() <= 3.0 * (p * (1.0 - p) / n).sqrt())
}

#[test]
fn criterion_7_noise_operator_statistics() {
    let _g = serial();
    let t0 = Instant::now();
    let n = 10_000;
    let means = [[0.0, 0.0], [3.0, 0.0], [0.0, 3.0], [3.0, 3.0]];
    let mut fails = Vec::new();
    let mut max_sum_err: f64 = 0.0;
    let mut max_diag_err: f64 = 0.0;
    for seed in 0..10u64 {
        let moons = make_two_moons(n, 0.1, seed).unwrap();
        let gm = make_gaussian_mixture(4, &means, [[0.3, 0.0], [0.0, 0.3]], n, seed).unwrap();
        let cases = [
            ("symmetric K=2 tau=0.5", apply_symmetric_noise(&moons, 0.5, seed).unwrap(), 0.25),
            ("symmetric K=4 tau=0.4", apply_symmetric_noise(&gm, 0.4, seed).unwrap(), 0.4 * 3.0 / 4.0),
            ("asymmetric K=4 tau=0.3", apply_asymmetric_noise(&gm, 0.3, &[1, 2, 3, 0], seed).unwrap(), 0.3),
            ("asymmetric K=2 tau=0.45", apply_asymmetric_noise(&moons, 0.45, &[1, 0], seed).unwrap(), 0.45),
        ];
        for (name, data, p) in cases {
            let (f, ok) = within_3_sigma(&data, p);
            if !ok {
                fails.push(format!("seed {seed} {name}: {f:.4} vs {p:.4}"));
            }
        }
        for (base, rate) in [(&gm, 0.4), (&moons, 0.2)] {
            let idn = apply_idn_noise(base, rate, seed).unwrap();
            let p = truncated_normal_mean(rate, 0.1);
            let (f, ok) = within_3_sigma(&idn.dataset, p);
            if !ok {
                fails.push(format!("seed {seed} idn tau={rate}: {f:.4} vs {p:.4}"));
            }
            for ((probs, q), pt) in idn.label_probs.iter().zip(&idn.flip_rates).zip(&base.points) {
                max_sum_err = max_sum_err.max((probs.iter().sum::<f64>() - 1.0).abs());
                max_diag_err = max_diag_err.max((probs[pt.y_true] - (1.0 - q)).abs());
            }
        }
    }
    let checks = [
        check(format!("60 rate checks over 10 seeds, failures {fails:?}"), fails.is_empty()),
        check(format!("IDN |sum p - 1| <= {max_sum_err:.1e}"), max_sum_err <= 1e-12),
        check(format!("IDN |p_y - (1 - q)| <= {max_diag_err:.1e}"), max_diag_err <= 1e-12),
    ];
    report(7, "noise-operator statistics", &checks, t0.elapsed(), Duration::from_secs(60));
}

// ---------------------------------------------------------------- 8

/// Adds `gamma * grad g` at every evaluation, with no gate at all.
struct ConstantGamma<'a> {
    disc: &'a DiscriminatorModel,
    gamma: f64,
}

impl ScoreHook for ConstantGamma<'_> {
    fn correction(
        &self,
        ctx: &HookContext,
        x: ArrayView2<'_, f64>,
        labels: &[usize],
    ) -> sbdc_lab::Result<Option<Array2<f64>>> {
        Ok(Some(self.disc.logit_grad(x, labels, ctx.sigma)? * self.gamma))
    }
}

#[test]
fn criterion_8_equivalence_identities() {
    let _g = serial();
    let t0 = Instant::now();
    let base = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-identities");
    let _ = fs::remove_dir_all(&base);
    let first = Run::create(quick_config(21), base.join("a"), 1).unwrap();
    first.pipeline(false).unwrap();
    let manifest = RunManifest::load(&first.path(files::MANIFEST)).unwrap();
    let second = Run::create(manifest.run_config().unwrap(), base.join("b"), 2).unwrap();
    second.pipeline(false).unwrap();
    let again = RunManifest::load(&second.path(files::MANIFEST)).unwrap();

    let score = first.load_score().unwrap();
    let disc = first.load_discriminator().unwrap();
    let sched = first.config.schedule.clone();
    let labels = first.chain_labels();
    let seed = first.config.seed;
    let plain = sample_chains(&score, &sched, &labels, seed, &NoHook, 1).unwrap();
    let (zero, _) = guided_sample(&score, &disc, &labels, &sched, &GuidanceConfig::full_range(0.0), seed, 1).unwrap();
    let zero_gated = GuidanceConfig { gamma: 0.0, ..Default::default() };
    let (zero2, _) = guided_sample(&score, &disc, &labels, &sched, &zero_gated, seed, 1).unwrap();
    let (full, _) = guided_sample(&score, &disc, &labels, &sched, &GuidanceConfig::full_range(1.5), seed, 1).unwrap();
    let constant = sample_chains(&score, &sched, &labels, seed, &ConstantGamma { disc: &disc, gamma: 1.5 }, 1).unwrap();

    let checks = [
        check("gamma=0 full range == unguided".into(), zero.states == plain.states && zero.denoised == plain.denoised),
        check("gamma=0 gated == unguided".into(), zero2.states == plain.states),
        check("full-range gate == constant gamma".into(), full.states == constant.states),
        check("guidance changes the samples".into(), full.states != plain.states),
        check(format!("rerun reproduces {} hashes", again.hashes.len()), again.hashes == manifest.hashes),
        check("hashes verify on re-read".into(), manifest.verify(&first.dir).unwrap().is_empty()),
    ];
    report(8, "equivalence identities", &checks, t0.elapsed(), Duration::from_secs(120));
}

// ---------------------------------------------------------------- 9

/// Mean and unbiased covariance of 2D points, written out longhand.
fn moments_2d(p: &[[f64; 2]]) -> ([f64; 2], [[f64; 2]; 2]) {
    let n = p.len() as f64;
    let m = [p.iter().map(|q| q[0]).sum::<f64>() / n, p.iter().map(|q| q[1]).sum::<f64>() / n];
    let mut c = [[0.0; 2]; 2];
    for q in p {
        for a in 0..2 {
            for b in 0..2 {
                c[a][b] += (q[a] - m[a]) * (q[b] - m[b]) / (n - 1.0);
            }
        }
    }
    (m, c)
}

/// Closed form for 2x2 SPD matrices: `tr((A B)^1/2) = sqrt(tr(AB) + 2 sqrt(det A det B))`.
fn frechet_oracle(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let (ma, ca) = moments_2d(a);
    let (mb, cb) = moments_2d(b);
    let det = |c: [[f64; 2]; 2]| c[0][0] * c[1][1] - c[0][1] * c[1][0];
    let tr_ab = ca[0][0] * cb[0][0] + ca[0][1] * cb[1][0] + ca[1][0] * cb[0][1] + ca[1][1] * cb[1][1];
    let cross = (tr_ab + 2.0 * (det(ca) * det(cb)).sqrt()).sqrt();
    (ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2) + ca[0][0] + ca[1][1] + cb[0][0] + cb[1][1] - 2.0 * cross
}

fn rows(p: &[[f64; 2]]) -> Array2<f64> {
    Array2::from_shape_fn((p.len(), 2), |(i, j)| p[i][j])
}

/// Density and coverage by direct enumeration of every (real, generated) pair.
fn knn_enumerated(real: &[[f64; 2]], gen: &[[f64; 2]], k: usize) -> (f64, f64) {
    let d2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
    let radii: Vec<f64> = real
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            let mut ds: Vec<f64> = real.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, &s)| d2(r, s)).collect();
            ds.sort_by(f64::total_cmp);
            ds[k - 1]
        })
        .collect();
    let inside = |i: usize, g: [f64; 2]| d2(real[i], g) < radii[i];
    let hits: usize = gen.iter().map(|&g| (0..real.len()).filter(|&i| inside(i, g)).count()).sum();
    let covered = (0..real.len()).filter(|&i| gen.iter().any(|&g| inside(i, g))).count();
    (hits as f64 / (k * gen.len()) as f64, covered as f64 / real.len() as f64)
}

#[test]
fn criterion_9_metric_oracles() {
    let _g = serial();
    let t0 = Instant::now();
    let mut checks = Vec::new();

    let square = [[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 2.0]];
    let diamond = [[3.0, 0.0], [5.0, 0.0], [4.0, 1.0], [4.0, -1.0]];
    let skew = [[0.0, 0.0], [1.0, 1.0], [2.0, 0.5], [3.0, 3.5]];
    let tilted = [[-1.0, 2.0], [0.5, 1.0], [1.0, -1.0], [2.5, 0.0]];
    // Isotropic pair by hand: |dmu|^2 = 10, covariances 4/3 I and 2/3 I.
    let by_hand = 10.0 + 2.0 * ((4.0f64 / 3.0).sqrt() - (2.0f64 / 3.0).sqrt()).powi(2);
    let got = gaussian_frechet(rows(&square).view(), rows(&diamond).view()).unwrap().value;
    checks.push(check(format!("square/diamond |{got:.12} - {by_hand:.12}|"), (got - by_hand).abs() <= 1e-9));
    for (name, a, b) in [("skew/tilted", &skew, &tilted), ("square/skew", &square, &skew), ("tilted/diamond", &tilted, &diamond)] {
        let got = gaussian_frechet(rows(a).view(), rows(b).view()).unwrap().value;
        let want = frechet_oracle(a, b);
        checks.push(check(format!("{name} err {:.1e}", (got - want).abs()), (got - want).abs() <= 1e-9));
    }

    // Three real and three generated points, k = 1. Real radii are 1, 1, 2;
    // (1, 0) sits exactly on the boundary of the first and third balls.
    let real = [[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]];
    let gen = [[0.5, 0.0], [1.0, 0.0], [10.0, 10.0]];
    let (dens, cov) = knn_density_coverage(rows(&real).view(), rows(&gen).view(), 1).unwrap();
    let (de, ce) = knn_enumerated(&real, &gen, 1);
    checks.push(check(
        format!("6-point density {dens} coverage {cov:.4} vs enumeration {de} {ce:.4}"),
        dens == de && cov == ce && de == 1.0 && (ce - 2.0 / 3.0).abs() < 1e-15,
    ));
    let mut r = rng::stream(9, 9);
    let mut knn_ok = true;
    for _ in 0..50 {
        let real: Vec<[f64; 2]> = (0..6).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
        let gen: Vec<[f64; 2]> = (0..6).map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]).collect();
        for k in 1..=3 {
            let got = knn_density_coverage(rows(&real).view(), rows(&gen).view(), k).unwrap();
            knn_ok &= (got.0 - knn_enumerated(&real, &gen, k).0).abs() < 1e-12;
            knn_ok &= (got.1 - knn_enumerated(&real, &gen, k).1).abs() < 1e-12;
        }
    }
    checks.push(check("random 6-point configurations match enumeration".into(), knn_ok));

    // 3 TP, 1 FP, 2 FN, 4 TN with "corrupt" as the positive class.
    let truth = [true, true, true, false, true, true, false, false, false, false];
    let flagged = [true, true, true, true, false, false, false, false, false, false];
    let points = truth
        .iter()
        .map(|&c| LabeledPoint2D { y_obs: usize::from(c), ..LabeledPoint2D::new([0.0, 0.0], 0) })
        .collect();
    let data = Dataset::new(points, 2).unwrap();
    let verdicts: Vec<Verdict> = flagged.iter().map(|&f| if f { Verdict::Corrupt } else { Verdict::Clean }).collect();
    let s = score_detector(&verdicts, &data).unwrap();
    let (p, rc, f1) = (s.precision.unwrap(), s.recall.unwrap(), s.f1.unwrap());
    checks.push(check(
        format!("P {p} R {rc} F1 {f1:.4}"),
        p == 0.75 && (rc - 0.6).abs() < 1e-15 && (f1 - 2.0 / 3.0).abs() < 1e-12,
    ));
    report(9, "metric oracles", &checks, t0.elapsed(), Duration::from_secs(1));
}
