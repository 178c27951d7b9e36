use std::fs;

use sbdc_lab::data::NoiseSpec;
use sbdc_lab::pipeline::{files, quick_config, read_samples, Run, RunConfig, RunManifest, Stage};
use sbdc_lab::Error;

fn column(path: &std::path::Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].to_string()).collect()
}

#[test]
fn generate_writes_files_and_matches_the_flip_convention() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(1);
    cfg.dataset = sbdc_lab::pipeline::DatasetSpec::TwoMoons { n: 20_000, noise_std: 0.1 };
    cfg.noise = NoiseSpec::Symmetric { rate: 0.5 };
    let run = Run::create(cfg, dir.path(), 1).unwrap();
    let s = run.generate().unwrap();
    for f in Stage::Generate.outputs() {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    assert_eq!(s.expected_flip_fraction, 0.25);
    let sd = (0.25f64 * 0.75 / 20_000.0).sqrt();
    assert!((s.flip_fraction - 0.25).abs() < 4.0 * sd, "{}", s.flip_fraction);
}

#[test]
fn toy_preset_flips_half_the_labels() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.dataset = sbdc_lab::pipeline::DatasetSpec::TwoMoons { n: 20_000, noise_std: 0.1 };
    let s = Run::create(cfg, dir.path(), 1).unwrap().generate().unwrap();
    assert_eq!(s.expected_flip_fraction, 0.5);
    assert!((s.flip_fraction - 0.5).abs() < 4.0 * (0.25f64 / 20_000.0).sqrt());
}

#[test]
fn zero_rate_leaves_label_columns_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(2);
    cfg.noise = NoiseSpec::Symmetric { rate: 0.0 };
    Run::create(cfg, dir.path(), 1).unwrap().generate().unwrap();
    let clean = column(&dir.path().join(files::CLEAN), "y_obs");
    let noisy = column(&dir.path().join(files::NOISY), "y_obs");
    assert_eq!(clean, noisy);
}

#[test]
fn missing_inputs_are_named_and_wrapped_with_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::create(quick_config(0), dir.path(), 1).unwrap();
    match run.run_stage(Stage::TrainScore) {
        Err(Error::Stage { stage, source }) => {
            assert_eq!(stage, "train-score");
            assert!(matches!(*source, Error::MissingInput(ref p) if p.ends_with(files::NOISY)));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn empty_sample_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("s.csv");
    fs::write(&p, "x0,x1,label\n").unwrap();
    assert!(read_samples(&p).is_err());
}

#[test]
fn pipeline_reruns_reproduce_hashes_and_stages_resume() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run_a = Run::create(quick_config(5), a.path(), 1).unwrap();
    let cmp = run_a.pipeline(false).unwrap();
    assert!((0.0..=1.0).contains(&cmp.guided.purity));
    let manifest = RunManifest::load(&a.path().join(files::MANIFEST)).unwrap();
    assert!(manifest.verify(a.path()).unwrap().is_empty());
    assert_eq!(manifest.hashes.len(), Stage::ALL.iter().map(|s| s.outputs().len()).sum::<usize>());

    let run_b = Run::create(manifest.run_config().unwrap(), b.path(), 2).unwrap();
    run_b.pipeline(false).unwrap();
    let again = RunManifest::load(&b.path().join(files::MANIFEST)).unwrap();
    assert_eq!(again.hashes, manifest.hashes);

    // Resume: with everything intact nothing reruns; a deleted artifact
    // reruns only the stages needed to restore it.
    let before = again.timings.clone();
    run_b.pipeline(true).unwrap();
    assert_eq!(RunManifest::load(&b.path().join(files::MANIFEST)).unwrap().timings, before);
    fs::remove_file(b.path().join(files::PHASE_SVG)).unwrap();
    run_b.pipeline(true).unwrap();
    let after = RunManifest::load(&b.path().join(files::MANIFEST)).unwrap();
    assert_eq!(after.hashes, manifest.hashes);
    assert_eq!(after.timings["sample"], before["sample"]);
    assert_ne!(after.timings["plot"], before["plot"]);
}

#[test]
fn zero_gamma_makes_the_metric_blocks_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(3);
    cfg.guidance.gamma = 0.0;
    let cmp = Run::create(cfg, dir.path(), 1).unwrap().pipeline(false).unwrap();
    assert_eq!(cmp.guided, cmp.unguided);
    assert_eq!(
        fs::read(dir.path().join(files::SAMPLES_GUIDED)).unwrap(),
        fs::read(dir.path().join(files::SAMPLES_UNGUIDED)).unwrap()
    );
}

#[test]
fn plots_have_one_tick_per_step_and_k_colour_groups() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(4);
    let steps = cfg.schedule.steps;
    Run::create(cfg, dir.path(), 1).unwrap().pipeline(false).unwrap();
    let phase = fs::read_to_string(dir.path().join(files::PHASE_SVG)).unwrap();
    assert_eq!(phase.matches(r#"class="tick""#).count(), steps);
    let scatter = fs::read_to_string(dir.path().join(files::SCATTER_GUIDED_SVG)).unwrap();
    assert_eq!(scatter.matches("<g class=").count(), 2);
}
