//! Acceptance gate: one test per criterion, each printing a single
//! PASS/FAIL line. Criteria 1, 2, and 7 train on the public ETT datasets
//! and run for hours on a desktop CPU, so they are ignored by default;
//! point SEMIXER_DATA_DIR at the CSV files and run with --ignored to
//! execute them. Everything they need is implemented below unchanged.

use std::path::PathBuf;

use rand::Rng;
use semixer::dataio::{self, instance_normalize, denormalize};
use semixer::eval::{run_ablation_matrix, summarize, AblationPlan, NoiseMode};
use semixer::mpmc::{
    draw_sample_masks, sample_loss_and_grad, save_checkpoint, ModelConfig, ModelParams,
};
use semixer::numerics::rng::{self, TAG_VERIFY};
use semixer::numerics::{grad_check_coords, Tape, Tensor};
use semixer::ram::{ram_forward, RamMode};
use semixer::training::{train, TrainConfig};

fn report(k: u32, name: &str, pass: bool, detail: String) {
    println!(
        "ACCEPTANCE {k} {name}: {} ({detail})",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {k} failed: {detail}");
}

/// Working-scale model settings shared by the dataset-backed criteria.
fn desk_config(variant: &str) -> ModelConfig {
    ModelConfig::new(512, 96, 7, 128, 64, 64, vec![2, 4, 8], 0.85, variant).unwrap()
}

fn toy_config() -> ModelConfig {
    ModelConfig::new(64, 8, 2, 8, 8, 4, vec![2], 0.85, "full").unwrap()
}

fn data_dir() -> PathBuf {
    std::env::var_os("SEMIXER_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

fn load_dataset(name: &str) -> dataio::MultivariateSeries {
    let spec = dataio::dataset_spec(name).unwrap();
    let path = data_dir().join(spec.file);
    assert!(
        path.exists(),
        "{} not found; download the dataset and set SEMIXER_DATA_DIR",
        path.display()
    );
    dataio::load_csv(&path).unwrap()
}

/// Shared checkpoint cache so the three dataset-backed criteria reuse each
/// other's trained models.
fn ckpt_cache() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_ckpts")
}

fn desk_matrix(dataset: &str, variants: &[&str], eps: &[f64]) -> Vec<semixer::eval::ForecastReport> {
    let series = load_dataset(dataset);
    let spec = dataio::dataset_spec(dataset).unwrap();
    let (train_s, val_s, test_s) = dataio::split(&series, spec.split).unwrap();
    let plan = AblationPlan {
        dataset: dataset.to_string(),
        base: desk_config("full"),
        train: TrainConfig::new(0),
        variants: variants.iter().map(|s| s.to_string()).collect(),
        eps_grid: eps.to_vec(),
        seeds: vec![0, 1, 2],
        noise_mode: NoiseMode::Scale,
        noise_seed: 7,
        checkpoint_dir: ckpt_cache(),
        train_windows: dataio::windows(&train_s, 512, 96).unwrap(),
        val_windows: dataio::windows(&val_s, 512, 96).unwrap(),
        test_windows: dataio::windows(&test_s, 512, 96).unwrap(),
    };
    run_ablation_matrix(&plan).unwrap()
}

fn mean_mse(entries: &[semixer::eval::ForecastReport], variant: &str, eps: f64) -> f64 {
    let rows = summarize(entries);
    rows.iter()
        .find(|r| r.variant == variant && r.eps == eps)
        .unwrap_or_else(|| panic!("no summary row for {variant} at eps {eps}"))
        .mse_mean
}

#[test]
#[ignore = "trains on ETTh1 for roughly 45 minutes per seed; set SEMIXER_DATA_DIR and run with --ignored"]
fn criterion_1_headline_etth1() {
    let entries = desk_matrix("etth1", &["full"], &[0.0]);
    let mean = mean_mse(&entries, "full", 0.0);
    report(
        1,
        "headline-etth1",
        mean <= 0.40,
        format!("mean test MSE over 3 seeds = {mean:.4}, bound 0.40"),
    );
}

#[test]
#[ignore = "trains 9 models each on ETTh1 and ETTm2; set SEMIXER_DATA_DIR and run with --ignored"]
fn criterion_2_ablation_ordering() {
    let mut detail = String::new();
    let mut pass = true;
    for dataset in ["etth1", "ettm2"] {
        let entries = desk_matrix(dataset, &["full", "no_ram", "no_mpmc"], &[0.0]);
        let full = mean_mse(&entries, "full", 0.0);
        let no_ram = mean_mse(&entries, "no_ram", 0.0);
        let no_mpmc = mean_mse(&entries, "no_mpmc", 0.0);
        pass &= full <= no_ram && full <= no_mpmc;
        detail.push_str(&format!(
            "{dataset}: full {full:.4} vs no_ram {no_ram:.4}, no_mpmc {no_mpmc:.4}; "
        ));
    }
    report(2, "ablation-ordering", pass, detail);
}

#[test]
fn criterion_3_ram_expectation_equivalence() {
    let start = std::time::Instant::now();
    let (n, d, p, trials) = (16usize, 8usize, 0.85, 10_000u64);
    let mut xr = rng::stream(31, &[TAG_VERIFY, 1]);
    let x = Tensor::uniform(&[n, d], 0.0, 1.0, &mut xr);

    let mut infer_tape = Tape::new();
    let x_id = infer_tape.constant(x.clone());
    let y_inf = ram_forward(&mut infer_tape, x_id, p, &mut RamMode::Infer).unwrap();
    let closed = infer_tape.value(y_inf).data().to_vec();

    let mut acc = vec![0.0; n * d];
    for k in 0..trials {
        let mut r = rng::stream(32, &[TAG_VERIFY, k]);
        let mut tape = Tape::new();
        let x_id = tape.constant(x.clone());
        let mut mode = RamMode::Train(&mut r);
        let y = ram_forward(&mut tape, x_id, p, &mut mode).unwrap();
        for (a, v) in acc.iter_mut().zip(tape.value(y).data()) {
            *a += v;
        }
    }
    let mut max_rel: f64 = 0.0;
    for (a, c) in acc.iter().zip(&closed) {
        max_rel = max_rel.max((a / trials as f64 - c).abs() / c.abs().max(1e-12));
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        "ram-expectation",
        max_rel < 0.02 && secs < 10.0,
        format!("{trials} masked passes vs closed form: max relative error {max_rel:.4} (bound 2%), {secs:.1}s"),
    );
}

#[test]
fn criterion_4_gradient_correctness() {
    let start = std::time::Instant::now();
    let cfg = toy_config();
    let params = ModelParams::init(cfg.clone(), 41);
    let mut dr = rng::stream(42, &[TAG_VERIFY]);
    let history: Vec<f64> = (0..cfg.n * cfg.c).map(|_| dr.gen_range(-2.0..2.0)).collect();
    let target: Vec<f64> = (0..cfg.t * cfg.c).map(|_| dr.gen_range(-2.0..2.0)).collect();
    let mut mask_rng = rng::stream(43, &[TAG_VERIFY]);
    let masks = draw_sample_masks(&cfg, &mut mask_rng).unwrap();
    let (_, grad) = sample_loss_and_grad(&params, &history, &target, &masks).unwrap();

    let mut pick = rng::stream(44, &[TAG_VERIFY]);
    let total = params.param_count();
    let mut coords = Vec::new();
    while coords.len() < 20 {
        let c = pick.gen_range(0..total);
        if !coords.contains(&c) {
            coords.push(c);
        }
    }
    let flat = Tensor::new(vec![total], params.data().to_vec()).unwrap();
    let err = grad_check_coords(
        |probe: &Tensor| {
            let mut p2 = params.clone();
            p2.data_mut().copy_from_slice(probe.data());
            Ok(sample_loss_and_grad(&p2, &history, &target, &masks)?.0)
        },
        &grad,
        &flat,
        &coords,
        1e-5,
    )
    .unwrap();
    let secs = start.elapsed().as_secs_f64();
    report(
        4,
        "gradient-correctness",
        err < 1e-4 && secs < 60.0,
        format!("20 random parameters: max relative error {err:.2e} (bound 1e-4), {secs:.1}s"),
    );
}

#[test]
fn criterion_5_patch_arithmetic() {
    let specs = semixer::encoder::build_scale_specs(512, 64, &[2, 4, 8]).unwrap();
    let counts: Vec<usize> = specs.iter().map(|s| s.num_patches).collect();
    let total = semixer::encoder::total_patches(&specs);
    report(
        5,
        "patch-arithmetic",
        counts == [64, 32, 16, 8] && total == 120,
        format!("per-scale counts {counts:?}, total {total}"),
    );
}

#[test]
fn criterion_6_normalization_round_trip() {
    let mut r = rng::stream(61, &[TAG_VERIFY]);
    let mut max_err: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.gen_range(2..128);
        let c = r.gen_range(1..8);
        let h: Vec<f64> = (0..n * c).map(|_| r.gen_range(-1000.0..1000.0)).collect();
        let (normed, stats) = instance_normalize(&h, n, c);
        let back = denormalize(&normed, &stats);
        for (a, b) in h.iter().zip(&back) {
            max_err = max_err.max((a - b).abs());
        }
    }
    report(
        6,
        "normalization-round-trip",
        max_err < 1e-9,
        format!("1000 windows: max reconstruction error {max_err:.2e} (bound 1e-9)"),
    );
}

#[test]
#[ignore = "trains 12 models on ETTh1; set SEMIXER_DATA_DIR and run with --ignored"]
fn criterion_7_noise_monotonicity() {
    let eps = [0.0, 0.1, 0.3];
    let entries = desk_matrix("etth1", &["full", "no_ram", "no_mpmc", "sam"], &eps);
    let mut pass = true;
    let mut detail = String::new();
    for variant in ["full", "no_ram", "no_mpmc", "sam"] {
        let curve: Vec<f64> = eps.iter().map(|&e| mean_mse(&entries, variant, e)).collect();
        let monotone = curve.windows(2).all(|w| w[1] >= w[0]);
        pass &= monotone;
        detail.push_str(&format!("{variant} {curve:?}; "));
    }
    let degrade = |v: &str| {
        let clean = mean_mse(&entries, v, 0.0);
        (mean_mse(&entries, v, 0.3) - clean) / clean
    };
    let full_deg = degrade("full");
    let no_mpmc_deg = degrade("no_mpmc");
    pass &= full_deg <= no_mpmc_deg;
    detail.push_str(&format!(
        "degradation at eps 0.3: full {:.1}% vs no_mpmc {:.1}%",
        100.0 * full_deg,
        100.0 * no_mpmc_deg
    ));
    report(7, "noise-monotonicity", pass, detail);
}

#[test]
fn criterion_8_training_determinism() {
    let cfg = toy_config();
    let series = dataio::synth::series(300, 2, 81);
    let (train_s, val_s, _) = dataio::split(
        &series,
        dataio::SplitSpec { train: 160, val: 80, test: 60 },
    )
    .unwrap();
    let tw = dataio::windows(&train_s, cfg.n, cfg.t).unwrap();
    let vw = dataio::windows(&val_s, cfg.n, cfg.t).unwrap();
    let mut tc = TrainConfig::new(5);
    tc.epochs = 3;
    tc.batch_size = 16;

    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for run in 0..2 {
        let out = train(&cfg, &tc, &tw, &vw).unwrap();
        let path = dir.path().join(format!("run{run}.ckpt"));
        save_checkpoint(&path, &out.params).unwrap();
        files.push(std::fs::read(&path).unwrap());
    }
    let identical = files[0] == files[1];
    report(
        8,
        "training-determinism",
        identical,
        format!(
            "two seeded runs, {} byte checkpoints: {}",
            files[0].len(),
            if identical { "byte-identical" } else { "diverged" }
        ),
    );
}
