//! Command-line front end: training, evaluation, the ablation matrix, the
//! self-check battery, and dataset inspection. A config file can supply
//! key=value defaults; explicit flags always win.

use std::ffi::OsString;
use std::path::PathBuf;
use std::str::FromStr;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use rand::Rng;

use crate::dataio::{self, MultivariateSeries, SplitSpec};
use crate::encoder::{build_scale_specs, total_patches};
use crate::eval::{
    self, checkpoint_name, evaluate, run_ablation_matrix, AblationPlan, ForecastReport, NoiseMode,
    NoiseSpec,
};
use crate::mpmc::{
    draw_sample_masks, load_checkpoint, sample_loss_and_grad, save_checkpoint, ModelConfig,
    ModelParams,
};
use crate::numerics::rng::{self, TAG_VERIFY};
use crate::numerics::{grad_check_coords, Tensor};
use crate::ram::sample_mask;
use crate::training::{self, TrainConfig};
use crate::{Error, Result};

#[derive(Parser)]
#[command(name = "semixer", version, about = "Multiscale patch-mixing forecaster")]
struct Cli {
    /// File of key=value lines applied where no flag was given
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and save the best-validation checkpoint
    Train(TrainArgs),
    /// Score a checkpoint on the test partition
    Eval(EvalArgs),
    /// Train and score every requested variant, seed, and noise level
    Ablate(AblateArgs),
    /// Run the built-in numerical self-checks
    Verify,
    /// Describe registered datasets or probe one file
    DataInfo(DataInfoArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Registered dataset name (see data-info)
    #[arg(long)]
    dataset: Option<String>,
    /// Arbitrary CSV whose first column is the date
    #[arg(long)]
    csv: Option<PathBuf>,
    /// train,val,test row counts for --csv; defaults to a 70/10/20 split
    #[arg(long)]
    split: Option<String>,
    /// Directory holding dataset files; SEMIXER_DATA_DIR, then ./data
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    /// History length
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Forecast horizon
    #[arg(long, default_value_t = 96)]
    t: usize,
    /// Embedding width
    #[arg(long, default_value_t = 128)]
    d: usize,
    /// Patch count at the finest scale
    #[arg(long, default_value_t = 64)]
    n1: usize,
    /// Integration layer width
    #[arg(long, default_value_t = 64)]
    integrate: usize,
    /// Extra scale factors, comma separated; empty for a single scale
    #[arg(long, default_value = "2,4,8")]
    alphas: String,
    /// Mask disconnect probability
    #[arg(long, default_value_t = 0.85)]
    p: f64,
}

#[derive(Args)]
struct OptArgs {
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Consecutive non-improving epochs tolerated before stopping
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gradient clip threshold (global L2 norm)
    #[arg(long, default_value_t = 5.0)]
    clip: f64,
    /// Disable gradient clipping
    #[arg(long)]
    no_clip: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    opt: OptArgs,
    /// Architecture variant (see ablate defaults for the list)
    #[arg(long, default_value = "full")]
    variant: String,
    /// Output directory for checkpoints/ and history/
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Noise level applied to test histories
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
    #[arg(long, default_value = "scale")]
    noise_mode: String,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    /// Directory the JSON report is written under (in reports/)
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    opt: OptArgs,
    /// Variants to train, comma separated
    #[arg(long, default_value = "full,no_ram,no_mpmc,sam")]
    variants: String,
    /// Noise levels to score, comma separated
    #[arg(long, default_value = "0.0,0.05,0.1")]
    eps: String,
    /// Training seeds, comma separated
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    #[arg(long, default_value = "scale")]
    noise_mode: String,
    #[arg(long, default_value_t = 0)]
    noise_seed: u64,
    /// Output directory for checkpoints/ and reports/
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct DataInfoArgs {
    #[command(flatten)]
    data: DataArgs,
    /// History length used for window counts
    #[arg(long, default_value_t = 512)]
    n: usize,
    /// Horizon used for window counts
    #[arg(long, default_value_t = 96)]
    t: usize,
}

/// Entry point used by the binary; the process exit code.
pub fn run() -> i32 {
    run_argv(std::env::args_os().collect())
}

pub fn run_argv(argv: Vec<OsString>) -> i32 {
    let argv = match apply_config_file(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.exit_code();
        }
    };
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return 0;
        }
        Err(e) => {
            eprint!("{e}");
            return 1;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Verify => verify(),
        Command::DataInfo(a) => cmd_data_info(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Reads --config from the raw arguments and appends one long flag per
/// key=value line whose flag is not already present.
fn apply_config_file(mut argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path: Option<PathBuf> = None;
    for (i, a) in argv.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = argv.get(i + 1).map(PathBuf::from);
        } else if let Some(rest) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(rest.to_string()));
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected key=value, got {line:?}",
                path.display(),
                idx + 1
            )));
        };
        let key = k.trim().replace('_', "-");
        let value = v.trim();
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config(format!(
                "{}:{}: empty key or value",
                path.display(),
                idx + 1
            )));
        }
        let flag = format!("--{key}");
        let with_eq = format!("{flag}=");
        let present = argv.iter().any(|a| {
            let s = a.to_string_lossy();
            s == flag || s.starts_with(&with_eq)
        });
        if present {
            continue;
        }
        match value {
            "true" => argv.push(flag.into()),
            "false" => {}
            _ => {
                argv.push(flag.into());
                argv.push(value.into());
            }
        }
    }
    Ok(argv)
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let trimmed = s.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed
        .split(',')
        .map(|item| {
            item.trim()
                .parse::<T>()
                .map_err(|e| Error::Config(format!("bad {what} entry {item:?}: {e}")))
        })
        .collect()
}

fn parse_split(s: &str) -> Result<SplitSpec> {
    let parts: Vec<usize> = parse_list(s, "split")?;
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "--split expects train,val,test row counts, got {s:?}"
        )));
    }
    Ok(SplitSpec { train: parts[0], val: parts[1], test: parts[2] })
}

fn data_dir(args: &DataArgs) -> PathBuf {
    args.data_dir
        .clone()
        .or_else(|| std::env::var_os("SEMIXER_DATA_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Loads the series named by --dataset or --csv. Returns a short name for
/// output files, the series, and its row split.
fn resolve_series(args: &DataArgs) -> Result<(String, MultivariateSeries, SplitSpec)> {
    match (&args.dataset, &args.csv) {
        (Some(_), Some(_)) => Err(Error::Config(
            "--dataset and --csv are mutually exclusive".into(),
        )),
        (None, None) => Err(Error::Config(
            "one of --dataset or --csv is required".into(),
        )),
        (Some(name), None) => {
            let spec = dataio::dataset_spec(name)?;
            let path = data_dir(args).join(spec.file);
            if !path.exists() {
                return Err(Error::Data(format!(
                    "{} not found; place {} under the data directory (--data-dir or SEMIXER_DATA_DIR)",
                    path.display(),
                    spec.file
                )));
            }
            let series = dataio::load_csv(&path)?;
            if series.channels() != spec.channels {
                return Err(Error::Data(format!(
                    "{} has {} channels, registry expects {}",
                    path.display(),
                    series.channels(),
                    spec.channels
                )));
            }
            Ok((spec.name.to_string(), series, spec.split))
        }
        (None, Some(csv)) => {
            let series = dataio::load_csv(csv)?;
            let split = match &args.split {
                Some(s) => parse_split(s)?,
                None => {
                    let len = series.len();
                    let train = len * 7 / 10;
                    let val = len / 10;
                    SplitSpec { train, val, test: len - train - val }
                }
            };
            let stem = csv
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "series".into());
            Ok((stem, series, split))
        }
    }
}

fn build_model_config(m: &ModelArgs, channels: usize, variant: &str) -> Result<ModelConfig> {
    let alphas: Vec<usize> = parse_list(&m.alphas, "alphas")?;
    ModelConfig::new(m.n, m.t, channels, m.d, m.n1, m.integrate, alphas, m.p, variant)
}

fn build_train_config(o: &OptArgs) -> TrainConfig {
    TrainConfig {
        epochs: o.epochs,
        batch_size: o.batch_size,
        lr: o.lr,
        patience: o.patience,
        seed: o.seed,
        clip: if o.no_clip { None } else { Some(o.clip) },
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (stem, series, split) = resolve_series(&a.data)?;
    let (train_s, val_s, _) = dataio::split(&series, split)?;
    let cfg = build_model_config(&a.model, series.channels(), &a.variant)?;
    let tw = dataio::windows(&train_s, cfg.n, cfg.t)?;
    let vw = dataio::windows(&val_s, cfg.n, cfg.t)?;
    let tc = build_train_config(&a.opt);
    println!(
        "training {} on {stem}: {} train windows, {} val windows, {} parameters",
        cfg.variant,
        tw.count(),
        vw.count(),
        ModelParams::init(cfg.clone(), tc.seed).param_count()
    );
    let out = training::train(&cfg, &tc, &tw, &vw)?;
    let ckpt_dir = a.out.join("checkpoints");
    let hist_dir = a.out.join("history");
    std::fs::create_dir_all(&ckpt_dir)?;
    std::fs::create_dir_all(&hist_dir)?;
    let file = checkpoint_name(&stem, &cfg.variant, cfg.n, cfg.t, tc.seed);
    let ckpt_path = ckpt_dir.join(&file);
    save_checkpoint(&ckpt_path, &out.params)?;
    training::save_history_csv(&hist_dir.join(file.replace(".ckpt", ".csv")), &out.history)?;
    println!(
        "finished after {} epochs (best epoch {})",
        out.history.epochs.len(),
        out.history.best_epoch
    );
    println!("checkpoint: {}", ckpt_path.display());
    println!("final val mse: {}", out.history.best_val);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let params = load_checkpoint(&a.checkpoint)?;
    let (stem, series, split) = resolve_series(&a.data)?;
    let (_, _, test_s) = dataio::split(&series, split)?;
    let w = dataio::windows(&test_s, params.config.n, params.config.t)?;
    let mode: NoiseMode = a.noise_mode.parse()?;
    let spec = NoiseSpec { eps: a.eps, mode, seed: a.noise_seed };
    let noise = (a.eps != 0.0).then_some(&spec);
    let m = evaluate(&params, &w, noise)?;
    println!(
        "variant={} dataset={stem} windows={} eps={} mode={}",
        params.config.variant,
        m.windows,
        a.eps,
        mode.as_str()
    );
    println!("mse={} mae={}", m.mse, m.mae);
    let dir = a.out.join("reports");
    std::fs::create_dir_all(&dir)?;
    let ckpt_stem = a
        .checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    let path = dir.join(format!("{ckpt_stem}_eps{}.json", a.eps));
    let report = ForecastReport::new(&stem, &params, a.eps, &m);
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Data(format!("report serialization failed: {e}")))?;
    std::fs::write(&path, text)?;
    println!("report: {}", path.display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let (stem, series, split) = resolve_series(&a.data)?;
    let (train_s, val_s, test_s) = dataio::split(&series, split)?;
    let base = build_model_config(&a.model, series.channels(), "full")?;
    let plan = AblationPlan {
        dataset: stem.clone(),
        base,
        train: build_train_config(&a.opt),
        variants: parse_list(&a.variants, "variants")?,
        eps_grid: parse_list(&a.eps, "eps")?,
        seeds: parse_list(&a.seeds, "seeds")?,
        noise_mode: a.noise_mode.parse()?,
        noise_seed: a.noise_seed,
        checkpoint_dir: a.out.join("checkpoints"),
        train_windows: dataio::windows(&train_s, a.model.n, a.model.t)?,
        val_windows: dataio::windows(&val_s, a.model.n, a.model.t)?,
        test_windows: dataio::windows(&test_s, a.model.n, a.model.t)?,
    };
    let entries = run_ablation_matrix(&plan)?;
    let dir = a.out.join("reports");
    std::fs::create_dir_all(&dir)?;
    let csv = dir.join(format!("{stem}_ablation.csv"));
    eval::write_reports_csv(&csv, &entries)?;
    let rows = eval::summarize(&entries);
    let json = dir.join(format!("{stem}_summary.json"));
    eval::write_summary_json(&json, &stem, &rows)?;
    println!("{} matrix cells written to {}", entries.len(), csv.display());
    for r in &rows {
        println!(
            "{} eps={}: mse {:.6} ± {:.6} over {} seeds",
            r.variant, r.eps, r.mse_mean, r.mse_std, r.seeds
        );
    }
    println!("summary: {}", json.display());
    Ok(())
}

fn cmd_data_info(a: DataInfoArgs) -> Result<()> {
    if a.data.dataset.is_none() && a.data.csv.is_none() {
        println!("registered datasets (rows are train/val/test):");
        for spec in dataio::DATASETS {
            println!(
                "  {:8} {:12} {:2} channels, split {}",
                spec.name, spec.file, spec.channels, spec.split
            );
        }
        println!("data directory: {}", data_dir(&a.data).display());
        return Ok(());
    }
    let (stem, series, split) = resolve_series(&a.data)?;
    println!("{stem}: {} rows, {} channels", series.len(), series.channels());
    println!("channels: {}", series.channel_names().join(", "));
    println!("split: {split}");
    let (train_s, val_s, test_s) = dataio::split(&series, split)?;
    for (name, part) in [("train", &train_s), ("val", &val_s), ("test", &test_s)] {
        match dataio::windows(part, a.n, a.t) {
            Ok(w) => println!("  {name}: {} windows of ({}, {})", w.count(), a.n, a.t),
            Err(e) => println!("  {name}: no windows ({e})"),
        }
    }
    Ok(())
}

fn report(failures: &mut Vec<String>, ok: bool, name: &str, detail: String) {
    println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    if !ok {
        failures.push(name.to_string());
    }
}

/// Numerical self-checks; any failure exits with the verification code.
pub fn verify() -> Result<()> {
    let mut failures = Vec::new();

    // patch geometry at the working-scale settings
    let specs = build_scale_specs(512, 64, &[2, 4, 8])?;
    let geom: Vec<(usize, usize, usize)> =
        specs.iter().map(|s| (s.patch_len, s.stride, s.num_patches)).collect();
    let total = total_patches(&specs);
    report(
        &mut failures,
        geom == [(16, 8, 64), (32, 16, 32), (64, 32, 16), (128, 64, 8)] && total == 120,
        "patch-geometry",
        format!("scales (L, K, N) = {geom:?}, total={total}"),
    );

    // Monte-Carlo mask ensemble against the closed-form inference path
    let (np, d, p, trials) = (16, 8, 0.85, 10_000u64);
    let mut xr = rng::stream(1, &[TAG_VERIFY, 1]);
    let x = Tensor::uniform(&[np, d], 0.0, 1.0, &mut xr);
    let mut acc = vec![0.0; np * d];
    let mut mr = rng::stream(1, &[TAG_VERIFY, 2]);
    for _ in 0..trials {
        let mask = sample_mask(np, p, &mut mr)?;
        let e = mask.entries();
        for i in 0..np {
            for l in 0..np {
                if e[i * np + l] != 0.0 {
                    for j in 0..d {
                        acc[i * d + j] += x.data()[l * d + j];
                    }
                }
            }
        }
    }
    let mut closed = vec![0.0; d];
    for (j, slot) in closed.iter_mut().enumerate() {
        *slot = (1.0 - p) * (0..np).map(|l| x.data()[l * d + j]).sum::<f64>();
    }
    let mut max_rel: f64 = 0.0;
    for i in 0..np {
        for j in 0..d {
            let mc = acc[i * d + j] / trials as f64;
            max_rel = max_rel.max((mc - closed[j]).abs() / closed[j].max(1e-12));
        }
    }
    report(
        &mut failures,
        max_rel < 0.02,
        "mask-ensemble",
        format!(
            "{trials} masks on a {np}x{d} input: max relative error {max_rel:.4}, bound 2%"
        ),
    );

    // analytic loss gradient against central differences
    let cfg = ModelConfig::new(64, 8, 2, 8, 8, 4, vec![2], 0.85, "full")?;
    let params = ModelParams::init(cfg.clone(), 2);
    let mut dr = rng::stream(3, &[TAG_VERIFY, 3]);
    let history: Vec<f64> = (0..cfg.n * cfg.c).map(|_| dr.gen_range(-2.0..2.0)).collect();
    let target: Vec<f64> = (0..cfg.t * cfg.c).map(|_| dr.gen_range(-2.0..2.0)).collect();
    let mut mask_rng = rng::stream(3, &[TAG_VERIFY, 4]);
    let masks = draw_sample_masks(&cfg, &mut mask_rng)?;
    let (_, grad) = sample_loss_and_grad(&params, &history, &target, &masks)?;
    let coords: Vec<usize> = (0..8).map(|i| i * params.param_count() / 8).collect();
    let flat = Tensor::new(vec![params.param_count()], params.data().to_vec())?;
    let fd_err = grad_check_coords(
        |probe: &Tensor| {
            let mut p2 = params.clone();
            p2.data_mut().copy_from_slice(probe.data());
            Ok(sample_loss_and_grad(&p2, &history, &target, &masks)?.0)
        },
        &grad,
        &flat,
        &coords,
        1e-5,
    )?;
    report(
        &mut failures,
        fd_err < 1e-4,
        "loss-gradient",
        format!("max finite-difference error {fd_err:.2e} over {} parameters, bound 1e-4", coords.len()),
    );

    // normalization round trip
    let mut nr = rng::stream(4, &[TAG_VERIFY, 5]);
    let mut max_rt: f64 = 0.0;
    for _ in 0..200 {
        let h: Vec<f64> = (0..32 * 3).map(|_| nr.gen_range(-100.0..100.0)).collect();
        let (normed, stats) = dataio::instance_normalize(&h, 32, 3);
        let back = dataio::denormalize(&normed, &stats);
        for (a, b) in h.iter().zip(&back) {
            max_rt = max_rt.max((a - b).abs());
        }
    }
    report(
        &mut failures,
        max_rt < 1e-9,
        "normalization-round-trip",
        format!("200 windows: max reconstruction error {max_rt:.2e}, bound 1e-9"),
    );

    if failures.is_empty() {
        println!("all checks passed");
        Ok(())
    } else {
        Err(Error::Verification(format!(
            "{} of 4 checks failed: {}",
            failures.len(),
            failures.join(", ")
        )))
    }
}
