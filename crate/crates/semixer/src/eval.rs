//! Test-set evaluation: normalized-space error metrics over sliding
//! windows, input-noise injection, the variant ablation matrix, and report
//! files.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::dataio::{normalize_with, NormStats, WindowSample, Windows};
use crate::mpmc::{load_checkpoint, predict, save_checkpoint, ModelConfig, ModelParams};
use crate::numerics::rng::{self, TAG_NOISE};
use crate::training::{train, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    /// x' = x + eps·u with u ~ U(−2x, 2x); zero inputs stay zero.
    Scale,
    /// With probability eps replace x by r·x, r ~ U(−2, 2).
    Corrupt,
}

impl NoiseMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseMode::Scale => "scale",
            NoiseMode::Corrupt => "corrupt",
        }
    }
}

impl std::str::FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scale" => Ok(NoiseMode::Scale),
            "corrupt" => Ok(NoiseMode::Corrupt),
            other => Err(Error::Config(format!(
                "unknown noise mode {other:?}; expected scale or corrupt"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NoiseSpec {
    pub eps: f64,
    pub mode: NoiseMode,
    pub seed: u64,
}

/// Perturbs a raw history. Every element consumes the same number of draws,
/// so the stream position never depends on the data.
pub fn inject_noise(history: &[f64], eps: f64, mode: NoiseMode, rng: &mut ChaCha8Rng) -> Vec<f64> {
    assert!(eps >= 0.0 && eps.is_finite(), "noise level must be non-negative");
    match mode {
        NoiseMode::Scale => history
            .iter()
            .map(|&x| {
                let r: f64 = rng.gen_range(-2.0..2.0);
                x + eps * (x * r)
            })
            .collect(),
        NoiseMode::Corrupt => history
            .iter()
            .map(|&x| {
                let u: f64 = rng.gen::<f64>();
                let r: f64 = rng.gen_range(-2.0..2.0);
                if u < eps {
                    r * x
                } else {
                    x
                }
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub mse: f64,
    pub mae: f64,
    pub windows: usize,
}

/// Runs an arbitrary normalized-space predictor over every window. Noise,
/// when present, perturbs the raw history before the predictor sees it; the
/// target is normalized with the statistics the predictor derived, so the
/// metric lives in the model's own normalized space.
pub fn metrics_with<F>(windows: &Windows, noise: Option<&NoiseSpec>, f: F) -> Result<EvalMetrics>
where
    F: Fn(&WindowSample, &[f64]) -> Result<(Vec<f64>, NormStats)> + Sync,
{
    let count = windows.count();
    let t = windows.horizon();
    let c = windows.channels();
    let per_window: Vec<Result<(f64, f64)>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let w = windows.get(i);
            let history = match noise {
                Some(spec) => {
                    let mut r =
                        rng::stream(spec.seed, &[TAG_NOISE, spec.eps.to_bits(), i as u64]);
                    inject_noise(w.history, spec.eps, spec.mode, &mut r)
                }
                None => w.history.to_vec(),
            };
            let (pred, stats) = f(&w, &history)?;
            if pred.len() != t * c {
                return Err(Error::Shape {
                    op: "predicted window",
                    lhs: vec![pred.len()],
                    rhs: vec![t, c],
                });
            }
            let target = normalize_with(w.target, &stats);
            let mut se = 0.0;
            let mut ae = 0.0;
            for (p, y) in pred.iter().zip(&target) {
                se += (p - y) * (p - y);
                ae += (p - y).abs();
            }
            let elems = (t * c) as f64;
            Ok((se / elems, ae / elems))
        })
        .collect();
    let mut mse = 0.0;
    let mut mae = 0.0;
    for r in per_window {
        let (se, ae) = r?;
        mse += se;
        mae += ae;
    }
    let cf = count as f64;
    Ok(EvalMetrics { mse: mse / cf, mae: mae / cf, windows: count })
}

/// Model evaluation over every stride-1 window of a partition.
pub fn evaluate(
    params: &ModelParams,
    windows: &Windows,
    noise: Option<&NoiseSpec>,
) -> Result<EvalMetrics> {
    let cfg = &params.config;
    if windows.n() != cfg.n || windows.horizon() != cfg.t || windows.channels() != cfg.c {
        return Err(Error::Config(format!(
            "evaluation windows are ({}, {}, {} channels) but the model expects ({}, {}, {} channels)",
            windows.n(),
            windows.horizon(),
            windows.channels(),
            cfg.n,
            cfg.t,
            cfg.c
        )));
    }
    metrics_with(windows, noise, |_, history| {
        let f = predict(params, history)?;
        Ok((f.normalized, f.stats))
    })
}

/// One scored model on one noise level: the row type for single
/// evaluations and for every cell of the ablation matrix.
#[derive(Debug, Clone, Serialize)]
pub struct ForecastReport {
    pub dataset: String,
    pub n: usize,
    pub t: usize,
    pub variant: String,
    pub noise_eps: f64,
    pub mse: f64,
    pub mae: f64,
    pub num_windows: usize,
    pub seed: u64,
}

impl ForecastReport {
    pub fn new(dataset: &str, params: &ModelParams, eps: f64, m: &EvalMetrics) -> Self {
        Self {
            dataset: dataset.to_string(),
            n: params.config.n,
            t: params.config.t,
            variant: params.config.variant.clone(),
            noise_eps: eps,
            mse: m.mse,
            mae: m.mae,
            num_windows: m.windows,
            seed: params.seed(),
        }
    }
}

pub struct AblationPlan<'a> {
    pub dataset: String,
    /// Shape settings; the variant field is overridden per cell.
    pub base: ModelConfig,
    /// Optimizer settings; the seed field is overridden per cell.
    pub train: TrainConfig,
    pub variants: Vec<String>,
    pub eps_grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub noise_mode: NoiseMode,
    pub noise_seed: u64,
    pub checkpoint_dir: PathBuf,
    pub train_windows: Windows<'a>,
    pub val_windows: Windows<'a>,
    pub test_windows: Windows<'a>,
}

pub fn checkpoint_name(dataset: &str, variant: &str, n: usize, t: usize, seed: u64) -> String {
    format!("{dataset}_{variant}_n{n}_t{t}_seed{seed}.ckpt")
}

/// Trains (or reloads) one model per variant and seed, then scores every
/// noise level on the test windows. Returns |variants|·|seeds|·|eps| rows
/// in nested loop order.
pub fn run_ablation_matrix(plan: &AblationPlan) -> Result<Vec<ForecastReport>> {
    if plan.variants.is_empty() || plan.eps_grid.is_empty() || plan.seeds.is_empty() {
        return Err(Error::Config(
            "ablation needs at least one variant, noise level, and seed".into(),
        ));
    }
    std::fs::create_dir_all(&plan.checkpoint_dir)?;
    let b = &plan.base;
    let mut entries = Vec::with_capacity(plan.variants.len() * plan.seeds.len() * plan.eps_grid.len());
    for variant in &plan.variants {
        let cfg = ModelConfig::new(
            b.n,
            b.t,
            b.c,
            b.d,
            b.n1,
            b.integrate,
            b.extra_alphas.clone(),
            b.p,
            variant,
        )?;
        for &seed in &plan.seeds {
            let path = plan
                .checkpoint_dir
                .join(checkpoint_name(&plan.dataset, variant, cfg.n, cfg.t, seed));
            let params = if path.exists() {
                let loaded = load_checkpoint(&path)?;
                if loaded.config != cfg {
                    return Err(Error::Config(format!(
                        "checkpoint {} was built with a different configuration",
                        path.display()
                    )));
                }
                loaded
            } else {
                let mut tc = plan.train.clone();
                tc.seed = seed;
                let out = train(&cfg, &tc, &plan.train_windows, &plan.val_windows)?;
                save_checkpoint(&path, &out.params)?;
                out.params
            };
            for &eps in &plan.eps_grid {
                let spec = NoiseSpec { eps, mode: plan.noise_mode, seed: plan.noise_seed };
                let m = evaluate(&params, &plan.test_windows, Some(&spec))?;
                entries.push(ForecastReport::new(&plan.dataset, &params, eps, &m));
            }
        }
    }
    Ok(entries)
}

pub fn write_reports_csv(path: &Path, entries: &[ForecastReport]) -> Result<()> {
    let mut out = String::from("dataset,n,t,variant,noise_eps,mse,mae,num_windows,seed\n");
    for e in entries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            e.dataset, e.n, e.t, e.variant, e.noise_eps, e.mse, e.mae, e.num_windows, e.seed
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Seed-aggregated view of one (variant, eps) cell.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub eps: f64,
    pub seeds: usize,
    pub mse_mean: f64,
    pub mse_std: f64,
    pub mae_mean: f64,
    pub mae_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups entries by (variant, eps) preserving first-appearance order.
pub fn summarize(entries: &[ForecastReport]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for e in entries {
        if !keys.iter().any(|(v, eps)| v == &e.variant && *eps == e.noise_eps) {
            keys.push((e.variant.clone(), e.noise_eps));
        }
    }
    keys.into_iter()
        .map(|(variant, eps)| {
            let mses: Vec<f64> = entries
                .iter()
                .filter(|e| e.variant == variant && e.noise_eps == eps)
                .map(|e| e.mse)
                .collect();
            let maes: Vec<f64> = entries
                .iter()
                .filter(|e| e.variant == variant && e.noise_eps == eps)
                .map(|e| e.mae)
                .collect();
            let (mse_mean, mse_std) = mean_std(&mses);
            let (mae_mean, mae_std) = mean_std(&maes);
            SummaryRow { variant, eps, seeds: mses.len(), mse_mean, mse_std, mae_mean, mae_std }
        })
        .collect()
}

#[derive(Serialize)]
struct SummaryDoc<'a> {
    dataset: &'a str,
    rows: &'a [SummaryRow],
}

pub fn write_summary_json(path: &Path, dataset: &str, rows: &[SummaryRow]) -> Result<()> {
    let doc = SummaryDoc { dataset, rows };
    let text = serde_json::to_string_pretty(&doc)
        .map_err(|e| Error::Data(format!("summary serialization failed: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{self, instance_normalize, synth, SplitSpec};
    use crate::numerics::rng::TAG_VERIFY;

    fn toy_config(variant: &str) -> ModelConfig {
        ModelConfig::new(64, 8, 2, 8, 8, 4, vec![2], 0.85, variant).unwrap()
    }

    #[test]
    fn perfect_oracle_scores_zero() {
        let series = synth::series(100, 2, 50);
        let w = dataio::windows(&series, 64, 8).unwrap();
        let m = metrics_with(&w, None, |sample, history| {
            let (_, stats) = instance_normalize(history, 64, 2);
            Ok((normalize_with(sample.target, &stats), stats))
        })
        .unwrap();
        assert_eq!(m.mse, 0.0);
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.windows, 100 - 64 - 8 + 1);
    }

    #[test]
    fn zero_predictor_scores_target_second_moment() {
        let series = synth::series(90, 2, 51);
        let w = dataio::windows(&series, 64, 8).unwrap();
        let m = metrics_with(&w, None, |_, history| {
            let (_, stats) = instance_normalize(history, 64, 2);
            Ok((vec![0.0; 8 * 2], stats))
        })
        .unwrap();
        // recompute the expectation directly
        let mut want = 0.0;
        for i in 0..w.count() {
            let s = w.get(i);
            let (_, stats) = instance_normalize(s.history, 64, 2);
            let target = normalize_with(s.target, &stats);
            want += target.iter().map(|y| y * y).sum::<f64>() / target.len() as f64;
        }
        want /= w.count() as f64;
        assert!((m.mse - want).abs() < 1e-12);
        assert!(m.mse > 0.0);
    }

    #[test]
    fn zero_noise_is_identity() {
        let mut r = rng::stream(1, &[TAG_VERIFY]);
        let x: Vec<f64> = (0..50).map(|_| r.gen_range(-3.0..3.0)).collect();
        let mut nr = rng::stream(2, &[TAG_NOISE]);
        let y = inject_noise(&x, 0.0, NoiseMode::Scale, &mut nr);
        assert_eq!(x, y);
        let mut nr = rng::stream(2, &[TAG_NOISE]);
        let y = inject_noise(&x, 0.0, NoiseMode::Corrupt, &mut nr);
        assert_eq!(x, y);
    }

    #[test]
    fn scale_noise_keeps_zeros_and_centers_on_input() {
        let x = vec![0.0, 1.0, -2.0];
        let trials = 20_000;
        let mut sums = [0.0; 3];
        for k in 0..trials {
            let mut r = rng::stream(7, &[TAG_NOISE, k]);
            let y = inject_noise(&x, 0.1, NoiseMode::Scale, &mut r);
            assert_eq!(y[0], 0.0);
            for (s, v) in sums.iter_mut().zip(&y) {
                *s += v;
            }
        }
        // E[x'] = x, sd of the mean = eps·|x|·sqrt(4/3)/sqrt(trials)
        for (i, &xi) in x.iter().enumerate() {
            let mean = sums[i] / trials as f64;
            let sd = 0.1 * xi.abs() * (4.0f64 / 3.0).sqrt() / (trials as f64).sqrt();
            assert!(
                (mean - xi).abs() <= 3.0 * sd + 1e-12,
                "element {i}: mean {mean} vs {xi}"
            );
        }
    }

    #[test]
    fn corrupt_noise_replaces_expected_fraction() {
        let x = vec![1.0; 10_000];
        let mut r = rng::stream(8, &[TAG_NOISE]);
        let y = inject_noise(&x, 0.3, NoiseMode::Corrupt, &mut r);
        let replaced = y.iter().filter(|&&v| v != 1.0).count() as f64;
        // binomial(10000, 0.3): sd ≈ 45.8
        assert!((replaced - 3000.0).abs() < 3.0 * 45.9, "replaced {replaced}");
        assert!(y.iter().all(|&v| (-2.0..2.0).contains(&v) || v == 1.0));
    }

    #[test]
    fn evaluate_is_deterministic_and_noise_seeded() {
        let cfg = toy_config("full");
        let params = ModelParams::init(cfg.clone(), 60);
        let series = synth::series(90, 2, 61);
        let w = dataio::windows(&series, cfg.n, cfg.t).unwrap();
        let a = evaluate(&params, &w, None).unwrap();
        let b = evaluate(&params, &w, None).unwrap();
        assert_eq!(a, b);
        let spec = NoiseSpec { eps: 0.2, mode: NoiseMode::Scale, seed: 5 };
        let n1 = evaluate(&params, &w, Some(&spec)).unwrap();
        let n2 = evaluate(&params, &w, Some(&spec)).unwrap();
        assert_eq!(n1, n2);
        assert_ne!(a.mse, n1.mse);
        // eps = 0 through the noise path equals the clean path
        let zero = NoiseSpec { eps: 0.0, mode: NoiseMode::Scale, seed: 5 };
        let z = evaluate(&params, &w, Some(&zero)).unwrap();
        assert_eq!(a, z);
    }

    #[test]
    fn evaluate_rejects_mismatched_windows() {
        let cfg = toy_config("full");
        let params = ModelParams::init(cfg, 62);
        let series = synth::series(90, 2, 63);
        let w = dataio::windows(&series, 32, 8).unwrap();
        assert!(evaluate(&params, &w, None).is_err());
    }

    #[test]
    fn ablation_matrix_covers_grid_and_reuses_checkpoints() {
        let series = synth::series(300, 2, 70);
        let (train_s, val_s, test_s) =
            dataio::split(&series, SplitSpec { train: 120, val: 80, test: 100 }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mut tc = TrainConfig::new(0);
        tc.epochs = 1;
        tc.batch_size = 16;
        let plan = AblationPlan {
            dataset: "synth".into(),
            base: toy_config("full"),
            train: tc,
            variants: vec!["full".into(), "no_ram".into()],
            eps_grid: vec![0.0, 0.1],
            seeds: vec![1, 2],
            noise_mode: NoiseMode::Scale,
            noise_seed: 99,
            checkpoint_dir: dir.path().to_path_buf(),
            train_windows: dataio::windows(&train_s, 64, 8).unwrap(),
            val_windows: dataio::windows(&val_s, 64, 8).unwrap(),
            test_windows: dataio::windows(&test_s, 64, 8).unwrap(),
        };
        let entries = run_ablation_matrix(&plan).unwrap();
        assert_eq!(entries.len(), 2 * 2 * 2);
        // rows come out variants > seeds > eps, each carrying its model's seed
        let seeds: Vec<u64> = entries.iter().map(|e| e.seed).collect();
        assert_eq!(seeds, [1, 1, 2, 2, 1, 1, 2, 2]);
        assert!(entries.iter().all(|e| e.n == 64 && e.t == 8));
        // one checkpoint per variant and seed
        let files: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(files.len(), 4);
        assert!(files.contains(&checkpoint_name("synth", "full", 64, 8, 1)));
        // clean eval must beat or differ from noisy eval deterministically
        let again = run_ablation_matrix(&plan).unwrap();
        for (a, b) in entries.iter().zip(&again) {
            assert_eq!(a.mse, b.mse);
            assert_eq!(a.mae, b.mae);
        }
        // reports round-trip
        let csv = dir.path().join("reports.csv");
        write_reports_csv(&csv, &entries).unwrap();
        let text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(text.lines().count(), 1 + entries.len());
        assert!(text.starts_with("dataset,n,t,variant,noise_eps,mse,mae,num_windows,seed"));
        let rows = summarize(&entries);
        assert_eq!(rows.len(), 4); // (variant, eps) pairs
        assert!(rows.iter().all(|r| r.seeds == 2));
        let json = dir.path().join("summary.json");
        write_summary_json(&json, "synth", &rows).unwrap();
        let parsed: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(parsed["dataset"], "synth");
        assert_eq!(parsed["rows"].as_array().unwrap().len(), 4);
    }

    #[test]
    fn summary_averages_over_seeds() {
        let mk = |seed, mse, mae| ForecastReport {
            dataset: "d".into(),
            n: 64,
            t: 8,
            variant: "full".into(),
            noise_eps: 0.0,
            mse,
            mae,
            num_windows: 10,
            seed,
        };
        let rows = summarize(&[mk(1, 0.4, 0.2), mk(2, 0.6, 0.4)]);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].mse_mean - 0.5).abs() < 1e-15);
        assert!((rows[0].mse_std - 0.1).abs() < 1e-12);
        assert!((rows[0].mae_mean - 0.3).abs() < 1e-15);
    }

    #[test]
    fn noise_mode_parses_and_rejects() {
        assert_eq!("scale".parse::<NoiseMode>().unwrap(), NoiseMode::Scale);
        assert_eq!("corrupt".parse::<NoiseMode>().unwrap(), NoiseMode::Corrupt);
        assert!("gauss".parse::<NoiseMode>().is_err());
    }
}
