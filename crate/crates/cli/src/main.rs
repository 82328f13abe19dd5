use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use lfparafac::covariance::{assemble, CovarianceConfig, CovarianceField};
use lfparafac::data::{load_csv, write_csv_with_sidecar};
use lfparafac::inference::{predict_all, write_scores_csv, write_trajectories_csv};
use lfparafac::model::{fit_with_covariance, FitConfig, LfParafacModel};
use lfparafac::selection::{select_rank_aic, select_rank_lcv, write_report_csv, AicPenalty};
use lfparafac::simulation::{benchmark_grid, generate, run_benchmark, write_benchmark_csv, BenchmarkConfig, SimConfig};
use lfparafac::Error;

#[derive(Parser)]
#[command(name = "lfparafac", version, about = "Latent functional PARAFAC for sparse functional tensors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the covariance field and fit a model.
    Fit(Flags),
    /// Write a synthetic dataset and its ground truth.
    Simulate(Flags),
    /// Predict scores and trajectories with a saved model.
    Predict(Flags),
    /// Compare candidate ranks by cross-validated likelihood and AIC.
    SelectRank(Flags),
    /// Score the functional model against the CP baseline on synthetic data.
    Benchmark(Flags),
}

/// Every option may also be given in the `--config` JSON file; flags win.
#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct Flags {
    /// JSON file with any of these options.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Saved model JSON (predict).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    rank: Option<usize>,
    /// Candidate ranks, comma separated.
    #[arg(long, value_delimiter = ',')]
    ranks: Option<Vec<usize>>,
    #[arg(long)]
    grid_size: Option<usize>,
    #[arg(long)]
    bandwidth_mean: Option<f64>,
    #[arg(long)]
    bandwidth_cov: Option<f64>,
    /// Truncate negative eigenvalues of the covariance field (default true).
    #[arg(long)]
    psd_projection: Option<bool>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
    /// Simulation preset: d2-r3, d3-r3 or misspecified.
    #[arg(long)]
    preset: Option<String>,
    /// Covariance cache file, read if present and written otherwise.
    #[arg(long)]
    cache_cov: Option<PathBuf>,
    /// Selection criteria, comma separated: lcv, aic.
    #[arg(long, value_delimiter = ',')]
    criteria: Option<Vec<String>>,
    /// AIC penalty: rank or parameter-count.
    #[arg(long, value_parser = parse_penalty)]
    aic_penalty: Option<AicPenalty>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long)]
    snr: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    sparsities: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    snrs: Option<Vec<f64>>,
    #[arg(long)]
    repeats: Option<usize>,
}

fn parse_penalty(s: &str) -> Result<AicPenalty, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| format!("expected rank or parameter-count, got {s:?}"))
}

macro_rules! overlay {
    ($dst:ident, $src:ident; $($f:ident),*) => {
        $( if $src.$f.is_some() { $dst.$f = $src.$f.clone(); } )*
    };
}

impl Flags {
    /// Flags over config file values.
    fn resolve(self) -> Result<Self, Error> {
        let mut out = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)?;
                serde_json::from_str::<Flags>(&text)
                    .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))?
            }
            None => Flags::default(),
        };
        let f = self;
        overlay!(out, f; input, output_dir, model, rank, ranks, grid_size, bandwidth_mean, bandwidth_cov, psd_projection,
            epsilon, max_iter, restarts, folds, seed, workers, preset, cache_cov, criteria, aic_penalty,
            n, sparsity, snr, sigma2, sparsities, snrs, repeats);
        out.config = f.config;
        Ok(out)
    }

    fn input(&self) -> Result<&Path, Error> {
        let path = self
            .input
            .as_deref()
            .ok_or_else(|| Error::Invalid("--input is required".into()))?;
        if !path.is_file() {
            return Err(Error::Invalid(format!("{}: no such file", path.display())));
        }
        Ok(path)
    }

    fn output_dir(&self) -> Result<PathBuf, Error> {
        let dir = self.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    fn covariance(&self) -> CovarianceConfig {
        let d = CovarianceConfig::default();
        CovarianceConfig {
            grid_size: self.grid_size.unwrap_or(d.grid_size),
            bandwidth_mean: self.bandwidth_mean,
            bandwidth_cov: self.bandwidth_cov,
            min_raw_pairs: d.min_raw_pairs,
            psd_projection: self.psd_projection.unwrap_or(d.psd_projection),
        }
    }

    fn fit(&self) -> FitConfig {
        let d = FitConfig::default();
        FitConfig {
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            max_iter: self.max_iter.unwrap_or(d.max_iter),
            seed: self.seed.unwrap_or(d.seed),
            restarts: self.restarts.unwrap_or(d.restarts),
            ..d
        }
    }

    fn simulation(&self) -> Result<SimConfig, Error> {
        let mut cfg = SimConfig::preset(self.preset.as_deref().unwrap_or("d2-r3"))?;
        if let Some(n) = self.n {
            cfg.n = n;
        }
        if let Some(r) = self.rank {
            cfg.rank = r;
        }
        if let Some(s) = self.sparsity {
            cfg.sparsity = s;
        }
        if let Some(s) = self.snr {
            cfg.snr = Some(s);
        }
        if let Some(s) = self.sigma2 {
            cfg.sigma2 = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), Error> {
        let bad = |m: &str| Err(Error::Invalid(m.into()));
        if self.rank == Some(0) || self.ranks.as_ref().is_some_and(|r| r.is_empty() || r.contains(&0)) {
            return bad("ranks must be positive");
        }
        if self.grid_size.is_some_and(|g| g < 2) {
            return bad("--grid-size must be at least 2");
        }
        if self.epsilon.is_some_and(|e| !(e >= 0.0)) {
            return bad("--epsilon must be non-negative");
        }
        if self.workers == Some(0) {
            return bad("--workers must be positive");
        }
        if self.folds.is_some_and(|k| k < 2) {
            return bad("--folds must be at least 2");
        }
        for b in [self.bandwidth_mean, self.bandwidth_cov].into_iter().flatten() {
            if !(b > 0.0 && b.is_finite()) {
                return bad("bandwidths must be positive");
            }
        }
        Ok(())
    }
}

/// The fully resolved settings, written next to every output.
#[derive(Serialize)]
struct Effective<'a, T: Serialize> {
    command: &'a str,
    options: &'a Flags,
    #[serde(flatten)]
    resolved: T,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Error> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn load_or_assemble(flags: &Flags, d: &lfparafac::Dataset) -> Result<CovarianceField, Error> {
    let cfg = flags.covariance();
    if let Some(path) = &flags.cache_cov {
        if path.exists() {
            let cov = CovarianceField::read(path)?;
            if cov.shape() != d.shape() || cov.grid_size() != cfg.grid_size {
                return Err(Error::Invalid(format!(
                    "{}: cached field does not match the dataset shape or grid size",
                    path.display()
                )));
            }
            log::info!("loaded covariance from {}", path.display());
            return Ok(cov);
        }
        let cov = assemble(d, &cfg)?;
        cov.write(path)?;
        return Ok(cov);
    }
    assemble(d, &cfg)
}

fn cmd_fit(flags: &Flags) -> Result<(), Error> {
    let d = load_csv(flags.input()?)?;
    let rank = flags
        .rank
        .ok_or_else(|| Error::Invalid("--rank is required".into()))?;
    let out = flags.output_dir()?;
    let cov = load_or_assemble(flags, &d)?;
    let fit_cfg = flags.fit();
    let (mut model, report) = fit_with_covariance(&d, &cov, rank, &fit_cfg)?;
    let effective = serde_json::to_value(Effective {
        command: "fit",
        options: flags,
        resolved: serde_json::json!({ "covariance": flags.covariance(), "fit": fit_cfg }),
    })?;
    model.config = effective.clone();
    fs::write(out.join("model.json"), model.to_json()?)?;
    write_json(
        &out.join("report.json"),
        &serde_json::json!({ "config": effective, "report": report }),
    )?;
    let preds = predict_all(&model, &d)?;
    write_scores_csv(&preds, &out.join("scores.csv"))?;
    write_trajectories_csv(&model, &preds, &out.join("trajectories.csv"))?;
    log::info!(
        "fit rank {rank}: {} sweeps, converged {}, objective {:?}",
        report.iterations,
        report.converged,
        report.trace.last()
    );
    Ok(())
}

fn cmd_predict(flags: &Flags) -> Result<(), Error> {
    let path = flags
        .model
        .as_deref()
        .ok_or_else(|| Error::Invalid("--model is required".into()))?;
    let model = LfParafacModel::from_json(&fs::read_to_string(path)?)?;
    let d = load_csv(flags.input()?)?;
    if d.shape() != model.shape.as_slice() {
        return Err(Error::Invalid(format!(
            "dataset shape {:?} does not match model shape {:?}",
            d.shape(),
            model.shape
        )));
    }
    let out = flags.output_dir()?;
    let preds = predict_all(&model, &d)?;
    write_scores_csv(&preds, &out.join("scores.csv"))?;
    write_trajectories_csv(&model, &preds, &out.join("trajectories.csv"))?;
    write_json(
        &out.join("predictions.json"),
        &serde_json::json!({
            "config": Effective { command: "predict", options: flags, resolved: () },
            "predictions": preds,
        }),
    )
}

fn cmd_simulate(flags: &Flags) -> Result<(), Error> {
    let cfg = flags.simulation()?;
    let out = flags.output_dir()?;
    let (d, truth) = generate(&cfg)?;
    write_csv_with_sidecar(&d, &out.join("data.csv"))?;
    write_json(&out.join("truth.json"), &truth)?;
    write_json(
        &out.join("config.json"),
        &Effective {
            command: "simulate",
            options: flags,
            resolved: serde_json::json!({ "simulation": cfg }),
        },
    )
}

fn cmd_select_rank(flags: &Flags) -> Result<(), Error> {
    let d = load_csv(flags.input()?)?;
    let out = flags.output_dir()?;
    let ranks = flags.ranks.clone().unwrap_or_else(|| (1..=5).collect());
    let criteria = flags
        .criteria
        .clone()
        .unwrap_or_else(|| vec!["lcv".into(), "aic".into()]);
    let folds = flags.folds.unwrap_or(5);
    let seed = flags.seed.unwrap_or(0);
    let penalty = flags.aic_penalty.unwrap_or_default();
    let (cov_cfg, fit_cfg) = (flags.covariance(), flags.fit());
    let mut selections = Vec::new();
    for c in &criteria {
        selections.push(match c.as_str() {
            "lcv" => select_rank_lcv(&d, &ranks, folds, seed, &cov_cfg, &fit_cfg)?,
            "aic" => select_rank_aic(&d, &ranks, penalty, &cov_cfg, &fit_cfg)?,
            other => return Err(Error::Invalid(format!("unknown criterion {other:?}"))),
        });
    }
    write_report_csv(&selections, &out.join("rank_selection.csv"))?;
    write_json(
        &out.join("rank_selection.json"),
        &serde_json::json!({
            "config": Effective {
                command: "select-rank",
                options: flags,
                resolved: serde_json::json!({
                    "ranks": ranks, "folds": folds, "seed": seed, "aic_penalty": penalty,
                    "covariance": cov_cfg, "fit": fit_cfg,
                }),
            },
            "selections": selections,
        }),
    )
}

fn cmd_benchmark(flags: &Flags) -> Result<(), Error> {
    let base = flags.simulation()?;
    let out = flags.output_dir()?;
    let sparsities = flags
        .sparsities
        .clone()
        .unwrap_or_else(|| vec![0.0, 0.2, 0.5, 0.8]);
    let snrs: Vec<Option<f64>> = flags
        .snrs
        .clone()
        .map(|v| v.into_iter().map(Some).collect())
        .unwrap_or_else(|| vec![Some(0.5), Some(1.0), Some(2.0)]);
    let cfg = BenchmarkConfig {
        cells: benchmark_grid(&base, &sparsities, &snrs),
        repeats: flags.repeats.unwrap_or(1),
        seed: flags.seed.unwrap_or(0),
        covariance: flags.covariance(),
        fit: flags.fit(),
        ..BenchmarkConfig::default()
    };
    let rows = run_benchmark(&cfg)?;
    write_benchmark_csv(&rows, &out.join("benchmark.csv"))?;
    write_json(
        &out.join("config.json"),
        &Effective {
            command: "benchmark",
            options: flags,
            resolved: serde_json::json!({ "benchmark": cfg }),
        },
    )
}

fn run(cli: Cli) -> Result<(), Error> {
    let (name, flags) = match cli.command {
        Command::Fit(f) => ("fit", f),
        Command::Simulate(f) => ("simulate", f),
        Command::Predict(f) => ("predict", f),
        Command::SelectRank(f) => ("select-rank", f),
        Command::Benchmark(f) => ("benchmark", f),
    };
    let flags = flags.resolve()?;
    flags.validate()?;
    if let Some(w) = flags.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| Error::Invalid(e.to_string()))?;
    }
    match name {
        "fit" => cmd_fit(&flags),
        "simulate" => cmd_simulate(&flags),
        "predict" => cmd_predict(&flags),
        "select-rank" => cmd_select_rank(&flags),
        _ => cmd_benchmark(&flags),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
