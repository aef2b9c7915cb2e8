//! `tetris`: simulate, fit, estimate, recover, evaluate, pipeline.

mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use tetris_core::io;
use tetris_core::metrics::evaluate_run;
use tetris_core::model::{center_dataset, IndicatorMatrix};
use tetris_core::pipeline::{estimate_manifest, run_pipeline_to_dir, PipelineConfig};
use tetris_core::postprocess::{credible_ball_from_samples, point_estimate, recover_loadings};
use tetris_core::sampler::run_chain;
use tetris_core::sim::generate;
use tetris_core::TOOL_VERSION;

use settings::Settings;

/// Bad flags, config or inputs; exits with status 2.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

#[derive(Parser)]
#[command(
    name = "tetris",
    version,
    about = "Bayesian multi-study factor analysis with arbitrary factor sharing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario into <out>/data and <out>/truth
    Simulate(Common),
    /// Run the sampler on a directory of study_<s>.csv files
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Point estimate and credible ball from a fit trace
    Estimate {
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Loadings from a fixed-indicator fit trace
    Recover {
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare recovered loadings with a simulation truth bundle
    Evaluate {
        /// Directory written by `recover`
        #[arg(long)]
        estimate: PathBuf,
        /// The truth/ directory written by `simulate`
        #[arg(long)]
        truth: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate, fit, estimate, refit, recover and evaluate for each replicate
    Pipeline(Common),
}

#[derive(Args)]
struct Common {
    /// TOML or JSON file with the same keys as the flags
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; must already exist
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    settings: Settings,
}

impl Common {
    fn resolve(self) -> Result<(PathBuf, Settings)> {
        let file = match &self.config {
            Some(path) => Settings::load(path)?,
            None => Settings::default(),
        };
        if !self.out.is_dir() {
            return Err(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("output directory {} does not exist", self.out.display()),
            )
            .into());
        }
        Ok((self.out, self.settings.over(file)))
    }
}

/// run.json, written into every output directory.
#[derive(Serialize)]
struct RunManifest<'a, T: Serialize> {
    tool_version: &'static str,
    command: &'a str,
    seed: u64,
    settings: &'a Settings,
    resolved: T,
}

fn write_run<T: Serialize>(
    out: &Path,
    command: &str,
    settings: &Settings,
    resolved: T,
) -> Result<()> {
    let manifest = RunManifest {
        tool_version: TOOL_VERSION,
        command,
        seed: settings.seed(),
        settings,
        resolved,
    };
    io::write_json(&out.join("run.json"), &manifest)?;
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{what} {} not found", path.display()),
        )
        .into())
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Usage(format!("--level must lie in (0, 1), got {level}")).into())
    }
}

/// Reads an indicator from estimate.json (or a directory holding it), a
/// bare `{"rows": ...}` JSON file, or a CSV of 0/1 rows.
fn load_indicator(path: &Path) -> Result<IndicatorMatrix> {
    let path = if path.is_dir() {
        path.join("estimate.json")
    } else {
        path.to_path_buf()
    };
    let bad = |why: String| {
        Usage(format!(
            "cannot read an indicator from {}: {why}",
            path.display()
        ))
    };
    let indicator = if path.extension().is_some_and(|e| e == "csv") {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(&path)
            .map_err(|e| bad(e.to_string()))?;
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let row = rec
                .iter()
                .map(|f| match f.trim() {
                    "0" => Ok(0u8),
                    "1" => Ok(1u8),
                    other => Err(bad(format!("entry {other:?} is not 0 or 1"))),
                })
                .collect::<std::result::Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        IndicatorMatrix::from_rows(&rows)?
    } else {
        let text =
            fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
        let inner = value.get("indicator").cloned().unwrap_or(value);
        serde_json::from_value(inner).map_err(|e| bad(e.to_string()))?
    };
    indicator.validate()?;
    Ok(indicator)
}

fn write_indicator_csv(path: &Path, indicator: &IndicatorMatrix) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    for row in indicator.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn simulate(common: Common) -> Result<()> {
    let (out, settings) = common.resolve()?;
    let scenario = settings.scenario_config()?;
    scenario.validate()?;
    let (data, truth) = generate(&scenario, settings.seed())?;
    io::write_dataset(&out.join("data"), &data)?;
    io::write_truth(&out.join("truth"), &truth)?;
    write_run(&out, "simulate", &settings, &scenario)?;
    println!(
        "simulated {} studies of {} x {} with {} factors into {}",
        data.n_studies(),
        data.n_subjects(0),
        data.n_features(),
        truth.indicator.n_factors(),
        out.display()
    );
    Ok(())
}

fn fit(data_dir: PathBuf, common: Common) -> Result<()> {
    let (out, settings) = common.resolve()?;
    require_dir(&data_dir, "dataset directory")?;
    let hyper = settings.hyperparams();
    hyper.validate()?;
    let mut chain = settings.chain();
    if let Some(path) = &settings.fixed_indicator {
        chain.fixed_indicator = Some(load_indicator(path)?);
    }
    chain.validate()?;
    let raw = io::read_dataset(&data_dir)?;
    if !raw.is_centered() {
        log::info!("centering each study's features");
    }
    let data = center_dataset(&raw)?;
    let trace = run_chain(&data, &hyper, &chain, None)?;
    io::write_trace(&out, &trace, &hyper)?;
    write_run(&out, "fit", &settings, (&hyper, &chain))?;
    let last = trace.diagnostics.last();
    println!(
        "stored {} samples; final K = {}, log-likelihood = {:.3}",
        trace.len(),
        last.map_or(0, |d| d.n_factors),
        last.map_or(f64::NAN, |d| d.log_likelihood)
    );
    Ok(())
}

fn estimate(trace_dir: PathBuf, common: Common) -> Result<()> {
    let (out, settings) = common.resolve()?;
    require_dir(&trace_dir, "trace directory")?;
    let level = settings.level();
    check_level(level)?;
    let (trace, hyper) = io::read_trace(&trace_dir)?;
    let est = point_estimate(&trace.indicator_samples, &hyper)?;
    let ball = credible_ball_from_samples(&trace.indicator_samples, &est.indicator, level)?;
    let manifest = estimate_manifest(&trace, &est, &ball)?;
    io::write_json(&out.join("estimate.json"), &manifest)?;
    write_indicator_csv(&out.join("indicator.csv"), &est.indicator)?;
    write_run(&out, "estimate", &settings, level)?;
    println!(
        "estimate has {} factors ({}); epsilon* = {} at level {level} (coverage {:.4})",
        est.indicator.n_factors(),
        manifest.factor_types.join(" "),
        ball.epsilon_star,
        ball.coverage
    );
    Ok(())
}

fn recover(trace_dir: PathBuf, common: Common) -> Result<()> {
    let (out, settings) = common.resolve()?;
    require_dir(&trace_dir, "trace directory")?;
    let (trace, _) = io::read_trace(&trace_dir)?;
    if trace.config.fixed_indicator.is_none() || trace.lambda_samples.is_none() {
        return Err(
            Usage("recover needs a trace written by `fit --fixed-indicator`".into()).into(),
        );
    }
    let recovered = recover_loadings(&trace)?;
    io::write_loadings(&out, &recovered, trace.config.seed, trace.len())?;
    fs::write(
        out.join("lambda_hat.svg"),
        io::heatmap_svg(&recovered.lambda_hat, 8),
    )?;
    write_run(&out, "recover", &settings, ())?;
    println!(
        "recovered {} x {} loadings from {} samples",
        recovered.lambda_hat.nrows(),
        recovered.lambda_hat.ncols(),
        trace.len()
    );
    Ok(())
}

fn evaluate(estimate_dir: PathBuf, truth_dir: PathBuf, common: Common) -> Result<()> {
    let (out, settings) = common.resolve()?;
    require_dir(&estimate_dir, "estimate directory")?;
    require_dir(&truth_dir, "truth directory")?;
    let (lambda_hat, indicator) = io::read_loadings(&estimate_dir)?;
    let truth = io::read_truth(&truth_dir)?;
    let report = evaluate_run(&lambda_hat, &indicator, &truth)?;
    io::write_evaluation(&out, &report, None)?;
    fs::write(out.join("lambda_hat.svg"), io::heatmap_svg(&lambda_hat, 8))?;
    fs::write(
        out.join("lambda_true.svg"),
        io::heatmap_svg(&truth.lambda, 8),
    )?;
    write_run(&out, "evaluate", &settings, ())?;
    for (metric, value) in io::tidy_rows(&report) {
        println!("{metric}\t{value:.4}");
    }
    Ok(())
}

fn pipeline(common: Common) -> Result<()> {
    let (out, settings) = common.resolve()?;
    let chain = settings.chain();
    let config = PipelineConfig {
        scenario: settings.scenario_config()?,
        hyperparams: settings.hyperparams(),
        n_iterations: chain.n_iterations,
        burn_in: chain.burn_in,
        thin: chain.thin,
        fixed_thin: settings.fixed_thin.unwrap_or(4),
        sharing: chain.sharing,
        indicator_move: chain.indicator_move,
        max_free_factors: chain.max_free_factors,
        level: settings.level(),
        replicates: settings.replicates.unwrap_or(1),
        seed: settings.seed(),
    };
    if settings.fixed_indicator.is_some() {
        return Err(Usage("--fixed-indicator does not apply to `pipeline`".into()).into());
    }
    config.validate()?;
    let jobs = settings
        .jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    write_run(&out, "pipeline", &settings, &config)?;
    let summary = run_pipeline_to_dir(&config, &out, jobs)?;
    println!("metric\tmedian");
    for (metric, value) in &summary.medians {
        println!("{metric}\t{value:.4}");
    }
    if !summary.failures.is_empty() {
        anyhow::bail!(
            "{} of {} replicates failed; see {}",
            summary.failures.len(),
            config.replicates,
            out.join("failures.json").display()
        );
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<tetris_core::Error>() {
            return if e.is_validation() { 2 } else { 1 };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TETRIS_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(c) => simulate(c),
        Command::Fit { data, common } => fit(data, common),
        Command::Estimate { trace, common } => estimate(trace, common),
        Command::Recover { trace, common } => recover(trace, common),
        Command::Evaluate {
            estimate: e,
            truth,
            common,
        } => evaluate(e, truth, common),
        Command::Pipeline(c) => pipeline(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
