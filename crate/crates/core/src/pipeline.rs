//! End-to-end runs: simulate, fit, pick 𝒜*, refit with 𝒜* fixed, recover
//! Λ̂ and score it against the truth, for any number of replicates.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::kernels::derive_seed;
use crate::metrics::{evaluate_run, EvaluationReport};
use crate::model::{Hyperparams, MultiStudyDataset};
use crate::postprocess::{
    credible_ball_from_samples, pattern_fractions, point_estimate, recover_loadings, CredibleBall,
    PointEstimate, RecoveredLoadings,
};
use crate::sampler::{run_chain, ChainConfig, ChainTrace, IndicatorMove, SharingMode};
use crate::sim::{generate, ScenarioConfig, SimTruth};
use crate::TOOL_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub scenario: ScenarioConfig,
    pub hyperparams: Hyperparams,
    pub n_iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Thinning of the fixed-indicator rerun.
    pub fixed_thin: usize,
    pub sharing: SharingMode,
    #[serde(default)]
    pub indicator_move: IndicatorMove,
    pub max_free_factors: usize,
    pub level: f64,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let chain = ChainConfig::default();
        PipelineConfig {
            scenario: ScenarioConfig::scenario1(0.8),
            hyperparams: Hyperparams::default(),
            n_iterations: chain.n_iterations,
            burn_in: chain.burn_in,
            thin: chain.thin,
            fixed_thin: 4,
            sharing: SharingMode::Free,
            indicator_move: chain.indicator_move,
            max_free_factors: chain.max_free_factors,
            level: 0.95,
            replicates: 1,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn replicate_seed(&self, replicate: usize) -> u64 {
        derive_seed(self.seed, replicate as u64)
    }

    fn chain(&self, seed: u64) -> ChainConfig {
        ChainConfig {
            n_iterations: self.n_iterations,
            burn_in: self.burn_in,
            thin: self.thin,
            fixed_indicator: None,
            sharing: self.sharing,
            indicator_move: self.indicator_move,
            seed,
            max_free_factors: self.max_free_factors,
            log_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.hyperparams.validate()?;
        self.chain(0).validate()?;
        if self.fixed_thin == 0 {
            return Err(Error::Domain("fixed_thin must be positive".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Domain(format!(
                "level must lie in (0, 1), got {}",
                self.level
            )));
        }
        Ok(())
    }
}

/// Everything one replicate produces.
#[derive(Debug, Clone)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub seed: u64,
    pub data: MultiStudyDataset,
    pub truth: SimTruth,
    pub trace: ChainTrace,
    pub estimate: PointEstimate,
    pub ball: CredibleBall,
    pub fixed_trace: ChainTrace,
    pub recovered: RecoveredLoadings,
    pub report: EvaluationReport,
}

/// Fits already-simulated data: phase 1, point estimate, credible ball,
/// fixed-indicator phase 2 and loading recovery.
pub fn fit_and_recover(
    data: &MultiStudyDataset,
    config: &PipelineConfig,
    seed: u64,
) -> Result<(
    ChainTrace,
    PointEstimate,
    CredibleBall,
    ChainTrace,
    RecoveredLoadings,
)> {
    let hyper = &config.hyperparams;
    let trace = run_chain(data, hyper, &config.chain(derive_seed(seed, 1)), None)?;
    let estimate = point_estimate(&trace.indicator_samples, hyper)?;
    let ball =
        credible_ball_from_samples(&trace.indicator_samples, &estimate.indicator, config.level)?;
    let mut fixed = config.chain(derive_seed(seed, 2));
    fixed.fixed_indicator = Some(estimate.indicator.clone());
    fixed.thin = config.fixed_thin.min(fixed.n_iterations - fixed.burn_in);
    let fixed_trace = run_chain(data, hyper, &fixed, None)?;
    let recovered = recover_loadings(&fixed_trace)?;
    Ok((trace, estimate, ball, fixed_trace, recovered))
}

pub fn run_replicate(config: &PipelineConfig, replicate: usize) -> Result<ReplicateOutcome> {
    config.validate()?;
    let seed = config.replicate_seed(replicate);
    let (data, truth) = generate(&config.scenario, derive_seed(seed, 0))?;
    let (trace, estimate, ball, fixed_trace, recovered) = fit_and_recover(&data, config, seed)?;
    let report = evaluate_run(&recovered.lambda_hat, &recovered.indicator, &truth)?;
    Ok(ReplicateOutcome {
        replicate,
        seed,
        data,
        truth,
        trace,
        estimate,
        ball,
        fixed_trace,
        recovered,
        report,
    })
}

/// Runs replicates 0..R in parallel (on the current rayon pool).
pub fn run_replicates(config: &PipelineConfig) -> Vec<Result<ReplicateOutcome>> {
    (0..config.replicates)
        .into_par_iter()
        .map(|r| run_replicate(config, r))
        .collect()
}

/// Written last in each replicate directory; its presence marks the
/// replicate as complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateManifest {
    pub tool_version: String,
    pub replicate: usize,
    pub seed: u64,
    pub config: PipelineConfig,
    pub report: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailureRecord {
    pub replicate: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub tool_version: String,
    pub config: PipelineConfig,
    pub completed: Vec<usize>,
    pub resumed: Vec<usize>,
    pub failures: Vec<FailureRecord>,
    /// Median over completed replicates of every metric.
    pub medians: BTreeMap<String, f64>,
}

fn replicate_dir(out: &Path, r: usize) -> std::path::PathBuf {
    out.join(format!("replicate_{:03}", r + 1))
}

/// Writes every artifact of one replicate under `dir`.
pub fn write_replicate(
    dir: &Path,
    outcome: &ReplicateOutcome,
    config: &PipelineConfig,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let hyper = &config.hyperparams;
    io::write_dataset(&dir.join("data"), &outcome.data)?;
    io::write_truth(&dir.join("truth"), &outcome.truth)?;
    io::write_trace(&dir.join("trace"), &outcome.trace, hyper)?;
    let estimate = estimate_manifest(&outcome.trace, &outcome.estimate, &outcome.ball)?;
    fs::create_dir_all(dir.join("estimate"))?;
    io::write_json(&dir.join("estimate").join("estimate.json"), &estimate)?;
    io::write_trace(&dir.join("fixed_trace"), &outcome.fixed_trace, hyper)?;
    io::write_loadings(
        &dir.join("loadings"),
        &outcome.recovered,
        outcome.fixed_trace.config.seed,
        outcome.fixed_trace.len(),
    )?;
    io::write_evaluation(
        &dir.join("evaluation"),
        &outcome.report,
        Some(outcome.replicate + 1),
    )?;
    fs::write(
        dir.join("evaluation").join("lambda_hat.svg"),
        io::heatmap_svg(&outcome.recovered.lambda_hat, 8),
    )?;
    fs::write(
        dir.join("evaluation").join("lambda_true.svg"),
        io::heatmap_svg(&outcome.truth.lambda, 8),
    )?;
    io::write_json(
        &dir.join("replicate.json"),
        &ReplicateManifest {
            tool_version: TOOL_VERSION.into(),
            replicate: outcome.replicate,
            seed: outcome.seed,
            config: config.clone(),
            report: outcome.report.clone(),
        },
    )
}

/// Builds the estimate.json contents from a phase-1 trace.
pub fn estimate_manifest(
    trace: &ChainTrace,
    estimate: &PointEstimate,
    ball: &CredibleBall,
) -> Result<io::EstimateManifest> {
    let s = estimate.indicator.n_studies();
    Ok(io::EstimateManifest {
        tool_version: TOOL_VERSION.into(),
        seed: trace.config.seed,
        indicator: estimate.indicator.clone(),
        sample_index: estimate.sample_index,
        radius: estimate.radius,
        neighbours: estimate.neighbours,
        level: ball.level,
        epsilon_star: ball.epsilon_star,
        coverage: ball.coverage,
        factor_types: estimate
            .indicator
            .columns()
            .iter()
            .map(|z| z.label(s))
            .collect(),
        pattern_fractions: pattern_fractions(&trace.indicator_samples)?
            .into_iter()
            .map(|(z, f)| (z.label(s), f))
            .collect(),
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Runs (or resumes) all replicates into `out`, then writes summary.csv
/// (one row per metric per replicate), medians.csv, failures.json and
/// pipeline.json. Replicates whose replicate.json already matches the
/// configuration are reused.
pub fn run_pipeline_to_dir(
    config: &PipelineConfig,
    out: &Path,
    jobs: usize,
) -> Result<PipelineSummary> {
    config.validate()?;
    fs::create_dir_all(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Numerical(format!("cannot start worker pool: {e}")))?;

    let results: Vec<(usize, std::result::Result<(EvaluationReport, bool), Error>)> =
        pool.install(|| {
            (0..config.replicates)
                .into_par_iter()
                .map(|r| {
                    let dir = replicate_dir(out, r);
                    let marker = dir.join("replicate.json");
                    if marker.is_file() {
                        if let Ok(m) = io::read_json::<ReplicateManifest>(&marker) {
                            if &m.config == config && m.replicate == r {
                                log::info!("replicate {} already complete, skipping", r + 1);
                                return (r, Ok((m.report, true)));
                            }
                        }
                    }
                    let res = run_replicate(config, r).and_then(|o| {
                        write_replicate(&dir, &o, config)?;
                        log::info!("replicate {} done", r + 1);
                        Ok((o.report, false))
                    });
                    (r, res)
                })
                .collect()
        });

    let mut completed = Vec::new();
    let mut resumed = Vec::new();
    let mut failures = Vec::new();
    let mut reports = Vec::new();
    for (r, res) in results {
        match res {
            Ok((report, was_resumed)) => {
                completed.push(r);
                if was_resumed {
                    resumed.push(r);
                }
                reports.push((r, report));
            }
            Err(e) => {
                log::error!("replicate {} failed: {e}", r + 1);
                failures.push(FailureRecord {
                    replicate: r,
                    seed: config.replicate_seed(r),
                    error: e.to_string(),
                });
            }
        }
    }

    let mut by_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut w = csv::Writer::from_path(out.join("summary.csv"))?;
    w.write_record(["metric", "replicate", "value"])?;
    let mut rows = Vec::new();
    for (r, report) in &reports {
        for (metric, value) in io::tidy_rows(report) {
            by_metric.entry(metric.clone()).or_default().push(value);
            rows.push((metric, *r, value));
        }
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    for (metric, r, value) in rows {
        w.write_record([metric, (r + 1).to_string(), value.to_string()])?;
    }
    w.flush()?;
    let medians: BTreeMap<String, f64> = by_metric
        .into_iter()
        .map(|(k, mut v)| (k, median(&mut v)))
        .collect();
    let mut w = csv::Writer::from_path(out.join("medians.csv"))?;
    w.write_record(["metric", "median"])?;
    for (k, v) in &medians {
        w.write_record([k.clone(), v.to_string()])?;
    }
    w.flush()?;
    io::write_json(&out.join("failures.json"), &failures)?;
    let summary = PipelineSummary {
        tool_version: TOOL_VERSION.into(),
        config: config.clone(),
        completed,
        resumed,
        failures,
        medians,
    };
    io::write_json(&out.join("pipeline.json"), &summary)?;
    Ok(summary)
}

/// Λ̂Λ̂ᵀ restricted to the columns the estimate marks as common.
pub fn common_covariance(outcome: &ReplicateOutcome) -> Option<DMatrix<f64>> {
    let s = outcome.recovered.indicator.n_studies();
    crate::metrics::loading_covariance(
        &outcome.recovered.lambda_hat,
        &outcome.recovered.indicator,
        crate::metrics::LoadingSelection::Type(crate::model::FactorType::all(s)),
    )
    .ok()
}
