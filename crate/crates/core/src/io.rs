//! On-disk formats: datasets, truth bundles, traces, estimates and
//! evaluation reports. Matrices are CSV, metadata is pretty JSON.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::EvaluationReport;
use crate::model::{FactorType, Hyperparams, IndicatorMatrix, MultiStudyDataset};
use crate::sampler::{ChainConfig, ChainTrace, IterationDiagnostics};
use crate::sim::{ScenarioConfig, SimTruth};
use crate::TOOL_VERSION;

fn format_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_error(path, e.to_string()))
}

/// Writes a matrix with an optional header row.
pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>, header: Option<&[String]>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if let Some(h) = header {
        w.write_record(h)?;
    }
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a numeric CSV; returns the header (if requested) and the matrix.
pub fn read_matrix_csv(
    path: &Path,
    has_header: bool,
) -> Result<(Option<Vec<String>>, DMatrix<f64>)> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .from_path(path)?;
    let header = if has_header {
        Some(r.headers()?.iter().map(str::to_string).collect::<Vec<_>>())
    } else {
        None
    };
    let mut values = Vec::new();
    let mut ncols = header.as_ref().map(|h| h.len());
    let mut nrows = 0;
    for (line, record) in r.records().enumerate() {
        let record = record?;
        match ncols {
            Some(c) if c != record.len() => {
                return Err(format_error(
                    path,
                    format!("row {} has {} fields, expected {c}", line + 1, record.len()),
                ))
            }
            None => ncols = Some(record.len()),
            _ => {}
        }
        for field in record.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                format_error(
                    path,
                    format!("row {}: cannot parse {field:?} as a number", line + 1),
                )
            })?;
            if !v.is_finite() {
                return Err(format_error(
                    path,
                    format!("row {}: non-finite value", line + 1),
                ));
            }
            values.push(v);
        }
        nrows += 1;
    }
    let ncols = ncols.unwrap_or(0);
    Ok((header, DMatrix::from_row_slice(nrows, ncols, &values)))
}

pub fn study_file(dir: &Path, s: usize) -> PathBuf {
    dir.join(format!("study_{}.csv", s + 1))
}

/// One `study_<s>.csv` per study, each with a header of feature names.
pub fn write_dataset(dir: &Path, data: &MultiStudyDataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    for s in 0..data.n_studies() {
        write_matrix_csv(
            &study_file(dir, s),
            data.study(s),
            Some(data.feature_names()),
        )?;
    }
    Ok(())
}

/// Reads `study_1.csv`, `study_2.csv`, … until the first missing index.
pub fn read_dataset(dir: &Path) -> Result<MultiStudyDataset> {
    if !dir.is_dir() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset directory {} not found", dir.display()),
        )));
    }
    let mut studies = Vec::new();
    let mut names: Option<Vec<String>> = None;
    let mut s = 0;
    while study_file(dir, s).is_file() {
        let path = study_file(dir, s);
        let (header, m) = read_matrix_csv(&path, true)?;
        let header = header.unwrap_or_default();
        match &names {
            None => names = Some(header),
            Some(n) if *n != header => {
                return Err(Error::Dimension(format!(
                    "{} has a different feature header",
                    path.display()
                )))
            }
            _ => {}
        }
        studies.push(m);
        s += 1;
    }
    if studies.is_empty() {
        return Err(Error::Empty(format!(
            "no study_<s>.csv files in {}",
            dir.display()
        )));
    }
    MultiStudyDataset::new(studies, names.unwrap_or_default())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TruthManifest {
    tool_version: String,
    seed: u64,
    config: ScenarioConfig,
    indicator: IndicatorMatrix,
}

/// truth.json plus lambda.csv, psi.csv and sigma_<s>.csv.
pub fn write_truth(dir: &Path, truth: &SimTruth) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(
        &dir.join("truth.json"),
        &TruthManifest {
            tool_version: TOOL_VERSION.into(),
            seed: truth.seed,
            config: truth.config.clone(),
            indicator: truth.indicator.clone(),
        },
    )?;
    write_matrix_csv(&dir.join("lambda.csv"), &truth.lambda, None)?;
    write_matrix_csv(&dir.join("psi.csv"), &truth.psi, None)?;
    for (s, sigma) in truth.sigma.iter().enumerate() {
        write_matrix_csv(&dir.join(format!("sigma_{}.csv", s + 1)), sigma, None)?;
    }
    Ok(())
}

pub fn read_truth(dir: &Path) -> Result<SimTruth> {
    let manifest: TruthManifest = read_json(&dir.join("truth.json"))?;
    manifest.indicator.validate()?;
    let (_, lambda) = read_matrix_csv(&dir.join("lambda.csv"), false)?;
    let (_, psi) = read_matrix_csv(&dir.join("psi.csv"), false)?;
    let n_studies = manifest.indicator.n_studies();
    if lambda.ncols() != manifest.indicator.n_factors()
        || psi.shape() != (n_studies, lambda.nrows())
    {
        return Err(Error::Dimension(
            "truth bundle matrices disagree with its indicator".into(),
        ));
    }
    let sigma = (0..n_studies)
        .map(|s| SimTruth::covariance(&lambda, &manifest.indicator, &psi, s))
        .collect();
    Ok(SimTruth {
        lambda,
        indicator: manifest.indicator,
        psi,
        sigma,
        config: manifest.config,
        seed: manifest.seed,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceManifest {
    pub tool_version: String,
    pub seed: u64,
    pub n_studies: usize,
    pub n_features: usize,
    pub n_samples: usize,
    pub hyperparams: Hyperparams,
    pub config: ChainConfig,
}

/// manifest.json, indicators.csv (iteration, K, then the S × K entries row
/// by row), diagnostics.csv, and for fixed-indicator runs one P × K file
/// per sample under lambda/ plus noise_variance.csv.
pub fn write_trace(dir: &Path, trace: &ChainTrace, hyper: &Hyperparams) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(
        &dir.join("manifest.json"),
        &TraceManifest {
            tool_version: TOOL_VERSION.into(),
            seed: trace.config.seed,
            n_studies: trace.n_studies,
            n_features: trace.n_features,
            n_samples: trace.len(),
            hyperparams: *hyper,
            config: trace.config.clone(),
        },
    )?;
    let mut w = csv::WriterBuilder::new()
        .flexible(true)
        .from_path(dir.join("indicators.csv"))?;
    for (it, ind) in trace.sample_iterations.iter().zip(&trace.indicator_samples) {
        let mut rec = vec![it.to_string(), ind.n_factors().to_string()];
        rec.extend(ind.rows().into_iter().flatten().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("diagnostics.csv"))?;
    w.write_record(["iteration", "n_factors", "log_likelihood"])?;
    for d in &trace.diagnostics {
        w.write_record([
            d.iteration.to_string(),
            d.n_factors.to_string(),
            d.log_likelihood.to_string(),
        ])?;
    }
    w.flush()?;

    if let Some(samples) = &trace.lambda_samples {
        let lambda_dir = dir.join("lambda");
        fs::create_dir_all(&lambda_dir)?;
        for (i, l) in samples.iter().enumerate() {
            write_matrix_csv(&lambda_sample_file(&lambda_dir, i), l, None)?;
        }
    }
    if let Some(noise) = &trace.noise_variance_mean {
        write_matrix_csv(&dir.join("noise_variance.csv"), noise, None)?;
    }
    Ok(())
}

fn lambda_sample_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("lambda_{i:06}.csv"))
}

pub fn read_trace(dir: &Path) -> Result<(ChainTrace, Hyperparams)> {
    let manifest_path = dir.join("manifest.json");
    let manifest: TraceManifest = read_json(&manifest_path)?;
    let s = manifest.n_studies;
    let path = dir.join("indicators.csv");
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(&path)?;
    let mut indicator_samples = Vec::new();
    let mut sample_iterations = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |why: &str| format_error(&path, format!("row {}: {why}", line + 1));
        let fields: Vec<usize> = rec
            .iter()
            .map(|f| f.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("non-integer field"))?;
        if fields.len() < 2 {
            return Err(bad("too few fields"));
        }
        let k = fields[1];
        if fields.len() != 2 + s * k {
            return Err(bad("entry count does not match S x K"));
        }
        let rows: Vec<Vec<u8>> = (0..s)
            .map(|i| {
                fields[2 + i * k..2 + (i + 1) * k]
                    .iter()
                    .map(|&v| v as u8)
                    .collect()
            })
            .collect();
        if rows.iter().flatten().any(|&v| v > 1) {
            return Err(bad("indicator entries must be 0 or 1"));
        }
        sample_iterations.push(fields[0]);
        indicator_samples.push(IndicatorMatrix::from_rows(&rows)?);
    }
    if indicator_samples.len() != manifest.n_samples {
        return Err(format_error(
            &manifest_path,
            "sample count disagrees with indicators.csv",
        ));
    }

    let mut diagnostics = Vec::new();
    let diag_path = dir.join("diagnostics.csv");
    if diag_path.is_file() {
        let mut r = csv::Reader::from_path(&diag_path)?;
        for rec in r.deserialize() {
            let (iteration, n_factors, log_likelihood): (usize, usize, f64) = rec?;
            diagnostics.push(IterationDiagnostics {
                iteration,
                n_factors,
                log_likelihood,
            });
        }
    }

    let lambda_dir = dir.join("lambda");
    let lambda_samples = if lambda_dir.is_dir() {
        let mut samples = Vec::with_capacity(manifest.n_samples);
        for i in 0..manifest.n_samples {
            let path = lambda_sample_file(&lambda_dir, i);
            let (_, l) = read_matrix_csv(&path, false)?;
            if l.nrows() != manifest.n_features {
                return Err(format_error(
                    &path,
                    "row count differs from the feature count",
                ));
            }
            samples.push(l);
        }
        Some(samples)
    } else {
        None
    };
    let noise_path = dir.join("noise_variance.csv");
    let noise_variance_mean = if noise_path.is_file() {
        Some(read_matrix_csv(&noise_path, false)?.1)
    } else {
        None
    };

    Ok((
        ChainTrace {
            config: manifest.config,
            n_studies: s,
            n_features: manifest.n_features,
            indicator_samples,
            sample_iterations,
            lambda_samples,
            noise_variance_mean,
            diagnostics,
        },
        manifest.hyperparams,
    ))
}

/// Contents of estimate.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateManifest {
    pub tool_version: String,
    pub seed: u64,
    pub indicator: IndicatorMatrix,
    pub sample_index: usize,
    pub radius: u32,
    pub neighbours: usize,
    pub level: f64,
    pub epsilon_star: u32,
    pub coverage: f64,
    /// Membership label of every factor column of the estimate.
    pub factor_types: Vec<String>,
    /// Fraction of trace samples holding each pattern.
    pub pattern_fractions: BTreeMap<String, f64>,
}

/// Contents of loadings.json, written next to lambda_hat.csv.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadingsManifest {
    pub tool_version: String,
    pub seed: u64,
    pub indicator: IndicatorMatrix,
    pub n_samples: usize,
    /// Membership label → file holding its median covariance.
    pub type_covariance_files: BTreeMap<String, String>,
}

pub fn write_loadings(
    dir: &Path,
    recovered: &crate::postprocess::RecoveredLoadings,
    seed: u64,
    n_samples: usize,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let s = recovered.indicator.n_studies();
    write_matrix_csv(&dir.join("lambda_hat.csv"), &recovered.lambda_hat, None)?;
    let mut files = BTreeMap::new();
    for (z, cov) in &recovered.type_covariances {
        let name = format!("type_covariance_{}.csv", z.label(s));
        write_matrix_csv(&dir.join(&name), cov, None)?;
        files.insert(z.label(s), name);
    }
    write_json(
        &dir.join("loadings.json"),
        &LoadingsManifest {
            tool_version: TOOL_VERSION.into(),
            seed,
            indicator: recovered.indicator.clone(),
            n_samples,
            type_covariance_files: files,
        },
    )
}

/// Reads Λ̂ and its indicator from a directory written by [`write_loadings`].
pub fn read_loadings(dir: &Path) -> Result<(DMatrix<f64>, IndicatorMatrix)> {
    let manifest: LoadingsManifest = read_json(&dir.join("loadings.json"))?;
    manifest.indicator.validate()?;
    let (_, lambda) = read_matrix_csv(&dir.join("lambda_hat.csv"), false)?;
    if lambda.ncols() != manifest.indicator.n_factors() {
        return Err(Error::Dimension(
            "lambda_hat.csv disagrees with the stored indicator".into(),
        ));
    }
    Ok((lambda, manifest.indicator))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationManifest {
    pub tool_version: String,
    pub report: EvaluationReport,
}

/// evaluation.json and evaluation.csv (metric, value rows).
pub fn write_evaluation(
    dir: &Path,
    report: &EvaluationReport,
    replicate: Option<usize>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_json(
        &dir.join("evaluation.json"),
        &EvaluationManifest {
            tool_version: TOOL_VERSION.into(),
            report: report.clone(),
        },
    )?;
    let mut w = csv::Writer::from_path(dir.join("evaluation.csv"))?;
    w.write_record(["replicate", "metric", "value"])?;
    let rep = replicate.map(|r| r.to_string()).unwrap_or_default();
    for (metric, value) in tidy_rows(report) {
        w.write_record([rep.clone(), metric, value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Flattens a report into (metric, value) pairs in a fixed order.
pub fn tidy_rows(report: &EvaluationReport) -> Vec<(String, f64)> {
    let mut rows = vec![("rv_full_loading".to_string(), report.rv_full_loading)];
    if let Some(v) = report.rv_common_loading {
        rows.push(("rv_common_loading".into(), v));
    }
    if let Some(v) = report.common_mass_first_half {
        rows.push(("common_mass_first_half".into(), v));
    }
    for (label, v) in &report.rv_per_type {
        rows.push((format!("rv_type_{label}"), *v));
    }
    for (s, v) in report.rv_study_covariances.iter().enumerate() {
        rows.push((format!("rv_study_{}", s + 1), *v));
    }
    rows.push((
        "n_factors_estimated".into(),
        report.n_factors_estimated as f64,
    ));
    rows.push(("n_factors_true".into(), report.n_factors_true as f64));
    rows
}

/// Diverging heatmap: one `cell`-sized square per entry, rows are features
/// and columns factors; blue for negative, red for positive, white at zero.
pub fn heatmap_svg(m: &DMatrix<f64>, cell: usize) -> String {
    let (rows, cols) = m.shape();
    let scale = m.amax();
    let width = cols * cell;
    let height = rows * cell;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" data-rows=\"{rows}\" data-cols=\"{cols}\">\n"
    );
    for i in 0..rows {
        for j in 0..cols {
            let t = if scale > 0.0 {
                (m[(i, j)] / scale).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            let fade = ((1.0 - t.abs()) * 255.0).round() as u8;
            let (r, g, b) = if t >= 0.0 {
                (255, fade, fade)
            } else {
                (fade, fade, 255)
            };
            out.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"#{r:02x}{g:02x}{b:02x}\"/>\n",
                j * cell,
                i * cell
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Parses a membership label like "1100" against the study count.
pub fn parse_pattern(label: &str, n_studies: usize) -> Result<FactorType> {
    if label.len() != n_studies {
        return Err(Error::Domain(format!(
            "pattern {label:?} must have {n_studies} characters"
        )));
    }
    FactorType::parse_label(label)
}
