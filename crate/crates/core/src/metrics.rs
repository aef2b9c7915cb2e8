//! RV coefficients and covariance reconstructions used to score a fit
//! against simulation truth.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FactorType, IndicatorMatrix};
use crate::sim::SimTruth;

fn check_symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "{name} is {}x{}, expected square",
            m.nrows(),
            m.ncols()
        )));
    }
    let scale = m.norm().max(1.0);
    if (m - m.transpose()).norm() > 1e-8 * scale {
        return Err(Error::Domain(format!("{name} is not symmetric")));
    }
    Ok(())
}

/// Tr(SᵀT) / √(Tr(SᵀS) Tr(TᵀT)).
pub fn rv_coefficient(s: &DMatrix<f64>, t: &DMatrix<f64>) -> Result<f64> {
    if s.shape() != t.shape() {
        return Err(Error::Dimension(format!(
            "RV of {:?} and {:?} matrices",
            s.shape(),
            t.shape()
        )));
    }
    check_symmetric(s, "first matrix")?;
    check_symmetric(t, "second matrix")?;
    let ss = s.norm_squared();
    let tt = t.norm_squared();
    if ss == 0.0 || tt == 0.0 {
        return Err(Error::Degenerate("RV coefficient of a zero matrix".into()));
    }
    let st = s.dot(t);
    Ok((st / (ss.sqrt() * tt.sqrt())).clamp(-1.0, 1.0))
}

/// Λ̂ Â_s Λ̂ᵀ, plus diag(ψ̂) when given.
pub fn reconstruct_study_covariance(
    lambda_hat: &DMatrix<f64>,
    indicator: &IndicatorMatrix,
    s: usize,
    psi_hat: Option<&DVector<f64>>,
) -> Result<DMatrix<f64>> {
    if lambda_hat.ncols() != indicator.n_factors() {
        return Err(Error::Dimension(format!(
            "loadings have {} columns, indicator has {}",
            lambda_hat.ncols(),
            indicator.n_factors()
        )));
    }
    if s >= indicator.n_studies() {
        return Err(Error::Dimension(format!("study {s} out of range")));
    }
    let cols: Vec<usize> = (0..indicator.n_factors())
        .filter(|&k| indicator.get(s, k))
        .collect();
    let sub = lambda_hat.select_columns(&cols);
    let mut cov = &sub * sub.transpose();
    if let Some(psi) = psi_hat {
        if psi.len() != lambda_hat.nrows() {
            return Err(Error::Dimension(
                "noise vector length differs from feature count".into(),
            ));
        }
        for p in 0..psi.len() {
            cov[(p, p)] += psi[p];
        }
    }
    symmetrize(&mut cov);
    Ok(cov)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Which columns a loading covariance is built from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadingSelection {
    Full,
    Type(FactorType),
}

/// Λ̃Λ̃ᵀ over the selected columns.
pub fn loading_covariance(
    lambda_hat: &DMatrix<f64>,
    indicator: &IndicatorMatrix,
    which: LoadingSelection,
) -> Result<DMatrix<f64>> {
    if lambda_hat.ncols() != indicator.n_factors() {
        return Err(Error::Dimension(format!(
            "loadings have {} columns, indicator has {}",
            lambda_hat.ncols(),
            indicator.n_factors()
        )));
    }
    let cols: Vec<usize> = match which {
        LoadingSelection::Full => (0..indicator.n_factors()).collect(),
        LoadingSelection::Type(z) => (0..indicator.n_factors())
            .filter(|&k| indicator.column(k) == z)
            .collect(),
    };
    if cols.is_empty() {
        return Err(Error::Empty(
            "no columns match the requested factor type".into(),
        ));
    }
    let sub = lambda_hat.select_columns(&cols);
    let mut cov = &sub * sub.transpose();
    symmetrize(&mut cov);
    Ok(cov)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub rv_full_loading: f64,
    /// Present when both truth and estimate have at least one common factor.
    pub rv_common_loading: Option<f64>,
    /// Keyed by membership label, e.g. "1100".
    pub rv_per_type: BTreeMap<String, f64>,
    pub rv_study_covariances: Vec<f64>,
    /// Fraction of the estimated common covariance's squared Frobenius norm
    /// inside the leading half × half block.
    pub common_mass_first_half: Option<f64>,
    pub n_factors_estimated: usize,
    pub n_factors_true: usize,
}

/// Share of ‖C‖²_F lying in the top-left `rows × rows` block.
pub fn leading_block_mass(cov: &DMatrix<f64>, rows: usize) -> f64 {
    let total = cov.norm_squared();
    if total == 0.0 {
        return 0.0;
    }
    cov.view((0, 0), (rows, rows)).norm_squared() / total
}

/// Compares an estimate (Λ̂, 𝒜*) to simulation truth.
pub fn evaluate_run(
    lambda_hat: &DMatrix<f64>,
    indicator: &IndicatorMatrix,
    truth: &SimTruth,
) -> Result<EvaluationReport> {
    let n_studies = truth.indicator.n_studies();
    if indicator.n_studies() != n_studies || lambda_hat.nrows() != truth.lambda.nrows() {
        return Err(Error::Dimension(
            "estimate and truth disagree on studies or features".into(),
        ));
    }
    let rv_full_loading = rv_coefficient(
        &loading_covariance(lambda_hat, indicator, LoadingSelection::Full)?,
        &loading_covariance(&truth.lambda, &truth.indicator, LoadingSelection::Full)?,
    )?;

    let mut rv_per_type = BTreeMap::new();
    for z in truth.indicator.types().into_keys() {
        if !indicator.columns().contains(&z) {
            continue;
        }
        let est = loading_covariance(lambda_hat, indicator, LoadingSelection::Type(z))?;
        let tru = loading_covariance(&truth.lambda, &truth.indicator, LoadingSelection::Type(z))?;
        match rv_coefficient(&est, &tru) {
            Ok(rv) => {
                rv_per_type.insert(z.label(n_studies), rv);
            }
            Err(Error::Degenerate(_)) => {
                rv_per_type.insert(z.label(n_studies), 0.0);
            }
            Err(e) => return Err(e),
        }
    }
    let common = FactorType::all(n_studies);
    let has_common = n_studies > 1;
    let rv_common_loading = if has_common {
        rv_per_type.get(&common.label(n_studies)).copied()
    } else {
        None
    };
    let common_mass_first_half = if has_common && indicator.columns().contains(&common) {
        let est = loading_covariance(lambda_hat, indicator, LoadingSelection::Type(common))?;
        Some(leading_block_mass(&est, lambda_hat.nrows() / 2))
    } else {
        None
    };

    let rv_study_covariances = (0..n_studies)
        .map(|s| {
            let est = reconstruct_study_covariance(lambda_hat, indicator, s, None)?;
            match rv_coefficient(&est, &truth.sigma[s]) {
                Err(Error::Degenerate(_)) => Ok(0.0),
                other => other,
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluationReport {
        rv_full_loading,
        rv_common_loading,
        rv_per_type,
        rv_study_covariances,
        common_mass_first_half,
        n_factors_estimated: indicator.n_factors(),
        n_factors_true: truth.indicator.n_factors(),
    })
}
