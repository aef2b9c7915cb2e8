//! Synthetic multi-study data with known loadings and sharing structure.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::RandomSource;
use crate::model::{center_dataset, FactorType, IndicatorMatrix, MultiStudyDataset};

/// Parameters of a simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scenario", rename_all = "kebab-case")]
pub enum ScenarioConfig {
    /// Four studies; common factors load on the first half of the features,
    /// factors shared by studies 1 and 2 on the second half.
    Scenario1 { sparsity: f64, n: usize, p: usize },
    /// Four studies; 3 common factors and `n_partial` factors shared by
    /// studies 1 and 2.
    Scenario2 {
        n: usize,
        p: usize,
        sparsity: f64,
        n_partial: usize,
    },
    /// Sixteen studies of 10 × 60; optionally one factor shared by the
    /// first eight.
    Scenario3 { n_partial: usize, sparsity: f64 },
    /// `n_common` common factors plus one specific factor per study.
    Custom {
        n_studies: usize,
        n: usize,
        p: usize,
        sparsity: f64,
        n_common: usize,
    },
}

impl ScenarioConfig {
    pub fn scenario1(sparsity: f64) -> Self {
        ScenarioConfig::Scenario1 {
            sparsity,
            n: 10,
            p: 60,
        }
    }

    pub fn scenario3(n_partial: usize) -> Self {
        ScenarioConfig::Scenario3 {
            n_partial,
            sparsity: 0.8,
        }
    }

    pub fn n_studies(&self) -> usize {
        match self {
            ScenarioConfig::Scenario1 { .. } | ScenarioConfig::Scenario2 { .. } => 4,
            ScenarioConfig::Scenario3 { .. } => 16,
            ScenarioConfig::Custom { n_studies, .. } => *n_studies,
        }
    }

    fn dims(&self) -> (usize, usize, f64) {
        match *self {
            ScenarioConfig::Scenario1 { sparsity, n, p } => (n, p, sparsity),
            ScenarioConfig::Scenario2 { n, p, sparsity, .. } => (n, p, sparsity),
            ScenarioConfig::Scenario3 { sparsity, .. } => (10, 60, sparsity),
            ScenarioConfig::Custom { n, p, sparsity, .. } => (n, p, sparsity),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, p, sparsity) = self.dims();
        if !(0.0..1.0).contains(&sparsity) {
            return Err(Error::Domain(format!(
                "sparsity must lie in [0, 1), got {sparsity}"
            )));
        }
        if n < 2 || p == 0 {
            return Err(Error::Domain(format!(
                "need n >= 2 and p >= 1, got n={n}, p={p}"
            )));
        }
        match *self {
            ScenarioConfig::Scenario1 { p, sparsity, .. } => {
                if p % 2 != 0 {
                    return Err(Error::Domain(format!(
                        "scenario 1 needs an even p, got {p}"
                    )));
                }
                if sparsity != 0.5 && sparsity != 0.8 {
                    log::warn!("scenario 1 was designed for sparsity 0.5 or 0.8, got {sparsity}");
                }
            }
            ScenarioConfig::Scenario2 {
                n,
                p,
                sparsity,
                n_partial,
            } => {
                if ![(60, 10), (35, 35), (10, 60)].contains(&(n, p)) {
                    log::warn!("scenario 2 was designed for (n, p) in (60,10), (35,35), (10,60); got ({n},{p})");
                }
                if ![0.2, 0.5, 0.8].contains(&sparsity) {
                    log::warn!(
                        "scenario 2 was designed for sparsity 0.2, 0.5 or 0.8, got {sparsity}"
                    );
                }
                if n_partial > 2 {
                    log::warn!(
                        "scenario 2 was designed for at most 2 partial factors, got {n_partial}"
                    );
                }
            }
            ScenarioConfig::Scenario3 { n_partial, .. } => {
                if n_partial > 1 {
                    return Err(Error::Domain(format!(
                        "scenario 3 has 0 or 1 partial factors, got {n_partial}"
                    )));
                }
            }
            ScenarioConfig::Custom { n_studies, .. } => {
                if n_studies == 0 || n_studies > crate::model::MAX_STUDIES {
                    return Err(Error::Domain(format!(
                        "unsupported study count {n_studies}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Free columns of the true indicator and, for every column including
    /// the identity block, the rows eligible for nonzero loadings.
    fn layout(&self) -> (Vec<FactorType>, Vec<std::ops::Range<usize>>) {
        let s = self.n_studies();
        let (_, p, _) = self.dims();
        let mut free = Vec::new();
        let mut rows: Vec<std::ops::Range<usize>> = vec![0..p; s];
        let all = FactorType::all(s);
        match *self {
            ScenarioConfig::Scenario1 { .. } => {
                let pair = FactorType::from_studies(&[0, 1]);
                for _ in 0..3 {
                    free.push(all);
                    rows.push(0..p / 2);
                }
                for _ in 0..3 {
                    free.push(pair);
                    rows.push(p / 2..p);
                }
            }
            ScenarioConfig::Scenario2 { n_partial, .. } => {
                let pair = FactorType::from_studies(&[0, 1]);
                free.extend(std::iter::repeat_n(all, 3));
                free.extend(std::iter::repeat_n(pair, n_partial));
                rows.extend(std::iter::repeat_n(0..p, 3 + n_partial));
            }
            ScenarioConfig::Scenario3 { n_partial, .. } => {
                let first8 = FactorType::from_studies(&(0..8).collect::<Vec<_>>());
                free.extend(std::iter::repeat_n(all, 3));
                free.extend(std::iter::repeat_n(first8, n_partial));
                rows.extend(std::iter::repeat_n(0..p, 3 + n_partial));
            }
            ScenarioConfig::Custom {
                n_studies,
                n_common,
                ..
            } => {
                if n_studies > 1 {
                    free.extend(std::iter::repeat_n(all, n_common));
                    rows.extend(std::iter::repeat_n(0..p, n_common));
                }
            }
        }
        (free, rows)
    }
}

/// Ground truth behind a simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTruth {
    pub lambda: DMatrix<f64>,
    pub indicator: IndicatorMatrix,
    /// S × P noise variances ψ²_sp.
    pub psi: DMatrix<f64>,
    /// Σ_s = Λ A_s Λᵀ + diag(ψ²_s).
    pub sigma: Vec<DMatrix<f64>>,
    pub config: ScenarioConfig,
    pub seed: u64,
}

impl SimTruth {
    /// Recomputes Σ_s from Λ, 𝒜 and ψ².
    pub fn covariance(
        lambda: &DMatrix<f64>,
        indicator: &IndicatorMatrix,
        psi: &DMatrix<f64>,
        s: usize,
    ) -> DMatrix<f64> {
        let cols: Vec<usize> = (0..indicator.n_factors())
            .filter(|&k| indicator.get(s, k))
            .collect();
        let sub = lambda.select_columns(&cols);
        let mut sigma = &sub * sub.transpose();
        for p in 0..sigma.nrows() {
            sigma[(p, p)] += psi[(s, p)];
        }
        sigma
    }
}

/// Exact number of nonzeros in a column with `eligible` candidate rows.
pub fn nonzero_count(eligible: usize, sparsity: f64) -> usize {
    ((1.0 - sparsity) * eligible as f64).round() as usize
}

/// Draws a dataset with `config`, then centers each study.
pub fn generate(config: &ScenarioConfig, seed: u64) -> Result<(MultiStudyDataset, SimTruth)> {
    config.validate()?;
    let mut source = RandomSource::new(seed);
    let n_studies = config.n_studies();
    let (n, p, sparsity) = config.dims();
    let (free, rows) = config.layout();
    let indicator = IndicatorMatrix::with_free_columns(n_studies, &free)?;
    let k_total = indicator.n_factors();

    let mut lambda = DMatrix::zeros(p, k_total);
    for (k, range) in rows.iter().enumerate() {
        let eligible = range.len();
        let picked = sample(&mut source, eligible, nonzero_count(eligible, sparsity)).into_vec();
        for i in picked {
            lambda[(range.start + i, k)] = 2.0 * source.uniform() - 1.0;
        }
    }
    let psi = DMatrix::from_fn(n_studies, p, |_, _| 0.5 * source.uniform());
    let sigma = (0..n_studies)
        .map(|s| SimTruth::covariance(&lambda, &indicator, &psi, s))
        .collect();
    let truth = SimTruth {
        lambda,
        indicator,
        psi,
        sigma,
        config: config.clone(),
        seed,
    };
    let raw = draw_studies(&truth, &vec![n; n_studies], &mut source)?;
    Ok((center_dataset(&raw)?, truth))
}

/// x_is = Λ A_s l_is + e_is with l_is ~ N(0, I) and e_is ~ N(0, Ψ_s), so
/// that x_is ~ N(0, Σ_s).
pub fn draw_studies(
    truth: &SimTruth,
    n_per_study: &[usize],
    source: &mut RandomSource,
) -> Result<MultiStudyDataset> {
    let n_studies = truth.indicator.n_studies();
    if n_per_study.len() != n_studies {
        return Err(Error::Dimension(format!(
            "{} sizes for {n_studies} studies",
            n_per_study.len()
        )));
    }
    let (p, k_total) = truth.lambda.shape();
    let mut studies = Vec::with_capacity(n_studies);
    for (s, &n) in n_per_study.iter().enumerate() {
        let mut masked = truth.lambda.clone();
        for k in 0..k_total {
            if !truth.indicator.get(s, k) {
                masked.column_mut(k).fill(0.0);
            }
        }
        let scores = DMatrix::from_fn(n, k_total, |_, _| source.standard_normal());
        let mut x = scores * masked.transpose();
        for j in 0..p {
            let sd = truth.psi[(s, j)].sqrt();
            for i in 0..n {
                x[(i, j)] += sd * source.standard_normal();
            }
        }
        studies.push(x);
    }
    MultiStudyDataset::with_default_names(studies)
}

/// Fresh uncentered draw of `n` subjects per study from a stored truth.
pub fn regenerate(
    truth: &SimTruth,
    n: usize,
    source: &mut RandomSource,
) -> Result<MultiStudyDataset> {
    draw_studies(truth, &vec![n; truth.indicator.n_studies()], source)
}

pub fn generate_scenario1(
    sparsity: f64,
    n: usize,
    p: usize,
    seed: u64,
) -> Result<(MultiStudyDataset, SimTruth)> {
    generate(&ScenarioConfig::Scenario1 { sparsity, n, p }, seed)
}

pub fn generate_scenario2(
    n: usize,
    p: usize,
    sparsity: f64,
    n_partial: usize,
    seed: u64,
) -> Result<(MultiStudyDataset, SimTruth)> {
    generate(
        &ScenarioConfig::Scenario2 {
            n,
            p,
            sparsity,
            n_partial,
        },
        seed,
    )
}

pub fn generate_scenario3(
    n_partial: usize,
    sparsity: f64,
    seed: u64,
) -> Result<(MultiStudyDataset, SimTruth)> {
    generate(
        &ScenarioConfig::Scenario3 {
            n_partial,
            sparsity,
        },
        seed,
    )
}
