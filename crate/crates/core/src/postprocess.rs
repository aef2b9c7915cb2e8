//! Point estimate of the indicator matrix, credible balls, and loading
//! recovery from a fixed-indicator rerun.

use std::collections::{BTreeMap, HashMap};

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ibp_log_prior, FactorType, Hyperparams, IndicatorMatrix};
use crate::sampler::ChainTrace;

/// Minimum-cost perfect matching on a square cost matrix (row i is
/// assigned column `result[i]`). O(n³) shortest augmenting path.
pub fn hungarian(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    assert!(
        cost.iter().all(|r| r.len() == n),
        "cost matrix must be square"
    );
    const INF: i64 = i64::MAX / 4;
    // 1-based potentials; way[j] is the previous column on the path
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=n {
        result[owner[j] - 1] = j - 1;
    }
    result
}

/// Flip distance between two column multisets, the shorter one padded with
/// empty columns.
pub fn column_set_distance(a: &[FactorType], b: &[FactorType]) -> u32 {
    let n = a.len().max(b.len());
    let pad = FactorType(0);
    let col = |v: &[FactorType], i: usize| v.get(i).copied().unwrap_or(pad);
    let cost: Vec<Vec<i64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| col(a, i).hamming(col(b, j)) as i64)
                .collect()
        })
        .collect();
    hungarian(&cost)
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i][j] as u32)
        .sum()
}

/// Minimum number of entry flips turning `a` into `b` over all column
/// permutations, the narrower matrix padded with zero columns.
///
/// Both matrices share the identity block, and matching it to itself is
/// always optimal, so only the free columns enter the assignment.
pub fn indicator_distance(a: &IndicatorMatrix, b: &IndicatorMatrix) -> Result<u32> {
    if a.n_studies() != b.n_studies() {
        return Err(Error::Dimension(format!(
            "indicator matrices have {} and {} studies",
            a.n_studies(),
            b.n_studies()
        )));
    }
    Ok(column_set_distance(a.free_columns(), b.free_columns()))
}

/// Symmetric matrix of pairwise flip distances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<u32>,
}

impl DistanceMatrix {
    pub fn compute(samples: &[IndicatorMatrix]) -> Result<Self> {
        let n = samples.len();
        if let Some(first) = samples.first() {
            if samples.iter().any(|m| m.n_studies() != first.n_studies()) {
                return Err(Error::Dimension(
                    "trace mixes different study counts".into(),
                ));
            }
        }
        let free: Vec<&[FactorType]> = samples.iter().map(|m| m.free_columns()).collect();
        let rows: Vec<Vec<u32>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (0..n)
                    .map(|j| {
                        if j > i {
                            column_set_distance(free[i], free[j])
                        } else {
                            0
                        }
                    })
                    .collect()
            })
            .collect();
        let mut values = vec![0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                values[i * n + j] = rows[i][j];
                values[j * n + i] = rows[i][j];
            }
        }
        Ok(DistanceMatrix { n, values })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.values[i * self.n..(i + 1) * self.n]
    }
}

/// Unique samples (by canonical free-column multiset) with their multiplicities
/// and first occurrence.
struct UniqueSamples {
    first_index: Vec<usize>,
    weight: Vec<usize>,
    of_sample: Vec<usize>,
}

fn unique_samples(samples: &[IndicatorMatrix]) -> UniqueSamples {
    let mut lookup: HashMap<Vec<FactorType>, usize> = HashMap::new();
    let mut first_index = Vec::new();
    let mut weight = Vec::new();
    let mut of_sample = Vec::with_capacity(samples.len());
    for (i, m) in samples.iter().enumerate() {
        let key = m.canonical_free();
        let id = *lookup.entry(key).or_insert_with(|| {
            first_index.push(i);
            weight.push(0);
            first_index.len() - 1
        });
        weight[id] += 1;
        of_sample.push(id);
    }
    UniqueSamples {
        first_index,
        weight,
        of_sample,
    }
}

/// Lower (inverse-CDF) empirical quantile of a multiset given as
/// (value, multiplicity) pairs.
fn lower_quantile(mut counts: Vec<(u32, u64)>, level: f64) -> Option<u32> {
    counts.sort_unstable();
    let total: u64 = counts.iter().map(|c| c.1).sum();
    if total == 0 {
        return None;
    }
    let target = ((level * total as f64).ceil() as u64).max(1);
    let mut seen = 0;
    for (value, count) in counts {
        seen += count;
        if seen >= target {
            return Some(value);
        }
    }
    None
}

/// Medoid-style point estimate with its neighbourhood radius.
#[derive(Debug, Clone, PartialEq)]
pub struct PointEstimate {
    pub indicator: IndicatorMatrix,
    /// Index of the chosen sample within the trace.
    pub sample_index: usize,
    pub radius: u32,
    /// Number of other samples within `radius`.
    pub neighbours: usize,
}

/// Picks the sample with the most other samples within radius
/// r = max(lower 0.05-quantile of off-diagonal distances, S). Ties go to the
/// fewest columns, then the highest IBP log prior, then the earliest sample.
pub fn point_estimate(samples: &[IndicatorMatrix], hyper: &Hyperparams) -> Result<PointEstimate> {
    if samples.is_empty() {
        return Err(Error::Empty("trace has no indicator samples".into()));
    }
    let n_studies = samples[0].n_studies();
    let uniq = unique_samples(samples);
    let reps: Vec<IndicatorMatrix> = uniq
        .first_index
        .iter()
        .map(|&i| samples[i].clone())
        .collect();
    let dist = DistanceMatrix::compute(&reps)?;
    let u = reps.len();

    // off-diagonal multiset over the full trace: pairs of identical samples
    // contribute zeros
    let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
    for a in 0..u {
        let wa = uniq.weight[a] as u64;
        *counts.entry(0).or_default() += wa * (wa - 1);
        for b in 0..u {
            if a != b {
                *counts.entry(dist.get(a, b)).or_default() += wa * uniq.weight[b] as u64;
            }
        }
    }
    let radius = lower_quantile(counts.into_iter().collect(), 0.05)
        .unwrap_or(0)
        .max(n_studies as u32);

    let mut best: Option<(usize, usize, usize, f64)> = None;
    for a in 0..u {
        let neighbours: usize = (0..u)
            .filter(|&b| dist.get(a, b) <= radius)
            .map(|b| uniq.weight[b])
            .sum::<usize>()
            - 1;
        let k = reps[a].n_factors();
        let prior = ibp_log_prior(&reps[a], hyper.alpha, hyper.beta)?;
        let better = match best {
            None => true,
            Some((_, bn, bk, bp)) => {
                neighbours > bn || (neighbours == bn && (k < bk || (k == bk && prior > bp)))
            }
        };
        // candidates are visited in order of first occurrence, so keeping the
        // incumbent on a full tie realises the earliest-index rule
        if better {
            best = Some((a, neighbours, k, prior));
        }
    }
    let (a, neighbours, _, _) = best.expect("nonempty");
    let sample_index = uniq.first_index[a];
    debug_assert!(uniq.of_sample[sample_index] == a);
    Ok(PointEstimate {
        indicator: samples[sample_index].clone(),
        sample_index,
        radius,
        neighbours,
    })
}

pub fn select_point_estimate(trace: &ChainTrace, hyper: &Hyperparams) -> Result<IndicatorMatrix> {
    Ok(point_estimate(&trace.indicator_samples, hyper)?.indicator)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibleBall {
    pub center: IndicatorMatrix,
    pub level: f64,
    pub epsilon_star: u32,
    pub coverage: f64,
}

/// Smallest ε whose empirical coverage reaches `level`, given the distances
/// of every sample to the centre.
pub fn credible_radius(distances: &[u32], level: f64) -> Result<(u32, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Domain(format!(
            "credible level must lie in (0, 1), got {level}"
        )));
    }
    if distances.is_empty() {
        return Err(Error::Empty("no samples for the credible ball".into()));
    }
    let mut sorted = distances.to_vec();
    sorted.sort_unstable();
    let m = sorted.len();
    // coverage(ε) = #{d ≤ ε} / M, evaluated at each distinct distance
    let mut i = 0;
    while i < m {
        let eps = sorted[i];
        while i < m && sorted[i] == eps {
            i += 1;
        }
        let coverage = i as f64 / m as f64;
        if coverage >= level {
            return Ok((eps, coverage));
        }
    }
    unreachable!("coverage reaches 1 at the largest distance")
}

pub fn credible_ball(
    trace: &ChainTrace,
    center: &IndicatorMatrix,
    level: f64,
) -> Result<CredibleBall> {
    credible_ball_from_samples(&trace.indicator_samples, center, level)
}

pub fn credible_ball_from_samples(
    samples: &[IndicatorMatrix],
    center: &IndicatorMatrix,
    level: f64,
) -> Result<CredibleBall> {
    let distances = samples
        .par_iter()
        .map(|m| indicator_distance(m, center))
        .collect::<Result<Vec<_>>>()?;
    let (epsilon_star, coverage) = credible_radius(&distances, level)?;
    Ok(CredibleBall {
        center: center.clone(),
        level,
        epsilon_star,
        coverage,
    })
}

/// Fraction of samples holding at least one column with exactly this
/// membership pattern.
pub fn ball_membership_fraction(trace: &ChainTrace, predicate: FactorType) -> Result<f64> {
    membership_fraction(&trace.indicator_samples, predicate)
}

pub fn membership_fraction(samples: &[IndicatorMatrix], predicate: FactorType) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("trace has no indicator samples".into()));
    }
    let hits = samples
        .iter()
        .filter(|m| m.columns().contains(&predicate))
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Every membership pattern seen in the trace with its sample fraction.
pub fn pattern_fractions(samples: &[IndicatorMatrix]) -> Result<BTreeMap<FactorType, f64>> {
    if samples.is_empty() {
        return Err(Error::Empty("trace has no indicator samples".into()));
    }
    let mut counts: BTreeMap<FactorType, usize> = BTreeMap::new();
    for m in samples {
        let mut seen: Vec<FactorType> = m.columns().to_vec();
        seen.sort_unstable();
        seen.dedup();
        for z in seen {
            *counts.entry(z).or_default() += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(z, c)| (z, c as f64 / samples.len() as f64))
        .collect())
}

/// Loadings recovered from a fixed-indicator trace.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoveredLoadings {
    pub lambda_hat: DMatrix<f64>,
    pub indicator: IndicatorMatrix,
    /// Elementwise median of Λ̃Λ̃ᵀ per factor type.
    pub type_covariances: BTreeMap<FactorType, DMatrix<f64>>,
}

/// Median of a slice; the mean of the two middle values for even length.
fn median(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Rank-q square root U_q N_q^{1/2} of a symmetric matrix, eigenvalues in
/// descending order, negative ones clipped, each column's first nonzero
/// entry made positive.
pub fn spectral_factor(cov: &DMatrix<f64>, q: usize) -> DMatrix<f64> {
    let p = cov.nrows();
    let eig = SymmetricEigen::new(cov.clone());
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut out = DMatrix::zeros(p, q);
    for (j, &idx) in order.iter().take(q).enumerate() {
        let scale = eig.eigenvalues[idx].max(0.0).sqrt();
        let mut col = eig.eigenvectors.column(idx) * scale;
        let tol = 1e-12 * col.amax().max(f64::MIN_POSITIVE);
        if let Some(first) = col.iter().find(|v| v.abs() > tol) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        out.column_mut(j).copy_from(&col);
    }
    out
}

/// For each factor type, takes the elementwise median over samples of
/// Λ̃Λ̃ᵀ and returns its top-q spectral square root, assembled in the
/// indicator's column order.
pub fn recover_loadings(trace: &ChainTrace) -> Result<RecoveredLoadings> {
    let samples = trace
        .lambda_samples
        .as_ref()
        .ok_or_else(|| Error::Empty("trace holds no loading samples".into()))?;
    let indicator = trace
        .config
        .fixed_indicator
        .clone()
        .or_else(|| trace.indicator_samples.first().cloned())
        .ok_or_else(|| Error::Empty("trace has no indicator".into()))?;
    recover_loadings_from_samples(samples, &indicator)
}

pub fn recover_loadings_from_samples(
    samples: &[DMatrix<f64>],
    indicator: &IndicatorMatrix,
) -> Result<RecoveredLoadings> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Empty("no loading samples".into()))?;
    let (p, k) = first.shape();
    if k != indicator.n_factors() {
        return Err(Error::Dimension(format!(
            "loading samples have {k} columns, indicator has {}",
            indicator.n_factors()
        )));
    }
    if samples.iter().any(|l| l.shape() != (p, k)) {
        return Err(Error::Dimension("loading samples differ in shape".into()));
    }
    let mut lambda_hat = DMatrix::zeros(p, k);
    let mut type_covariances = BTreeMap::new();
    for (pattern, cols) in indicator.types() {
        let covs: Vec<DMatrix<f64>> = samples
            .par_iter()
            .map(|l| {
                let sub = l.select_columns(&cols);
                &sub * sub.transpose()
            })
            .collect();
        let med = DMatrix::from_fn(p, p, |i, j| {
            if j < i {
                return 0.0;
            }
            let mut v: Vec<f64> = covs.iter().map(|c| c[(i, j)]).collect();
            median(&mut v)
        });
        let med = DMatrix::from_fn(p, p, |i, j| if j >= i { med[(i, j)] } else { med[(j, i)] });
        let factor = spectral_factor(&med, cols.len());
        for (j, &c) in cols.iter().enumerate() {
            lambda_hat.column_mut(c).copy_from(&factor.column(j));
        }
        type_covariances.insert(pattern, med);
    }
    Ok(RecoveredLoadings {
        lambda_hat,
        indicator: indicator.clone(),
        type_covariances,
    })
}
