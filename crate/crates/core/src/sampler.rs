//! Gibbs sampler over loadings, scores, shrinkage, noise and the
//! factor-sharing indicator matrix.
//!
//! One sweep runs, in order: the indicator update for every non-singleton
//! entry, a birth/death move per study for the columns it owns alone
//! (plus all-ones columns when sharing is constrained), pruning, and the
//! conjugate updates for Λ, the scores, ω, δ and ψ⁻².
//!
//! Free columns are kept in an ordered list. Under the prior the number of
//! free columns with membership `z` is Poisson with rate α β B(|z|, S − |z| + β),
//! and each column carries its own δ, so τ_k is the product of δ over the
//! columns up to and including k. The birth/death move inserts new columns at
//! uniformly random positions, integrates their loadings out, and accounts for
//! the change of τ on the columns that follow them.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::kernels::{
    draw_bernoulli_log_odds, draw_gamma_floored, draw_poisson, FactorizedPrecision, RandomSource,
};
use crate::model::{
    FactorColumn, FactorType, Hyperparams, IndicatorMatrix, ModelState, MultiStudyDataset,
};

/// Which membership patterns free columns may take.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SharingMode {
    /// Any nonempty subset of studies.
    #[default]
    Free,
    /// Only all-ones or single-study columns.
    CommonAndSpecificOnly,
}

impl SharingMode {
    pub fn allows(self, pattern: FactorType, n_studies: usize) -> bool {
        match self {
            SharingMode::Free => !pattern.is_empty(),
            SharingMode::CommonAndSpecificOnly => {
                pattern.count() == 1 || pattern == FactorType::all(n_studies)
            }
        }
    }

    /// Patterns that receive a birth/death move each sweep.
    fn birth_patterns(self, n_studies: usize) -> Vec<FactorType> {
        let mut out: Vec<FactorType> = (0..n_studies).map(FactorType::single).collect();
        if self == SharingMode::CommonAndSpecificOnly && n_studies > 1 {
            out.push(FactorType::all(n_studies));
        }
        out
    }
}

/// How the free indicator entries are resampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndicatorMove {
    /// Each entry from its full conditional given the current scores.
    #[default]
    Conditional,
    /// Each entry jointly with study s's scores on factor k, the scores
    /// integrated out of the odds and then redrawn.
    Collapsed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    #[serde(default)]
    pub fixed_indicator: Option<IndicatorMatrix>,
    #[serde(default)]
    pub sharing: SharingMode,
    #[serde(default)]
    pub indicator_move: IndicatorMove,
    pub seed: u64,
    /// Hard cap on the number of free (non-identity) columns.
    #[serde(default = "default_max_free")]
    pub max_free_factors: usize,
    /// Progress logging period, in iterations (0 disables).
    #[serde(default = "default_log_every")]
    pub log_every: usize,
}

fn default_max_free() -> usize {
    30
}

fn default_log_every() -> usize {
    100
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            n_iterations: 10_000,
            burn_in: 8_000,
            thin: 1,
            fixed_indicator: None,
            sharing: SharingMode::Free,
            indicator_move: IndicatorMove::Conditional,
            seed: 0,
            max_free_factors: default_max_free(),
            log_every: default_log_every(),
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iterations == 0 {
            return Err(Error::Domain("n_iterations must be positive".into()));
        }
        if self.burn_in >= self.n_iterations {
            return Err(Error::Domain(format!(
                "burn_in ({}) must be smaller than n_iterations ({})",
                self.burn_in, self.n_iterations
            )));
        }
        if self.thin == 0 || self.thin > self.n_iterations - self.burn_in {
            return Err(Error::Domain(format!(
                "thin must be in 1..={}, got {}",
                self.n_iterations - self.burn_in,
                self.thin
            )));
        }
        Ok(())
    }

    /// Number of stored samples: ⌊(n_iterations − burn_in) / thin⌋.
    pub fn n_samples(&self) -> usize {
        (self.n_iterations - self.burn_in) / self.thin
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    pub n_factors: usize,
    pub log_likelihood: f64,
}

/// Stored output of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub config: ChainConfig,
    pub n_studies: usize,
    pub n_features: usize,
    /// Post-burn-in, thinned indicator samples.
    pub indicator_samples: Vec<IndicatorMatrix>,
    /// Iteration index (0-based) of each stored sample.
    pub sample_iterations: Vec<usize>,
    /// Λ draws, present only for fixed-indicator runs.
    pub lambda_samples: Option<Vec<DMatrix<f64>>>,
    /// S × P posterior mean of the noise variances ψ², fixed-indicator runs only.
    pub noise_variance_mean: Option<DMatrix<f64>>,
    /// One entry per iteration.
    pub diagnostics: Vec<IterationDiagnostics>,
}

impl ChainTrace {
    pub fn is_empty(&self) -> bool {
        self.indicator_samples.is_empty()
    }

    pub fn len(&self) -> usize {
        self.indicator_samples.len()
    }
}

/// What a birth/death proposal did.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoveOutcome {
    NoProposal,
    Born(usize),
    Died(usize),
    Rejected,
    CapReached,
}

fn tau_of(delta: &[f64]) -> Vec<f64> {
    crate::model::prefix_products(delta)
}

/// Residual X_s − l_s A_s Λᵀ with the columns in `skip` left out.
fn residual_excluding(
    state: &ModelState,
    data: &MultiStudyDataset,
    s: usize,
    skip: &[usize],
) -> DMatrix<f64> {
    let mut masked = state.masked_lambda(s);
    for &k in skip {
        masked.column_mut(k).fill(0.0);
    }
    data.study(s) - &state.scores[s] * masked.transpose()
}

fn entry_log_likelihood_ratio(
    residual: &DMatrix<f64>,
    scores: &DMatrix<f64>,
    lambda: &DMatrix<f64>,
    psi_inv_row: &[f64],
    k: usize,
    currently_on: bool,
) -> f64 {
    let l_k = scores.column(k);
    let ll = l_k.norm_squared();
    let proj = residual.tr_mul(&l_k);
    let mut linear = 0.0;
    let mut quad = 0.0;
    for (p, &psi) in psi_inv_row.iter().enumerate() {
        let lam = lambda[(p, k)];
        let r0 = proj[p] + if currently_on { ll * lam } else { 0.0 };
        linear += psi * lam * r0;
        quad += psi * lam * lam;
    }
    linear - 0.5 * ll * quad
}

/// Full-conditional log-odds of entry (s, k) being 1, with k a free column
/// that some other study also expresses.
pub fn indicator_log_odds(
    state: &ModelState,
    data: &MultiStudyDataset,
    hyper: &Hyperparams,
    s: usize,
    k: usize,
) -> Result<f64> {
    let n_studies = state.indicator.n_studies();
    if k < n_studies || k >= state.n_factors() {
        return Err(Error::Domain(format!("column {k} is not a free column")));
    }
    let col = state.indicator.column(k);
    let m_minus = col.with(s, false).count() as f64;
    let prior = if m_minus == 0.0 {
        f64::NEG_INFINITY
    } else {
        m_minus.ln() - (hyper.beta + n_studies as f64 - 1.0 - m_minus).ln()
    };
    let resid = state.residual(data, s);
    let psi: Vec<f64> = state.psi_inv.row(s).iter().copied().collect();
    Ok(prior
        + entry_log_likelihood_ratio(
            &resid,
            &state.scores[s],
            &state.lambda,
            &psi,
            k,
            col.contains(s),
        ))
}

/// Resamples every free indicator entry (s, k) whose column is also
/// expressed by another study. Columns owned by s alone are left to the
/// birth/death move; the identity block is never touched.
pub fn update_indicators(
    state: &mut ModelState,
    data: &MultiStudyDataset,
    hyper: &Hyperparams,
    sharing: SharingMode,
    source: &mut RandomSource,
) -> Result<()> {
    state.check_data(data)?;
    let n_studies = state.indicator.n_studies();
    let k_total = state.n_factors();
    for s in 0..n_studies {
        let mut resid = state.residual(data, s);
        let psi: Vec<f64> = state.psi_inv.row(s).iter().copied().collect();
        for k in n_studies..k_total {
            let col = state.indicator.column(k);
            let m_minus = col.with(s, false).count();
            if m_minus == 0 {
                continue;
            }
            let on = col.with(s, true);
            let off = col.with(s, false);
            if !sharing.allows(on, n_studies) || !sharing.allows(off, n_studies) {
                continue;
            }
            let current = col.contains(s);
            let m = m_minus as f64;
            let prior = m.ln() - (hyper.beta + n_studies as f64 - 1.0 - m).ln();
            let lr = entry_log_likelihood_ratio(
                &resid,
                &state.scores[s],
                &state.lambda,
                &psi,
                k,
                current,
            );
            let next = draw_bernoulli_log_odds(source, prior + lr)?;
            if next != current {
                state.indicator.set_column(k, if next { on } else { off });
                let sign = if next { -1.0 } else { 1.0 };
                let outer = state.scores[s].column(k) * state.lambda.column(k).transpose();
                resid += outer * sign;
            }
        }
    }
    Ok(())
}

/// Like [`update_indicators`], but each entry (s, k) is drawn jointly with
/// the scores l_{·s,k}: with r_i the residual without factor k,
/// c = λ_kᵀ Ψ_s⁻¹ λ_k and b_i = λ_kᵀ Ψ_s⁻¹ r_i, the log-likelihood ratio is
/// Σ_i (b_i² / (1 + c) − ln(1 + c)) / 2, and the scores are then redrawn
/// from N(b_i / (1 + c), 1 / (1 + c)) if the entry is on, N(0, 1) if off.
pub fn update_indicators_collapsed(
    state: &mut ModelState,
    data: &MultiStudyDataset,
    hyper: &Hyperparams,
    sharing: SharingMode,
    source: &mut RandomSource,
) -> Result<()> {
    state.check_data(data)?;
    let n_studies = state.indicator.n_studies();
    let k_total = state.n_factors();
    for s in 0..n_studies {
        let mut resid = state.residual(data, s);
        let n = resid.nrows();
        for k in n_studies..k_total {
            let col = state.indicator.column(k);
            let m_minus = col.with(s, false).count();
            if m_minus == 0 {
                continue;
            }
            let on = col.with(s, true);
            let off = col.with(s, false);
            if !sharing.allows(on, n_studies) || !sharing.allows(off, n_studies) {
                continue;
            }
            let current = col.contains(s);
            if current {
                let outer = state.scores[s].column(k) * state.lambda.column(k).transpose();
                resid += outer;
            }
            let weighted = DVector::from_fn(state.lambda.nrows(), |p, _| {
                state.lambda[(p, k)] * state.psi_inv[(s, p)]
            });
            let c = weighted.dot(&state.lambda.column(k));
            let b = &resid * &weighted;
            let lr = 0.5 * (b.norm_squared() / (1.0 + c) - n as f64 * c.ln_1p());
            let m = m_minus as f64;
            let prior = m.ln() - (hyper.beta + n_studies as f64 - 1.0 - m).ln();
            let next = draw_bernoulli_log_odds(source, prior + lr)?;
            if next {
                let sd = (1.0 + c).recip().sqrt();
                for i in 0..n {
                    state.scores[s][(i, k)] = b[i] / (1.0 + c) + sd * source.standard_normal();
                }
                let outer = state.scores[s].column(k) * state.lambda.column(k).transpose();
                resid -= outer;
            } else {
                for i in 0..n {
                    state.scores[s][(i, k)] = source.standard_normal();
                }
            }
            if next != current {
                state.indicator.set_column(k, if next { on } else { off });
            }
        }
    }
    Ok(())
}

/// Per-feature posterior pieces for a block of columns whose loadings are
/// integrated out.
struct MarginalBlock {
    columns: Vec<usize>,
    per_feature: Vec<(FactorizedPrecision, DVector<f64>)>,
    log_ratio: f64,
}

/// Log of the likelihood ratio with and without the columns `block`, their
/// loadings integrated against Normal(0, diag(1 / (ω τ))).
fn marginal_block(
    state: &ModelState,
    data: &MultiStudyDataset,
    block: &[usize],
) -> Result<MarginalBlock> {
    let q = block.len();
    let p_count = state.lambda.nrows();
    let pattern = state.indicator.column(block[0]);
    debug_assert!(block.iter().all(|&k| state.indicator.column(k) == pattern));
    let tau = state.tau();
    let studies = pattern.studies();

    let mut grams = Vec::with_capacity(studies.len());
    let mut cross = Vec::with_capacity(studies.len());
    for &s in &studies {
        let resid = residual_excluding(state, data, s, block);
        let l_block = state.scores[s].select_columns(block);
        grams.push(l_block.tr_mul(&l_block));
        cross.push(l_block.tr_mul(&resid));
    }

    let mut per_feature = Vec::with_capacity(p_count);
    let mut log_ratio = 0.0;
    for p in 0..p_count {
        let mut prec = DMatrix::<f64>::zeros(q, q);
        let mut log_det_prior = 0.0;
        for (j, &k) in block.iter().enumerate() {
            let d = state.omega[(p, k)] * tau[k];
            prec[(j, j)] = d;
            log_det_prior += d.ln();
        }
        let mut b = DVector::<f64>::zeros(q);
        for (idx, &s) in studies.iter().enumerate() {
            let psi = state.psi_inv[(s, p)];
            prec += &grams[idx] * psi;
            b += cross[idx].column(p) * psi;
        }
        let factor = FactorizedPrecision::new(prec)?;
        log_ratio += 0.5 * log_det_prior - 0.5 * factor.log_determinant()
            + 0.5 * factor.quadratic_inverse(&b);
        per_feature.push((factor, b));
    }
    Ok(MarginalBlock {
        columns: block.to_vec(),
        per_feature,
        log_ratio,
    })
}

/// Log marginal likelihood ratio for adding the columns `block` of `state`
/// (which must already be present, with any loadings) against the same
/// state without them.
pub fn birth_log_likelihood_ratio(
    state: &ModelState,
    data: &MultiStudyDataset,
    block: &[usize],
) -> Result<f64> {
    if block.is_empty() {
        return Ok(0.0);
    }
    Ok(marginal_block(state, data, block)?.log_ratio)
}

/// Change in the log prior density of the loadings of `kept` columns when
/// their τ moves from `tau_before` to `tau_after`.
fn loading_prior_shift(
    state: &ModelState,
    kept: &[(usize, usize)],
    tau_before: &[f64],
    tau_after: &[f64],
) -> f64 {
    let p = state.lambda.nrows() as f64;
    kept.iter()
        .filter(|(before, after)| tau_before[*before] != tau_after[*after])
        .map(|&(before, after)| {
            let weighted: f64 = state
                .omega
                .column(after)
                .iter()
                .zip(state.lambda.column(after).iter())
                .map(|(w, l)| w * l * l)
                .sum();
            0.5 * p * (tau_after[after] / tau_before[before]).ln()
                - 0.5 * (tau_after[after] - tau_before[before]) * weighted
        })
        .sum()
}

fn ln_choose(n: usize, k: usize) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)
}

/// Uniformly random k-subset of 0..n, ascending.
fn random_subset(source: &mut RandomSource, n: usize, k: usize) -> Vec<usize> {
    let mut picked = rand::seq::index::sample(source, n, k).into_vec();
    picked.sort_unstable();
    picked
}

/// Log acceptance ratio of moving from `small` to `large`, where `large`
/// has `block` (positions in `large`) added; `kept` maps each column of
/// `small` to its position in `large`.
fn birth_log_acceptance(
    small: &ModelState,
    large: &ModelState,
    data: &MultiStudyDataset,
    hyper: &Hyperparams,
    pattern: FactorType,
    block: &[usize],
) -> Result<(f64, MarginalBlock)> {
    let n_studies = large.indicator.n_studies();
    let k = block.len();
    let rate = hyper.pattern_rate(pattern, n_studies);
    let same_pattern_after = large
        .indicator
        .free_columns()
        .iter()
        .filter(|c| **c == pattern)
        .count();

    let mut kept = Vec::with_capacity(small.n_factors());
    let mut b = 0;
    for pos in 0..large.n_factors() {
        if b < k && block[b] == pos {
            b += 1;
        } else {
            kept.push((pos - b, pos));
        }
    }
    let shift = loading_prior_shift(large, &kept, &small.tau(), &large.tau());
    let marginal = marginal_block(large, data, block)?;
    let log_prior =
        k as f64 * rate.ln() - ln_gamma(k as f64 + 1.0) - ln_choose(same_pattern_after, k);
    Ok((log_prior + shift + marginal.log_ratio, marginal))
}

fn prior_factor(
    pattern: FactorType,
    n_features: usize,
    n_per_study: &[usize],
    hyper: &Hyperparams,
    source: &mut RandomSource,
) -> Result<FactorColumn> {
    let delta = draw_gamma_floored(source, hyper.a2, 1.0)?;
    let omega = (0..n_features)
        .map(|_| draw_gamma_floored(source, hyper.nu / 2.0, hyper.nu / 2.0))
        .collect::<Result<Vec<_>>>()?;
    let scores = n_per_study
        .iter()
        .map(|&n| DVector::from_fn(n, |_, _| source.standard_normal()))
        .collect();
    Ok(FactorColumn {
        pattern,
        lambda: DVector::zeros(n_features),
        omega: DVector::from_vec(omega),
        delta,
        scores,
    })
}

/// Birth/death move for free columns with membership `pattern`.
///
/// A block size k ~ Poisson(rate of `pattern`) is drawn; k = 0 leaves the
/// state alone. Otherwise, with equal probability, k new columns are born
/// at random positions (ω, δ and scores from their priors, loadings
/// integrated out and then drawn from their conditional posterior), or k
/// existing columns with this pattern are proposed for removal.
pub fn birth_death_move(
    state: &mut ModelState,
    data: &MultiStudyDataset,
    hyper: &Hyperparams,
    pattern: FactorType,
    max_free: usize,
    source: &mut RandomSource,
) -> Result<MoveOutcome> {
    let n_studies = state.indicator.n_studies();
    let rate = hyper.pattern_rate(pattern, n_studies);
    let k = draw_poisson(source, rate)? as usize;
    if k == 0 {
        return Ok(MoveOutcome::NoProposal);
    }
    let n_free = state.indicator.n_free();
    let birth = source.uniform() < 0.5;
    if birth {
        if n_free + k > max_free {
            log::warn!("birth of {k} factor(s) rejected: free factor cap {max_free} reached");
            return Ok(MoveOutcome::CapReached);
        }
        let n_per_study: Vec<usize> = (0..n_studies).map(|s| data.n_subjects(s)).collect();
        let slots = random_subset(source, n_free + k, k);
        let mut proposal = state.clone();
        let block: Vec<usize> = slots.iter().map(|&j| n_studies + j).collect();
        for &pos in &block {
            let factor = prior_factor(pattern, data.n_features(), &n_per_study, hyper, source)?;
            proposal.insert_factor(pos, factor);
        }
        let (log_accept, marginal) =
            birth_log_acceptance(state, &proposal, data, hyper, pattern, &block)?;
        if source.uniform().ln() < log_accept {
            for (p, (factor, b)) in marginal.per_feature.iter().enumerate() {
                let draw = factor.draw(source, b);
                for (j, &col) in marginal.columns.iter().enumerate() {
                    proposal.lambda[(p, col)] = draw[j];
                }
            }
            *state = proposal;
            Ok(MoveOutcome::Born(k))
        } else {
            Ok(MoveOutcome::Rejected)
        }
    } else {
        let candidates: Vec<usize> = (n_studies..state.n_factors())
            .filter(|&c| state.indicator.column(c) == pattern)
            .collect();
        if candidates.len() < k {
            return Ok(MoveOutcome::NoProposal);
        }
        let picked = random_subset(source, candidates.len(), k);
        let block: Vec<usize> = picked.iter().map(|&i| candidates[i]).collect();
        let mut reduced = state.clone();
        for &pos in block.iter().rev() {
            reduced.remove_factor(pos);
        }
        let (log_birth, _) = birth_log_acceptance(&reduced, state, data, hyper, pattern, &block)?;
        if source.uniform().ln() < -log_birth {
            *state = reduced;
            Ok(MoveOutcome::Died(k))
        } else {
            Ok(MoveOutcome::Rejected)
        }
    }
}

/// Birth/death of factors owned by study `s` alone.
pub fn propose_new_factors(
    state: &mut ModelState,
    data: &MultiStudyDataset,
    hyper: &Hyperparams,
    source: &mut RandomSource,
    s: usize,
    max_free: usize,
) -> Result<MoveOutcome> {
    if s >= state.indicator.n_studies() {
        return Err(Error::Domain(format!("study index {s} out of range")));
    }
    birth_death_move(state, data, hyper, FactorType::single(s), max_free, source)
}

/// Drops free columns that no study expresses. Returns how many were removed.
pub fn prune_empty_factors(state: &mut ModelState) -> usize {
    let n_studies = state.indicator.n_studies();
    let mut removed = 0;
    let mut k = state.n_factors();
    while k > n_studies {
        k -= 1;
        if state.indicator.column(k).is_empty() {
            state.remove_factor(k);
            removed += 1;
        }
    }
    removed
}

/// Draws each row of Λ from its conditional normal.
pub fn update_loadings(
    state: &mut ModelState,
    data: &MultiStudyDataset,
    source: &mut RandomSource,
) -> Result<()> {
    state.check_data(data)?;
    let k_total = state.n_factors();
    let n_studies = state.indicator.n_studies();
    let tau = state.tau();
    let mut grams = Vec::with_capacity(n_studies);
    let mut cross = Vec::with_capacity(n_studies);
    for s in 0..n_studies {
        let z: Vec<f64> = state.indicator.row(s).iter().map(|&v| v as f64).collect();
        let mut g = state.scores[s].tr_mul(&state.scores[s]);
        let mut c = state.scores[s].tr_mul(data.study(s));
        for a in 0..k_total {
            c.row_mut(a).scale_mut(z[a]);
            for b in 0..k_total {
                g[(a, b)] *= z[a] * z[b];
            }
        }
        grams.push(g);
        cross.push(c);
    }
    for p in 0..state.lambda.nrows() {
        let mut prec = DMatrix::<f64>::zeros(k_total, k_total);
        for k in 0..k_total {
            prec[(k, k)] = state.omega[(p, k)] * tau[k];
        }
        let mut b = DVector::<f64>::zeros(k_total);
        for s in 0..n_studies {
            let psi = state.psi_inv[(s, p)];
            prec += &grams[s] * psi;
            b += cross[s].column(p) * psi;
        }
        let draw = FactorizedPrecision::new(prec)?.draw(source, &b);
        state.lambda.row_mut(p).copy_from(&draw.transpose());
    }
    Ok(())
}

/// Draws every subject's score vector from its conditional normal; entries
/// of factors the study does not express come out as prior draws.
pub fn update_scores(
    state: &mut ModelState,
    data: &MultiStudyDataset,
    source: &mut RandomSource,
) -> Result<()> {
    state.check_data(data)?;
    let k_total = state.n_factors();
    for s in 0..state.indicator.n_studies() {
        let masked = state.masked_lambda(s);
        let mut weighted = masked.transpose();
        for p in 0..weighted.ncols() {
            weighted.column_mut(p).scale_mut(state.psi_inv[(s, p)]);
        }
        let prec = DMatrix::identity(k_total, k_total) + &weighted * &masked;
        let factor = FactorizedPrecision::new(prec)?;
        let linear = &weighted * data.study(s).transpose();
        for i in 0..data.n_subjects(s) {
            let draw = factor.draw(source, &linear.column(i).into_owned());
            state.scores[s].row_mut(i).copy_from(&draw.transpose());
        }
    }
    Ok(())
}

/// ω_pk ~ Γ((ν + 1)/2, (ν + τ_k Λ_pk²)/2).
pub fn update_local_shrinkage(
    state: &mut ModelState,
    hyper: &Hyperparams,
    source: &mut RandomSource,
) -> Result<()> {
    let tau = state.tau();
    let shape = (hyper.nu + 1.0) / 2.0;
    for k in 0..state.n_factors() {
        for p in 0..state.lambda.nrows() {
            let lam = state.lambda[(p, k)];
            state.omega[(p, k)] =
                draw_gamma_floored(source, shape, (hyper.nu + tau[k] * lam * lam) / 2.0)?;
        }
    }
    Ok(())
}

/// Shape and rate of the conditional of δ_l given everything else.
pub fn global_shrinkage_conditional(
    state: &ModelState,
    hyper: &Hyperparams,
    l: usize,
) -> (f64, f64) {
    let k_total = state.n_factors();
    let p = state.lambda.nrows() as f64;
    let tau = state.tau();
    let base = if l == 0 { hyper.a1 } else { hyper.a2 };
    let shape = base + 0.5 * p * (k_total - l) as f64;
    let mut rate = 1.0;
    for k in l..k_total {
        let weighted: f64 = state
            .omega
            .column(k)
            .iter()
            .zip(state.lambda.column(k).iter())
            .map(|(w, x)| w * x * x)
            .sum();
        rate += 0.5 * tau[k] / state.delta[l] * weighted;
    }
    (shape, rate)
}

/// Sequential scan δ_1, δ_2, …, δ_K, each conditioning on the latest values.
pub fn update_global_shrinkage(
    state: &mut ModelState,
    hyper: &Hyperparams,
    source: &mut RandomSource,
) -> Result<()> {
    for l in 0..state.n_factors() {
        let (shape, rate) = global_shrinkage_conditional(state, hyper, l);
        state.delta[l] = draw_gamma_floored(source, shape, rate)?;
    }
    Ok(())
}

/// ψ_sp⁻² ~ Γ(a_ψ + n_s/2, b_ψ + ½ Σ_i residual²).
pub fn update_noise(
    state: &mut ModelState,
    data: &MultiStudyDataset,
    hyper: &Hyperparams,
    source: &mut RandomSource,
) -> Result<()> {
    state.check_data(data)?;
    for s in 0..state.indicator.n_studies() {
        let resid = state.residual(data, s);
        let shape = hyper.a_psi + data.n_subjects(s) as f64 / 2.0;
        for p in 0..resid.ncols() {
            let rate = hyper.b_psi + 0.5 * resid.column(p).norm_squared();
            state.psi_inv[(s, p)] = draw_gamma_floored(source, shape, rate)?;
        }
    }
    Ok(())
}

/// Draws every parameter except the indicator from its prior.
pub fn sample_parameters_from_prior(
    indicator: IndicatorMatrix,
    n_per_study: &[usize],
    n_features: usize,
    hyper: &Hyperparams,
    source: &mut RandomSource,
) -> Result<ModelState> {
    let n_studies = indicator.n_studies();
    if n_per_study.len() != n_studies {
        return Err(Error::Dimension(format!(
            "{} study sizes for {} studies",
            n_per_study.len(),
            n_studies
        )));
    }
    let k_total = indicator.n_factors();
    let delta = (0..k_total)
        .map(|l| draw_gamma_floored(source, if l == 0 { hyper.a1 } else { hyper.a2 }, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let mut omega = DMatrix::zeros(n_features, k_total);
    for k in 0..k_total {
        for p in 0..n_features {
            omega[(p, k)] = draw_gamma_floored(source, hyper.nu / 2.0, hyper.nu / 2.0)?;
        }
    }
    let tau = tau_of(&delta);
    let mut lambda = DMatrix::zeros(n_features, k_total);
    for k in 0..k_total {
        for p in 0..n_features {
            lambda[(p, k)] = source.standard_normal() / (omega[(p, k)] * tau[k]).sqrt();
        }
    }
    let mut psi_inv = DMatrix::zeros(n_studies, n_features);
    for s in 0..n_studies {
        for p in 0..n_features {
            psi_inv[(s, p)] = draw_gamma_floored(source, hyper.a_psi, hyper.b_psi)?;
        }
    }
    let scores = n_per_study
        .iter()
        .map(|&n| DMatrix::from_fn(n, k_total, |_, _| source.standard_normal()))
        .collect();
    Ok(ModelState {
        lambda,
        scores,
        psi_inv,
        omega,
        delta,
        indicator,
    })
}

/// Draws the free columns from the ordered IBP prior restricted to the
/// patterns `sharing` allows and to at most `max_free` columns.
pub fn sample_indicator_from_prior(
    n_studies: usize,
    hyper: &Hyperparams,
    sharing: SharingMode,
    max_free: usize,
    source: &mut RandomSource,
) -> Result<IndicatorMatrix> {
    if n_studies > 20 {
        return Err(Error::Domain(
            "prior indicator sampling enumerates patterns; S must be <= 20".into(),
        ));
    }
    let patterns: Vec<(FactorType, f64)> = (1..(1u64 << n_studies))
        .map(FactorType)
        .filter(|&z| sharing.allows(z, n_studies))
        .map(|z| (z, hyper.pattern_rate(z, n_studies)))
        .collect();
    let total: f64 = patterns.iter().map(|(_, r)| r).sum();
    let count = loop {
        let c = draw_poisson(source, total)? as usize;
        if c <= max_free {
            break c;
        }
    };
    let mut free = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u = source.uniform() * total;
        let mut chosen = patterns[patterns.len() - 1].0;
        for &(z, r) in &patterns {
            if u < r {
                chosen = z;
                break;
            }
            u -= r;
        }
        free.push(chosen);
    }
    IndicatorMatrix::with_free_columns(n_studies, &free)
}

/// Generates data from the model given every parameter.
pub fn simulate_data(state: &ModelState, source: &mut RandomSource) -> Result<MultiStudyDataset> {
    let p_count = state.lambda.nrows();
    let studies = (0..state.indicator.n_studies())
        .map(|s| {
            let mut x = &state.scores[s] * state.masked_lambda(s).transpose();
            for p in 0..p_count {
                let sd = 1.0 / state.psi_inv[(s, p)].sqrt();
                for i in 0..x.nrows() {
                    x[(i, p)] += sd * source.standard_normal();
                }
            }
            x
        })
        .collect();
    MultiStudyDataset::with_default_names(studies)
}

/// Starting state: the identity block plus ⌈S/2⌉ + 1 free columns with
/// Bernoulli(1/2) memberships (redrawn until nonempty and allowed), every
/// other parameter drawn from its prior.
pub fn initial_state(
    data: &MultiStudyDataset,
    hyper: &Hyperparams,
    config: &ChainConfig,
    source: &mut RandomSource,
) -> Result<ModelState> {
    let n_studies = data.n_studies();
    let indicator = match &config.fixed_indicator {
        Some(fixed) => fixed.clone(),
        None => {
            let n_free = (n_studies.div_ceil(2) + 1).min(config.max_free_factors);
            let mut free = Vec::with_capacity(n_free);
            while free.len() < n_free {
                let mut z = FactorType(0);
                for s in 0..n_studies {
                    if source.uniform() < 0.5 {
                        z = z.with(s, true);
                    }
                }
                if config.sharing.allows(z, n_studies) {
                    free.push(z);
                }
            }
            IndicatorMatrix::with_free_columns(n_studies, &free)?
        }
    };
    let n_per_study: Vec<usize> = (0..n_studies).map(|s| data.n_subjects(s)).collect();
    sample_parameters_from_prior(indicator, &n_per_study, data.n_features(), hyper, source)
}

fn annotate<T>(result: Result<T>, iteration: usize, step: &'static str) -> Result<T> {
    result.map_err(|e| Error::Step {
        iteration,
        step,
        source: Box::new(e),
    })
}

/// One full sweep under `config`. With a fixed indicator the indicator
/// update, births and pruning are skipped.
pub fn gibbs_sweep(
    state: &mut ModelState,
    data: &MultiStudyDataset,
    hyper: &Hyperparams,
    config: &ChainConfig,
    source: &mut RandomSource,
    iteration: usize,
) -> Result<()> {
    let sharing = config.sharing;
    if config.fixed_indicator.is_none() {
        let step = match config.indicator_move {
            IndicatorMove::Conditional => update_indicators(state, data, hyper, sharing, source),
            IndicatorMove::Collapsed => {
                update_indicators_collapsed(state, data, hyper, sharing, source)
            }
        };
        annotate(step, iteration, "update_indicators")?;
        for pattern in sharing.birth_patterns(state.indicator.n_studies()) {
            let step =
                birth_death_move(state, data, hyper, pattern, config.max_free_factors, source);
            annotate(step, iteration, "propose_new_factors")?;
        }
        prune_empty_factors(state);
    }
    annotate(
        update_loadings(state, data, source),
        iteration,
        "update_loadings",
    )?;
    annotate(
        update_scores(state, data, source),
        iteration,
        "update_scores",
    )?;
    annotate(
        update_local_shrinkage(state, hyper, source),
        iteration,
        "update_local_shrinkage",
    )?;
    annotate(
        update_global_shrinkage(state, hyper, source),
        iteration,
        "update_global_shrinkage",
    )?;
    annotate(
        update_noise(state, data, hyper, source),
        iteration,
        "update_noise",
    )?;
    Ok(())
}

/// Runs one chain and returns the stored samples.
pub fn run_chain(
    data: &MultiStudyDataset,
    hyper: &Hyperparams,
    config: &ChainConfig,
    init: Option<ModelState>,
) -> Result<ChainTrace> {
    config.validate()?;
    hyper.validate()?;
    if !data.is_centered() {
        return Err(Error::Domain(
            "data must be centered before sampling".into(),
        ));
    }
    let n_studies = data.n_studies();
    if let Some(fixed) = &config.fixed_indicator {
        fixed.validate()?;
        if fixed.n_studies() != n_studies {
            return Err(Error::Dimension(format!(
                "fixed indicator has {} studies, data has {n_studies}",
                fixed.n_studies()
            )));
        }
    }
    let mut source = RandomSource::new(config.seed);
    let mut state = match init {
        Some(state) => {
            state.validate()?;
            state.check_data(data)?;
            if let Some(fixed) = &config.fixed_indicator {
                if &state.indicator != fixed {
                    return Err(Error::Invariant(
                        "initial state disagrees with the fixed indicator".into(),
                    ));
                }
            }
            state
        }
        None => initial_state(data, hyper, config, &mut source)?,
    };
    let fixed = config.fixed_indicator.is_some();

    let n_samples = config.n_samples();
    let mut indicator_samples = Vec::with_capacity(n_samples);
    let mut sample_iterations = Vec::with_capacity(n_samples);
    let mut lambda_samples = fixed.then(|| Vec::with_capacity(n_samples));
    let mut noise_sum = fixed.then(|| DMatrix::<f64>::zeros(n_studies, data.n_features()));
    let mut diagnostics = Vec::with_capacity(config.n_iterations);

    for it in 0..config.n_iterations {
        gibbs_sweep(&mut state, data, hyper, config, &mut source, it)?;
        debug_assert!(state.validate().is_ok());
        let log_likelihood = state.log_likelihood(data);
        if !log_likelihood.is_finite() {
            return Err(Error::Step {
                iteration: it,
                step: "log_likelihood",
                source: Box::new(Error::Numerical("log-likelihood is not finite".into())),
            });
        }
        diagnostics.push(IterationDiagnostics {
            iteration: it,
            n_factors: state.n_factors(),
            log_likelihood,
        });
        if config.log_every > 0 && (it + 1) % config.log_every == 0 {
            log::info!(
                "seed {} iteration {}: K = {}, log-likelihood = {:.3}",
                config.seed,
                it + 1,
                state.n_factors(),
                log_likelihood
            );
        }
        if it >= config.burn_in && (it - config.burn_in + 1).is_multiple_of(config.thin) {
            indicator_samples.push(state.indicator.clone());
            sample_iterations.push(it);
            if let Some(samples) = lambda_samples.as_mut() {
                samples.push(state.lambda.clone());
            }
            if let Some(sum) = noise_sum.as_mut() {
                *sum += state.psi_inv.map(|v| 1.0 / v);
            }
        }
    }
    let noise_variance_mean = noise_sum.map(|sum| sum / indicator_samples.len() as f64);
    Ok(ChainTrace {
        config: config.clone(),
        n_studies,
        n_features: data.n_features(),
        indicator_samples,
        sample_iterations,
        lambda_samples,
        noise_variance_mean,
        diagnostics,
    })
}

/// Runs independent chains in parallel, one per configuration.
pub fn run_chains(
    data: &MultiStudyDataset,
    hyper: &Hyperparams,
    configs: &[ChainConfig],
) -> Vec<Result<ChainTrace>> {
    configs
        .par_iter()
        .map(|c| run_chain(data, hyper, c, None))
        .collect()
}
