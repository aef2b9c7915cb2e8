//! Data, parameters and the factor-sharing indicator matrix.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

/// Largest supported number of studies (memberships are stored as 64-bit masks).
pub const MAX_STUDIES: usize = 64;

/// S centered data matrices (subjects × features) over one feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStudyDataset {
    studies: Vec<DMatrix<f64>>,
    feature_names: Vec<String>,
    centered: bool,
}

impl MultiStudyDataset {
    /// Wraps raw study matrices; `centered` is set only if every column
    /// already has mean zero to 1e-8.
    pub fn new(studies: Vec<DMatrix<f64>>, feature_names: Vec<String>) -> Result<Self> {
        if studies.is_empty() {
            return Err(Error::Empty("dataset has no studies".into()));
        }
        if studies.len() > MAX_STUDIES {
            return Err(Error::Domain(format!(
                "at most {MAX_STUDIES} studies are supported, got {}",
                studies.len()
            )));
        }
        let p = feature_names.len();
        if p == 0 {
            return Err(Error::Empty("dataset has no features".into()));
        }
        for (s, x) in studies.iter().enumerate() {
            if x.nrows() == 0 {
                return Err(Error::Empty(format!("study {s} has no rows")));
            }
            if x.ncols() != p {
                return Err(Error::Dimension(format!(
                    "study {s} has {} columns, expected {p}",
                    x.ncols()
                )));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Domain(format!(
                    "study {s} contains non-finite values"
                )));
            }
        }
        let centered = studies
            .iter()
            .all(|x| (0..x.ncols()).all(|j| x.column(j).mean().abs() <= 1e-8));
        Ok(MultiStudyDataset {
            studies,
            feature_names,
            centered,
        })
    }

    /// Generic feature names `f1..fP`.
    pub fn with_default_names(studies: Vec<DMatrix<f64>>) -> Result<Self> {
        let p = studies.first().map(|x| x.ncols()).unwrap_or(0);
        let names = (1..=p).map(|j| format!("f{j}")).collect();
        Self::new(studies, names)
    }

    pub fn n_studies(&self) -> usize {
        self.studies.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_subjects(&self, s: usize) -> usize {
        self.studies[s].nrows()
    }

    pub fn study(&self, s: usize) -> &DMatrix<f64> {
        &self.studies[s]
    }

    pub fn studies(&self) -> &[DMatrix<f64>] {
        &self.studies
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }
}

/// Subtracts each study's column means.
pub fn center_dataset(raw: &MultiStudyDataset) -> Result<MultiStudyDataset> {
    let studies = raw
        .studies
        .iter()
        .enumerate()
        .map(|(s, x)| {
            if x.nrows() == 0 {
                return Err(Error::Empty(format!("study {s} has no rows")));
            }
            let mut y = x.clone();
            for j in 0..y.ncols() {
                let m = y.column(j).mean();
                y.column_mut(j).add_scalar_mut(-m);
            }
            Ok(y)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiStudyDataset {
        studies,
        feature_names: raw.feature_names.clone(),
        centered: true,
    })
}

/// Prior hyperparameters. Gamma laws are shape-rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// IBP mass parameter.
    pub alpha: f64,
    /// IBP concentration; larger values favour factors owned by few studies.
    pub beta: f64,
    /// Degrees of freedom of the local shrinkage ω.
    pub nu: f64,
    pub a1: f64,
    pub a2: f64,
    pub a_psi: f64,
    pub b_psi: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            alpha: 1.0,
            beta: 1.0,
            nu: 3.0,
            a1: 2.1,
            a2: 3.1,
            a_psi: 1.0,
            b_psi: 0.3,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("nu", self.nu),
            ("a1", self.a1),
            ("a2", self.a2),
            ("a_psi", self.a_psi),
            ("b_psi", self.b_psi),
        ];
        for (name, v) in fields {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!(
                    "hyperparameter {name} must be positive and finite, got {v}"
                )));
            }
        }
        if self.a2 <= 1.0 {
            log::warn!(
                "a2 = {} <= 1: column precisions are not stochastically increasing",
                self.a2
            );
        }
        Ok(())
    }

    /// Σ_{j=1..S} β / (β + j − 1): the expected number of nonzero free
    /// columns is α times this.
    pub fn ibp_harmonic(&self, n_studies: usize) -> f64 {
        (1..=n_studies)
            .map(|j| self.beta / (self.beta + j as f64 - 1.0))
            .sum()
    }

    /// Poisson rate of free columns with membership `pattern` under the
    /// ordered form of the two-parameter IBP: α β B(m, S − m + β).
    pub fn pattern_rate(&self, pattern: FactorType, n_studies: usize) -> f64 {
        let m = pattern.count() as f64;
        let s = n_studies as f64;
        (self.alpha.ln() + self.beta.ln() + ln_beta(m, s - m + self.beta)).exp()
    }
}

pub(crate) fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Which studies express a factor, as a bit mask (bit s = study s).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FactorType(pub u64);

impl FactorType {
    pub fn single(s: usize) -> Self {
        FactorType(1u64 << s)
    }

    pub fn all(n_studies: usize) -> Self {
        if n_studies >= 64 {
            FactorType(u64::MAX)
        } else {
            FactorType((1u64 << n_studies) - 1)
        }
    }

    pub fn from_studies(studies: &[usize]) -> Self {
        FactorType(studies.iter().fold(0u64, |m, &s| m | (1u64 << s)))
    }

    pub fn contains(self, s: usize) -> bool {
        self.0 >> s & 1 == 1
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn with(self, s: usize, present: bool) -> Self {
        if present {
            FactorType(self.0 | (1u64 << s))
        } else {
            FactorType(self.0 & !(1u64 << s))
        }
    }

    pub fn hamming(self, other: FactorType) -> u32 {
        (self.0 ^ other.0).count_ones()
    }

    pub fn studies(self) -> Vec<usize> {
        (0..64).filter(|&s| self.contains(s)).collect()
    }

    /// `'1'`/`'0'` string over `n_studies` rows, study 0 first.
    pub fn label(self, n_studies: usize) -> String {
        (0..n_studies)
            .map(|s| if self.contains(s) { '1' } else { '0' })
            .collect()
    }

    pub fn parse_label(label: &str) -> Result<Self> {
        let mut mask = 0u64;
        if label.len() > MAX_STUDIES {
            return Err(Error::Domain(format!("membership label too long: {label}")));
        }
        for (s, c) in label.chars().enumerate() {
            match c {
                '1' => mask |= 1u64 << s,
                '0' => {}
                _ => {
                    return Err(Error::Domain(format!(
                        "membership label must be 0/1, got {label:?}"
                    )))
                }
            }
        }
        Ok(FactorType(mask))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorClass {
    Common,
    StudySpecific(usize),
    PartiallyShared(FactorType),
}

impl FactorClass {
    pub fn of(pattern: FactorType, n_studies: usize) -> Option<Self> {
        match pattern.count() {
            0 => None,
            1 => Some(FactorClass::StudySpecific(
                pattern.0.trailing_zeros() as usize
            )),
            c if c as usize == n_studies => Some(FactorClass::Common),
            _ => Some(FactorClass::PartiallyShared(pattern)),
        }
    }
}

/// S × K binary study-by-factor matrix whose first S columns are the identity.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IndicatorMatrix {
    n_studies: usize,
    columns: Vec<FactorType>,
}

impl IndicatorMatrix {
    pub fn new(n_studies: usize, columns: Vec<FactorType>) -> Result<Self> {
        let m = IndicatorMatrix { n_studies, columns };
        m.validate()?;
        Ok(m)
    }

    /// Identity block followed by the given free columns.
    pub fn with_free_columns(n_studies: usize, free: &[FactorType]) -> Result<Self> {
        let mut columns: Vec<FactorType> = (0..n_studies).map(FactorType::single).collect();
        columns.extend_from_slice(free);
        Self::new(n_studies, columns)
    }

    pub fn identity(n_studies: usize) -> Self {
        IndicatorMatrix {
            n_studies,
            columns: (0..n_studies).map(FactorType::single).collect(),
        }
    }

    /// From row-major 0/1 rows (one row per study).
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let s = rows.len();
        let k = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Dimension(
                "indicator rows have unequal lengths".into(),
            ));
        }
        if s > MAX_STUDIES {
            return Err(Error::Domain(format!(
                "at most {MAX_STUDIES} studies are supported"
            )));
        }
        let mut columns = vec![FactorType(0); k];
        for (si, row) in rows.iter().enumerate() {
            for (ki, &v) in row.iter().enumerate() {
                match v {
                    0 => {}
                    1 => columns[ki] = columns[ki].with(si, true),
                    _ => {
                        return Err(Error::Domain(format!(
                            "indicator entry ({si},{ki}) = {v} is not binary"
                        )))
                    }
                }
            }
        }
        Self::new(s, columns)
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.n_studies;
        if s == 0 || s > MAX_STUDIES {
            return Err(Error::Invariant(format!(
                "study count {s} outside 1..={MAX_STUDIES}"
            )));
        }
        if self.columns.len() < s {
            return Err(Error::Invariant(format!(
                "K = {} < S = {s}",
                self.columns.len()
            )));
        }
        for j in 0..s {
            if self.columns[j] != FactorType::single(j) {
                return Err(Error::Invariant(format!(
                    "column {j} must be the identity column of study {j}"
                )));
            }
        }
        let all = FactorType::all(s);
        for (k, c) in self.columns.iter().enumerate().skip(s) {
            if c.is_empty() {
                return Err(Error::Invariant(format!("free column {k} is all zeros")));
            }
            if c.0 & !all.0 != 0 {
                return Err(Error::Invariant(format!(
                    "column {k} references studies beyond S = {s}"
                )));
            }
        }
        Ok(())
    }

    pub fn n_studies(&self) -> usize {
        self.n_studies
    }

    pub fn n_factors(&self) -> usize {
        self.columns.len()
    }

    pub fn n_free(&self) -> usize {
        self.columns.len() - self.n_studies
    }

    pub fn columns(&self) -> &[FactorType] {
        &self.columns
    }

    pub fn free_columns(&self) -> &[FactorType] {
        &self.columns[self.n_studies..]
    }

    pub fn column(&self, k: usize) -> FactorType {
        self.columns[k]
    }

    pub fn get(&self, s: usize, k: usize) -> bool {
        self.columns[k].contains(s)
    }

    /// Row s as 0/1 over all K columns.
    pub fn row(&self, s: usize) -> Vec<u8> {
        self.columns.iter().map(|c| c.contains(s) as u8).collect()
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        (0..self.n_studies).map(|s| self.row(s)).collect()
    }

    /// Free columns sorted: a canonical representative of the column
    /// permutation class.
    pub fn canonical_free(&self) -> Vec<FactorType> {
        let mut free = self.free_columns().to_vec();
        free.sort_unstable();
        free
    }

    pub fn classify(&self, k: usize) -> Result<FactorClass> {
        if k >= self.columns.len() {
            return Err(Error::Domain(format!(
                "factor index {k} out of range (K = {})",
                self.columns.len()
            )));
        }
        FactorClass::of(self.columns[k], self.n_studies)
            .ok_or_else(|| Error::Invariant(format!("column {k} is all zeros")))
    }

    /// Column indices grouped by membership pattern, in column order.
    pub fn types(&self) -> BTreeMap<FactorType, Vec<usize>> {
        let mut out: BTreeMap<FactorType, Vec<usize>> = BTreeMap::new();
        for (k, &c) in self.columns.iter().enumerate() {
            out.entry(c).or_default().push(k);
        }
        out
    }

    pub(crate) fn set_column(&mut self, k: usize, pattern: FactorType) {
        self.columns[k] = pattern;
    }

    pub(crate) fn remove_column(&mut self, k: usize) {
        self.columns.remove(k);
    }

    pub(crate) fn insert_column(&mut self, k: usize, pattern: FactorType) {
        self.columns.insert(k, pattern);
    }
}

impl fmt::Display for IndicatorMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in 0..self.n_studies {
            let row: Vec<String> = self.row(s).iter().map(|v| v.to_string()).collect();
            writeln!(f, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

pub fn classify_factor(indicator: &IndicatorMatrix, k: usize) -> Result<FactorClass> {
    indicator.classify(k)
}

/// Log-probability of the left-ordered class of the free columns under the
/// two-parameter IBP with `S` rows:
///
/// K₊ log(αβ) − Σ_h log K_h! − α Σ_j β/(β+j−1) + Σ_k log B(m_k, S − m_k + β)
pub fn ibp_log_prior(indicator: &IndicatorMatrix, alpha: f64, beta: f64) -> Result<f64> {
    indicator.validate()?;
    if !(alpha > 0.0 && beta > 0.0) {
        return Err(Error::Domain(format!(
            "IBP parameters must be positive, got alpha={alpha}, beta={beta}"
        )));
    }
    let s = indicator.n_studies() as f64;
    let harmonic: f64 = (1..=indicator.n_studies())
        .map(|j| beta / (beta + j as f64 - 1.0))
        .sum();
    let free = indicator.free_columns();
    let mut multiplicity: BTreeMap<FactorType, u32> = BTreeMap::new();
    for &c in free {
        *multiplicity.entry(c).or_default() += 1;
    }
    let mut lp = free.len() as f64 * (alpha * beta).ln() - alpha * harmonic;
    lp -= multiplicity
        .values()
        .map(|&h| ln_gamma(h as f64 + 1.0))
        .sum::<f64>();
    lp += free
        .iter()
        .map(|c| {
            let m = c.count() as f64;
            ln_beta(m, s - m + beta)
        })
        .sum::<f64>();
    Ok(lp)
}

/// Full parameter state of one sampler iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// P × K loadings.
    pub lambda: DMatrix<f64>,
    /// Per study, n_s × K factor scores (one subject per row).
    pub scores: Vec<DMatrix<f64>>,
    /// S × P noise precisions ψ⁻².
    pub psi_inv: DMatrix<f64>,
    /// P × K local shrinkage.
    pub omega: DMatrix<f64>,
    /// Per-column multiplicative increments; τ is their prefix product.
    pub delta: Vec<f64>,
    pub indicator: IndicatorMatrix,
}

impl ModelState {
    pub fn n_factors(&self) -> usize {
        self.delta.len()
    }

    /// Global column precisions τ_k = Π_{l ≤ k} δ_l, recomputed on each call.
    pub fn tau(&self) -> Vec<f64> {
        prefix_products(&self.delta)
    }

    pub fn validate(&self) -> Result<()> {
        self.indicator.validate()?;
        let k = self.delta.len();
        let p = self.lambda.nrows();
        let s = self.indicator.n_studies();
        if self.indicator.n_factors() != k
            || self.lambda.ncols() != k
            || self.omega.ncols() != k
            || self.omega.nrows() != p
            || self.scores.iter().any(|l| l.ncols() != k)
        {
            return Err(Error::Invariant(
                "factor counts disagree across parameters".into(),
            ));
        }
        if self.scores.len() != s || self.psi_inv.nrows() != s || self.psi_inv.ncols() != p {
            return Err(Error::Invariant(
                "study counts disagree across parameters".into(),
            ));
        }
        if self
            .psi_inv
            .iter()
            .chain(self.omega.iter())
            .chain(self.delta.iter())
            .any(|v| !(*v > 0.0 && v.is_finite()))
        {
            return Err(Error::Invariant(
                "precision or shrinkage parameter not strictly positive".into(),
            ));
        }
        if self.lambda.iter().any(|v| !v.is_finite())
            || self.scores.iter().any(|l| l.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Invariant("non-finite loadings or scores".into()));
        }
        Ok(())
    }

    pub fn check_data(&self, data: &MultiStudyDataset) -> Result<()> {
        if data.n_studies() != self.indicator.n_studies()
            || data.n_features() != self.lambda.nrows()
        {
            return Err(Error::Dimension(format!(
                "state has S={}, P={} but data has S={}, P={}",
                self.indicator.n_studies(),
                self.lambda.nrows(),
                data.n_studies(),
                data.n_features()
            )));
        }
        for s in 0..data.n_studies() {
            if self.scores[s].nrows() != data.n_subjects(s) {
                return Err(Error::Dimension(format!(
                    "study {s}: {} score rows for {} subjects",
                    self.scores[s].nrows(),
                    data.n_subjects(s)
                )));
            }
        }
        Ok(())
    }

    /// Loadings restricted to study s: Λ A_s (columns absent from s zeroed).
    pub fn masked_lambda(&self, s: usize) -> DMatrix<f64> {
        let mut m = self.lambda.clone();
        for (k, c) in self.indicator.columns().iter().enumerate() {
            if !c.contains(s) {
                m.column_mut(k).fill(0.0);
            }
        }
        m
    }

    /// n_s × P residual X_s − l_s A_s Λᵀ.
    pub fn residual(&self, data: &MultiStudyDataset, s: usize) -> DMatrix<f64> {
        data.study(s) - &self.scores[s] * self.masked_lambda(s).transpose()
    }

    /// Gaussian log-likelihood of the data given all parameters.
    pub fn log_likelihood(&self, data: &MultiStudyDataset) -> f64 {
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let mut ll = 0.0;
        for s in 0..data.n_studies() {
            let r = self.residual(data, s);
            let n = r.nrows() as f64;
            for p in 0..r.ncols() {
                let prec = self.psi_inv[(s, p)];
                let ss: f64 = r.column(p).norm_squared();
                ll += 0.5 * n * (prec.ln() - ln2pi) - 0.5 * prec * ss;
            }
        }
        ll
    }

    /// Removes column k from every per-factor parameter.
    pub(crate) fn remove_factor(&mut self, k: usize) {
        let lambda = std::mem::replace(&mut self.lambda, DMatrix::zeros(0, 0));
        self.lambda = lambda.remove_column(k);
        let omega = std::mem::replace(&mut self.omega, DMatrix::zeros(0, 0));
        self.omega = omega.remove_column(k);
        for l in &mut self.scores {
            let m = std::mem::replace(l, DMatrix::zeros(0, 0));
            *l = m.remove_column(k);
        }
        self.delta.remove(k);
        self.indicator.remove_column(k);
    }

    /// Inserts a factor at column position k.
    pub(crate) fn insert_factor(&mut self, k: usize, factor: FactorColumn) {
        let lambda = std::mem::replace(&mut self.lambda, DMatrix::zeros(0, 0));
        self.lambda = lambda.insert_column(k, 0.0);
        self.lambda.set_column(k, &factor.lambda);
        let omega = std::mem::replace(&mut self.omega, DMatrix::zeros(0, 0));
        self.omega = omega.insert_column(k, 0.0);
        self.omega.set_column(k, &factor.omega);
        for (s, l) in self.scores.iter_mut().enumerate() {
            let m = std::mem::replace(l, DMatrix::zeros(0, 0));
            *l = m.insert_column(k, 0.0);
            l.set_column(k, &factor.scores[s]);
        }
        self.delta.insert(k, factor.delta);
        self.indicator.insert_column(k, factor.pattern);
    }
}

/// All parameters attached to one factor.
#[derive(Debug, Clone)]
pub(crate) struct FactorColumn {
    pub pattern: FactorType,
    pub lambda: DVector<f64>,
    pub omega: DVector<f64>,
    pub delta: f64,
    pub scores: Vec<DVector<f64>>,
}

pub(crate) fn prefix_products(delta: &[f64]) -> Vec<f64> {
    delta
        .iter()
        .scan(1.0, |acc, d| {
            *acc *= d;
            Some(*acc)
        })
        .collect()
}


#[derive(Serialize, Deserialize)]
struct IndicatorRows {
    rows: Vec<Vec<u8>>,
}

impl Serialize for IndicatorMatrix {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        IndicatorRows { rows: self.rows() }.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for IndicatorMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let rows = IndicatorRows::deserialize(deserializer)?;
        IndicatorMatrix::from_rows(&rows.rows).map_err(serde::de::Error::custom)
    }
}
