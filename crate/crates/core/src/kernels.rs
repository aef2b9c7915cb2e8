//! Seeded random variates and the precision-form normal draw shared by the
//! Gibbs conditionals.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};

use crate::error::{Error, Result};

/// Positivity floor for precisions and shrinkage parameters.
pub const POSITIVE_FLOOR: f64 = 1e-12;

/// A seeded, reproducible random stream. Each chain owns one.
#[derive(Debug, Clone)]
pub struct RandomSource {
    seed: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sub-stream `index` of master seed `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ splitmix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        RandomSource {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream for chain or replicate `index`, derived
    /// deterministically from this source's seed (not from its state).
    pub fn substream(&self, index: u64) -> RandomSource {
        RandomSource::new(derive_seed(self.seed, index))
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }
}

impl RngCore for RandomSource {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// Gamma draw in shape-rate form (mean `shape / rate`).
pub fn draw_gamma(source: &mut RandomSource, shape: f64, rate: f64) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) || !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Domain(format!(
            "gamma requires shape > 0 and rate > 0, got shape={shape}, rate={rate}"
        )));
    }
    let dist = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Domain(format!("gamma({shape}, {rate}): {e}")))?;
    Ok(dist.sample(source))
}

/// Gamma draw floored at [`POSITIVE_FLOOR`].
pub(crate) fn draw_gamma_floored(source: &mut RandomSource, shape: f64, rate: f64) -> Result<f64> {
    draw_gamma(source, shape, rate).map(|v| v.max(POSITIVE_FLOOR))
}

pub fn draw_poisson(source: &mut RandomSource, mean: f64) -> Result<u64> {
    if mean.is_nan() || mean < 0.0 || mean.is_infinite() {
        return Err(Error::Domain(format!(
            "poisson mean must be finite and >= 0, got {mean}"
        )));
    }
    if mean == 0.0 {
        return Ok(0);
    }
    let dist = Poisson::new(mean).map_err(|e| Error::Domain(format!("poisson({mean}): {e}")))?;
    Ok(dist.sample(source) as u64)
}

/// Bernoulli draw with success probability `odds / (1 + odds)`.
pub fn draw_bernoulli_odds(source: &mut RandomSource, odds: f64) -> Result<bool> {
    if odds.is_nan() || odds < 0.0 {
        return Err(Error::Numerical(format!(
            "bernoulli odds must be >= 0, got {odds}"
        )));
    }
    draw_bernoulli_log_odds(source, odds.ln())
}

/// Bernoulli draw given the log-odds; `+inf` always succeeds, `-inf` never.
pub fn draw_bernoulli_log_odds(source: &mut RandomSource, log_odds: f64) -> Result<bool> {
    if log_odds.is_nan() {
        return Err(Error::Numerical("bernoulli log-odds is NaN".into()));
    }
    let u = source.uniform();
    if u <= 0.0 {
        return Ok(log_odds > f64::NEG_INFINITY);
    }
    // u < sigmoid(x)  <=>  logit(u) < x
    Ok(u.ln() - (-u).ln_1p() < log_odds)
}

/// Normal law given in precision form: mean `precision⁻¹ · linear_term`,
/// covariance `precision⁻¹`.
#[derive(Debug, Clone)]
pub struct PrecisionNormalSpec {
    pub precision: DMatrix<f64>,
    pub linear_term: DVector<f64>,
}

impl PrecisionNormalSpec {
    pub fn new(precision: DMatrix<f64>, linear_term: DVector<f64>) -> Result<Self> {
        let k = precision.nrows();
        if precision.ncols() != k || linear_term.len() != k {
            return Err(Error::Dimension(format!(
                "precision {}x{} with linear term of length {}",
                precision.nrows(),
                precision.ncols(),
                linear_term.len()
            )));
        }
        let asym = (&precision - precision.transpose()).norm();
        if asym > 1e-8 * precision.norm().max(f64::MIN_POSITIVE) {
            return Err(Error::Invariant(format!(
                "precision is not symmetric (asymmetry {asym:.3e})"
            )));
        }
        Ok(PrecisionNormalSpec {
            precision,
            linear_term,
        })
    }
}

/// A factorized precision matrix, reusable for many draws with different
/// linear terms.
#[derive(Debug, Clone)]
pub struct FactorizedPrecision {
    chol: Cholesky<f64, Dyn>,
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    if m.iter().any(|v| !v.is_finite()) {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.iter().fold(f64::INFINITY, |a, v| a.min(*v));
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

impl FactorizedPrecision {
    pub fn new(precision: DMatrix<f64>) -> Result<Self> {
        let dim = precision.nrows();
        match Cholesky::new(precision.clone()) {
            Some(chol) => Ok(FactorizedPrecision { chol }),
            None => Err(Error::NotPositiveDefinite {
                dim,
                condition: condition_estimate(&precision),
            }),
        }
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// `precision⁻¹ · b`.
    pub fn mean(&self, linear_term: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(linear_term)
    }

    /// `log |precision|`.
    pub fn log_determinant(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    /// `bᵀ · precision⁻¹ · b`.
    pub fn quadratic_inverse(&self, b: &DVector<f64>) -> f64 {
        let mut y = b.clone();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut y);
        // l_dirty keeps garbage above the diagonal; solve_lower only reads the lower part
        y.norm_squared()
    }

    /// One draw from Normal(precision⁻¹ b, precision⁻¹).
    pub fn draw(&self, source: &mut RandomSource, linear_term: &DVector<f64>) -> DVector<f64> {
        let k = self.dim();
        let mean = self.mean(linear_term);
        let mut z = DVector::from_fn(k, |_, _| source.standard_normal());
        // Lᵀ x = z  gives  x ~ N(0, (L Lᵀ)⁻¹)
        let l = self.chol.l_dirty();
        for i in (0..k).rev() {
            let mut acc = z[i];
            for j in (i + 1)..k {
                acc -= l[(j, i)] * z[j];
            }
            z[i] = acc / l[(i, i)];
        }
        mean + z
    }
}

pub fn draw_precision_normal(
    source: &mut RandomSource,
    spec: &PrecisionNormalSpec,
) -> Result<DVector<f64>> {
    let factor = FactorizedPrecision::new(spec.precision.clone())?;
    Ok(factor.draw(source, &spec.linear_term))
}
