//! Synthetic multi-asset market: lognormal terminal marginals with a Gaussian
//! copula as the benchmark dependence, plus an independent-coupling reference
//! sampler and analytic marginal quantiles/CDFs.
//!
//! Terminal prices use the zero-rate martingale convention
//! `S_j = s0_j * exp(-sigma_j^2 T / 2 + sigma_j sqrt(T) Z_j)`, so every
//! marginal has mean `s0_j` regardless of the coupling.

use ndarray::{Array2, ArrayViewMut2};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{cholesky_psd, norm_cdf, norm_quantile};

/// Static description of the synthetic market.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MarketSpec {
    /// Initial prices, one per asset; strictly positive.
    pub s0: Vec<f64>,
    /// Lognormal volatilities, one per asset; nonnegative.
    pub sigma: Vec<f64>,
    /// Correlation matrix of the Gaussian copula (unit diagonal, PSD).
    pub rho: Vec<Vec<f64>>,
    /// Time to maturity in years; strictly positive.
    pub maturity: f64,
}

/// Which joint law produced a batch of terminal price rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchSource {
    /// Benchmark Gaussian-copula coupling.
    Copula,
    /// Independent coupling of the same marginals.
    Reference,
    /// Resampled atoms of a discretized instance.
    Discrete,
}

/// A batch of joint terminal samples (rows) with its provenance.
#[derive(Debug, Clone)]
pub struct SampleBatch {
    /// n x d matrix; row = one joint sample of all asset prices.
    pub data: Array2<f64>,
    /// Seed the batch was drawn from.
    pub seed: u64,
    /// Coupling that generated the rows.
    pub source: BatchSource,
}

impl MarketSpec {
    pub fn new(s0: Vec<f64>, sigma: Vec<f64>, rho: Vec<Vec<f64>>, maturity: f64) -> Result<Self> {
        let spec = MarketSpec {
            s0,
            sigma,
            rho,
            maturity,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Number of assets.
    pub fn dim(&self) -> usize {
        self.s0.len()
    }

    /// Validate shapes, ranges and the PSD property of `rho`.
    pub fn validate(&self) -> Result<()> {
        let d = self.s0.len();
        if d == 0 {
            return Err(Error::InvalidInput("market needs at least one asset".into()));
        }
        if self.sigma.len() != d {
            return Err(Error::InvalidInput(format!(
                "sigma has {} entries but s0 has {}",
                self.sigma.len(),
                d
            )));
        }
        for (j, &s) in self.s0.iter().enumerate() {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::InvalidInput(format!(
                    "s0[{j}] must be finite and positive, got {s}"
                )));
            }
        }
        for (j, &v) in self.sigma.iter().enumerate() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "sigma[{j}] must be finite and nonnegative, got {v}"
                )));
            }
        }
        if !(self.maturity.is_finite() && self.maturity > 0.0) {
            return Err(Error::InvalidInput(format!(
                "maturity must be finite and positive, got {}",
                self.maturity
            )));
        }
        if self.rho.len() != d {
            return Err(Error::InvalidInput(format!(
                "rho has {} rows but the market has {} assets",
                self.rho.len(),
                d
            )));
        }
        for (i, row) in self.rho.iter().enumerate() {
            if row.len() != d {
                return Err(Error::InvalidInput(format!(
                    "rho row {i} has {} entries, expected {d}",
                    row.len()
                )));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v.abs() > 1.0 + 1e-12 {
                    return Err(Error::InvalidInput(format!(
                        "rho[{i}][{j}] must lie in [-1, 1], got {v}"
                    )));
                }
                if (v - self.rho[j][i]).abs() > 1e-12 {
                    return Err(Error::InvalidInput(format!(
                        "rho is not symmetric at ({i}, {j})"
                    )));
                }
            }
            if (row[i] - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!(
                    "rho diagonal entry {i} must be 1, got {}",
                    row[i]
                )));
            }
        }
        // Factorization doubles as the PSD check.
        self.rho_matrix().and_then(|m| cholesky_psd(&m)).map(|_| ())
    }

    fn rho_matrix(&self) -> Result<Array2<f64>> {
        let d = self.dim();
        let mut m = Array2::<f64>::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] = self.rho[i][j];
            }
        }
        Ok(m)
    }

    fn drift(&self, j: usize) -> f64 {
        -self.sigma[j] * self.sigma[j] * self.maturity / 2.0
    }

    fn vol_t(&self, j: usize) -> f64 {
        self.sigma[j] * self.maturity.sqrt()
    }

    /// Quantile of asset `j`'s lognormal marginal at level `u` in (0, 1).
    pub fn marginal_quantile(&self, j: usize, u: f64) -> Result<f64> {
        if j >= self.dim() {
            return Err(Error::InvalidInput(format!(
                "asset index {j} out of range for a {}-asset market",
                self.dim()
            )));
        }
        let z = norm_quantile(u)?;
        Ok(self.s0[j] * (self.drift(j) + self.vol_t(j) * z).exp())
    }

    /// Analytic CDF of asset `j`'s lognormal marginal.
    pub fn marginal_cdf(&self, j: usize, s: f64) -> Result<f64> {
        if j >= self.dim() {
            return Err(Error::InvalidInput(format!(
                "asset index {j} out of range for a {}-asset market",
                self.dim()
            )));
        }
        if s <= 0.0 {
            return Ok(0.0);
        }
        let vt = self.vol_t(j);
        if vt == 0.0 {
            return Ok(if s >= self.s0[j] { 1.0 } else { 0.0 });
        }
        Ok(norm_cdf(((s / self.s0[j]).ln() - self.drift(j)) / vt))
    }

    /// Mean of asset `j`'s marginal (equals `s0[j]` under the martingale
    /// convention); kept explicit for use as a test oracle.
    pub fn marginal_mean(&self, j: usize) -> f64 {
        self.s0[j]
    }
}

/// Streaming sampler of joint terminal price rows.
///
/// Owns its RNG, so successive `fill` calls continue one deterministic
/// stream — this is what the training loop consumes batch by batch.
#[derive(Debug, Clone)]
pub struct PathSampler {
    s0: Vec<f64>,
    drift: Vec<f64>,
    vol_t: Vec<f64>,
    /// Lower Cholesky factor of rho; `None` samples independent columns.
    chol: Option<Array2<f64>>,
    rng: ChaCha12Rng,
    zbuf: Vec<f64>,
}

impl PathSampler {
    /// Sampler under the benchmark Gaussian-copula coupling.
    pub fn benchmark(spec: &MarketSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let chol = cholesky_psd(&spec.rho_matrix()?)?;
        Ok(Self::build(spec, Some(chol), seed))
    }

    /// Sampler under the independent coupling of the same marginals.
    pub fn independent(spec: &MarketSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(Self::build(spec, None, seed))
    }

    fn build(spec: &MarketSpec, chol: Option<Array2<f64>>, seed: u64) -> Self {
        let d = spec.dim();
        PathSampler {
            s0: spec.s0.clone(),
            drift: (0..d).map(|j| spec.drift(j)).collect(),
            vol_t: (0..d).map(|j| spec.vol_t(j)).collect(),
            chol,
            rng: ChaCha12Rng::seed_from_u64(seed),
            zbuf: vec![0.0; d],
        }
    }

    /// Number of assets per row.
    pub fn dim(&self) -> usize {
        self.s0.len()
    }

    /// Fill `out` (n x d) with the next n joint samples of the stream.
    pub fn fill(&mut self, mut out: ArrayViewMut2<f64>) {
        let d = self.dim();
        assert_eq!(out.ncols(), d, "output width must match the market dimension");
        for mut row in out.rows_mut() {
            for z in self.zbuf.iter_mut() {
                *z = self.rng.sample(StandardNormal);
            }
            match &self.chol {
                Some(l) => {
                    for j in 0..d {
                        let mut acc = 0.0;
                        for k in 0..=j {
                            acc += l[(j, k)] * self.zbuf[k];
                        }
                        row[j] = self.s0[j] * (self.drift[j] + self.vol_t[j] * acc).exp();
                    }
                }
                None => {
                    for j in 0..d {
                        row[j] =
                            self.s0[j] * (self.drift[j] + self.vol_t[j] * self.zbuf[j]).exp();
                    }
                }
            }
        }
    }
}

fn sample_with(
    spec: &MarketSpec,
    n: usize,
    seed: u64,
    source: BatchSource,
) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let mut sampler = match source {
        BatchSource::Copula => PathSampler::benchmark(spec, seed)?,
        BatchSource::Reference => PathSampler::independent(spec, seed)?,
        BatchSource::Discrete => {
            return Err(Error::InvalidInput(
                "discrete batches are drawn from a DiscreteInstance, not a MarketSpec".into(),
            ))
        }
    };
    let mut data = Array2::<f64>::zeros((n, spec.dim()));
    sampler.fill(data.view_mut());
    Ok(SampleBatch { data, seed, source })
}

/// Draw n joint samples under the benchmark Gaussian-copula coupling.
pub fn sample_copula(spec: &MarketSpec, n: usize, seed: u64) -> Result<SampleBatch> {
    sample_with(spec, n, seed, BatchSource::Copula)
}

/// Draw n joint samples with the same marginals but independent columns.
pub fn sample_reference(spec: &MarketSpec, n: usize, seed: u64) -> Result<SampleBatch> {
    sample_with(spec, n, seed, BatchSource::Reference)
}
