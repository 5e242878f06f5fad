//! Benchmark-model pricing: Monte Carlo under the Gaussian-copula coupling,
//! plus the closed-form lognormal call price used as an oracle.
//!
//! Prices produced here feed the constraint set of the bound problem and the
//! reference curves in the experiment tables.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::market::{sample_copula, MarketSpec, SampleBatch};
use crate::math::{norm_cdf, RunningStats};
use crate::payoff::PayoffExpr;

/// A payoff with its benchmark price and sampling metadata.
#[derive(Debug, Clone, Serialize)]
pub struct PricedInstrument {
    /// Payoff in canonical text form.
    pub payoff: PayoffExpr,
    /// Monte Carlo price under the benchmark coupling.
    pub price: f64,
    /// Standard error of the price estimate.
    pub stderr: f64,
    /// Number of samples behind the estimate.
    pub n_samples: usize,
    /// Seed of the batch the estimate was computed on.
    pub seed: u64,
}

/// Price a payoff by Monte Carlo under the benchmark Gaussian copula.
pub fn price_mc(spec: &MarketSpec, payoff: &PayoffExpr, n: usize, seed: u64) -> Result<PricedInstrument> {
    let batch = sample_copula(spec, n, seed)?;
    price_on_batch(&batch, payoff)
}

/// Price a payoff on an existing batch (common random numbers across a strike
/// sweep: reuse one batch and price every instrument on it).
pub fn price_on_batch(batch: &SampleBatch, payoff: &PayoffExpr) -> Result<PricedInstrument> {
    let values = payoff.eval_batch(&batch.data.view())?;
    let mut st = RunningStats::new();
    for &v in values.iter() {
        st.push(v);
    }
    Ok(PricedInstrument {
        payoff: payoff.clone(),
        price: st.mean(),
        stderr: st.stderr(),
        n_samples: batch.data.nrows(),
        seed: batch.seed,
    })
}

/// Closed-form price of a vanilla call `(x_j - K)^+` under the lognormal
/// marginal with zero rate: `s0 N(d1) - K N(d2)`.
///
/// Degenerate regimes fall back to the exact expectations: `s0 - K` for
/// `K <= 0` and `(s0 - K)^+` for zero volatility.
pub fn price_closed_form_call(spec: &MarketSpec, asset: usize, strike: f64) -> Result<f64> {
    if asset >= spec.dim() {
        return Err(Error::InvalidInput(format!(
            "asset index {asset} out of range for a {}-asset market",
            spec.dim()
        )));
    }
    if !strike.is_finite() {
        return Err(Error::InvalidInput(format!(
            "strike must be finite, got {strike}"
        )));
    }
    let s0 = spec.s0[asset];
    if strike <= 0.0 {
        return Ok(s0 - strike);
    }
    let vol_t = spec.sigma[asset] * spec.maturity.sqrt();
    if vol_t == 0.0 {
        return Ok((s0 - strike).max(0.0));
    }
    let d1 = ((s0 / strike).ln() + vol_t * vol_t / 2.0) / vol_t;
    let d2 = d1 - vol_t;
    Ok(s0 * norm_cdf(d1) - strike * norm_cdf(d2))
}
