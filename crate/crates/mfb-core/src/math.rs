//! Shared numerical helpers: standard normal distribution functions, a
//! PSD-tolerant Cholesky factorization, and running moment accumulation.

use ndarray::Array2;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

fn std_normal() -> &'static Normal {
    use std::sync::OnceLock;
    static CELL: OnceLock<Normal> = OnceLock::new();
    CELL.get_or_init(|| Normal::new(0.0, 1.0).expect("standard normal"))
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    std_normal().pdf(x)
}

/// Standard normal quantile on (0, 1), polished with one Newton step so that
/// `norm_cdf(norm_quantile(u))` matches `u` to near machine precision.
pub fn norm_quantile(u: f64) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::InvalidInput(format!(
            "quantile level must lie in (0, 1), got {u}"
        )));
    }
    let mut z = std_normal().inverse_cdf(u);
    let pdf = norm_pdf(z);
    if pdf > 1e-300 {
        z -= (norm_cdf(z) - u) / pdf;
    }
    Ok(z)
}

/// Lower Cholesky factor of a symmetric positive semidefinite matrix.
///
/// Semidefinite pivots (within `1e-10`) are clamped to zero with the rest of
/// the column zeroed, so perfectly correlated blocks factor cleanly. A pivot
/// below the tolerance reports the matrix as not PSD.
pub fn cholesky_psd(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    const TOL: f64 = 1e-10;
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -TOL {
            return Err(Error::InvalidInput(format!(
                "matrix is not positive semidefinite (pivot {d:.3e} at column {j})"
            )));
        }
        let d = d.max(0.0);
        if d <= TOL {
            // Degenerate direction: the remaining column must already be
            // fully explained by earlier columns.
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > 1e-8 {
                    return Err(Error::InvalidInput(format!(
                        "matrix is not positive semidefinite (residual {s:.3e} under zero pivot {j})"
                    )));
                }
            }
            continue;
        }
        let root = d.sqrt();
        l[(j, j)] = root;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / root;
        }
    }
    Ok(l)
}

/// Interpolated quantile of an ascending-sorted slice (the linear-interpolation
/// convention: rank h = q·(n−1), result between the two nearest order stats).
/// `q` is clamped to [0, 1]; the slice must be nonempty.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty(), "quantile of an empty slice");
    let q = q.clamp(0.0, 1.0);
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Welford running mean/variance accumulator.
#[derive(Debug, Clone, Default)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample variance (n - 1 denominator); zero below two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            self.m2 / (self.count - 1) as f64
        }
    }

    /// Standard error of the mean.
    pub fn stderr(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            (self.variance() / self.count as f64).sqrt()
        }
    }
}
