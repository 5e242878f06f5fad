//! Dense revised simplex for small equality-form linear programs.
//!
//! Solves  min cᵀx  s.t.  Ax = b, x ≥ 0,  where A is presented column by
//! column through [`ColumnSource`] — the transport LPs this crate builds have
//! a few hundred rows but up to a million structured columns, so columns are
//! generated on demand instead of stored.
//!
//! Method: two-phase revised simplex with an explicit basis inverse.
//! Phase 1 starts from an all-artificial basis and minimizes the artificial
//! mass; a strictly positive optimum is a certificate of infeasibility (the
//! phase-1 duals y satisfy yᵀa_j ≤ 0 for every real column and yᵀb > 0).
//! Phase 2 keeps any leftover artificials pinned at zero — the ratio test
//! ejects them the moment a pivot would make them positive, which also copes
//! with linearly dependent rows. Dantzig pricing with a Bland fallback after
//! a stall bounds cycling, and the inverse is rebuilt from scratch every few
//! dozen pivots to keep roundoff in check.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Column access for  min cᵀx  s.t.  Ax = b, x ≥ 0.
pub trait ColumnSource {
    /// Number of rows of A (and entries of b).
    fn nrows(&self) -> usize;
    /// Number of structural variables.
    fn ncols(&self) -> usize;
    /// Write dense column `j` into `out` (length `nrows`).
    fn col(&self, j: usize, out: &mut [f64]);
    /// Objective coefficient of variable `j`.
    fn cost(&self, j: usize) -> f64;
}

/// Solver knobs; the defaults suit the transport LPs built by this crate.
#[derive(Debug, Clone)]
pub struct SimplexOptions {
    /// Hard cap on pivots across both phases.
    pub max_iters: usize,
    /// Pivot and reduced-cost tolerance.
    pub tol: f64,
    /// Phase-1 mass below this (scaled by ‖b‖₁) counts as feasible.
    pub feas_tol: f64,
    /// Rebuild the basis inverse after this many eta updates.
    pub refactor_every: usize,
    /// Consecutive non-improving pivots before switching to Bland's rule.
    pub stall_limit: usize,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        SimplexOptions {
            max_iters: 200_000,
            tol: 1e-9,
            feas_tol: 1e-8,
            refactor_every: 64,
            stall_limit: 64,
        }
    }
}

/// Optimal basis data.
#[derive(Debug, Clone)]
pub struct Solution {
    pub objective: f64,
    /// Structural variables only (artificials excluded), length `ncols`.
    pub x: Vec<f64>,
    /// Row duals y with yᵀa_j ≤ c_j for all j and yᵀb = objective.
    pub duals: Vec<f64>,
    pub iterations: usize,
}

/// Outcome of a solve that did not error numerically.
#[derive(Debug, Clone)]
pub enum LpOutcome {
    Optimal(Solution),
    /// No feasible point. `farkas` are the phase-1 duals: yᵀa_j ≤ 0 for every
    /// column of A while yᵀb = `phase1_objective` > 0.
    Infeasible {
        farkas: Vec<f64>,
        phase1_objective: f64,
    },
    Unbounded,
}

struct Tableau<'a, S: ColumnSource + ?Sized> {
    source: &'a S,
    b: Vec<f64>,
    /// +1/−1 per row so the artificial basis starts feasible.
    art_sign: Vec<f64>,
    m: usize,
    n: usize,
    basis: Vec<usize>,
    /// For structural j: in the basis right now?
    in_basis: Vec<bool>,
    b_inv: Array2<f64>,
    x_b: Vec<f64>,
    /// Phase 1 minimizes artificial mass, phase 2 the true cost.
    phase: u8,
    col_buf: Vec<f64>,
}

impl<'a, S: ColumnSource + ?Sized> Tableau<'a, S> {
    fn new(source: &'a S, b: &[f64]) -> Self {
        let m = source.nrows();
        let n = source.ncols();
        let art_sign: Vec<f64> = b.iter().map(|v| if *v < 0.0 { -1.0 } else { 1.0 }).collect();
        let mut b_inv = Array2::zeros((m, m));
        for i in 0..m {
            b_inv[(i, i)] = art_sign[i];
        }
        let x_b = b.iter().map(|v| v.abs()).collect();
        Tableau {
            source,
            b: b.to_vec(),
            art_sign,
            m,
            n,
            basis: (n..n + m).collect(),
            in_basis: vec![false; n],
            b_inv,
            x_b,
            phase: 1,
            col_buf: vec![0.0; m],
        }
    }

    fn is_artificial(&self, var: usize) -> bool {
        var >= self.n
    }

    /// Dense column of variable `var` into `self.col_buf`.
    fn load_col(&mut self, var: usize) {
        if var < self.n {
            self.source.col(var, &mut self.col_buf);
        } else {
            self.col_buf.iter_mut().for_each(|v| *v = 0.0);
            self.col_buf[var - self.n] = self.art_sign[var - self.n];
        }
    }

    fn cost_of(&self, var: usize) -> f64 {
        match (self.phase, var < self.n) {
            (1, true) => 0.0,
            (1, false) => 1.0,
            (_, true) => self.source.cost(var),
            (_, false) => 0.0,
        }
    }

    /// y = c_Bᵀ B⁻¹.
    fn duals(&self) -> Vec<f64> {
        let mut y = vec![0.0; self.m];
        for (i, &var) in self.basis.iter().enumerate() {
            let c = self.cost_of(var);
            if c != 0.0 {
                for (r, yr) in y.iter_mut().enumerate() {
                    *yr += c * self.b_inv[(i, r)];
                }
            }
        }
        y
    }

    fn objective(&self) -> f64 {
        self.basis
            .iter()
            .zip(&self.x_b)
            .map(|(&var, &xv)| self.cost_of(var) * xv)
            .sum()
    }

    /// Most negative reduced cost (or first negative under Bland) among
    /// structural nonbasic columns.
    fn price(&mut self, y: &[f64], bland: bool, tol: f64) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..self.n {
            if self.in_basis[j] {
                continue;
            }
            self.source.col(j, &mut self.col_buf);
            let ya: f64 = y.iter().zip(&self.col_buf).map(|(a, b)| a * b).sum();
            let rc = self.cost_of(j) - ya;
            if rc < -tol {
                if bland {
                    return Some(j);
                }
                if best.is_none_or(|(_, r)| rc < r) {
                    best = Some((j, rc));
                }
            }
        }
        best.map(|(j, _)| j)
    }

    /// Leaving row for entering direction `d` (= B⁻¹ a_q). Basic artificials
    /// block at zero in either direction so they can never turn positive.
    /// Returns None when the direction is unblocked (unbounded ray).
    fn ratio_test(&self, d: &[f64], bland: bool, tol: f64) -> Option<usize> {
        let mut leave: Option<(usize, f64)> = None;
        for i in 0..self.m {
            let var = self.basis[i];
            let blocking = if d[i] > tol {
                Some((self.x_b[i].max(0.0)) / d[i])
            } else if self.is_artificial(var) && d[i] < -tol {
                // An artificial at zero would grow along this direction.
                Some(0.0)
            } else {
                None
            };
            let Some(ratio) = blocking else { continue };
            let better = match leave {
                None => true,
                Some((cur, best)) => {
                    if (ratio - best).abs() <= tol * (1.0 + best.abs()) {
                        if bland {
                            self.basis[i] < self.basis[cur]
                        } else {
                            // Prefer ejecting artificials, then bigger pivots.
                            let cur_art = self.is_artificial(self.basis[cur]);
                            let new_art = self.is_artificial(var);
                            new_art && !cur_art
                                || (new_art == cur_art && d[i].abs() > d[cur].abs())
                        }
                    } else {
                        ratio < best
                    }
                }
            };
            if better {
                leave = Some((i, ratio));
            }
        }
        leave.map(|(i, _)| i)
    }

    /// Replace basis row `r` with variable `q`, updating B⁻¹ by an eta step
    /// and refreshing x_B = B⁻¹ b.
    fn pivot(&mut self, r: usize, q: usize, d: &[f64]) -> Result<()> {
        let dr = d[r];
        if dr.abs() < 1e-12 {
            return Err(Error::Numerical(format!(
                "degenerate pivot element {dr:e} in simplex row {r}"
            )));
        }
        let old = self.basis[r];
        if old < self.n {
            self.in_basis[old] = false;
        }
        if q < self.n {
            self.in_basis[q] = true;
        }
        self.basis[r] = q;
        for c in 0..self.m {
            self.b_inv[(r, c)] /= dr;
        }
        for (i, &f) in d.iter().enumerate() {
            if i == r {
                continue;
            }
            if f != 0.0 {
                for c in 0..self.m {
                    self.b_inv[(i, c)] -= f * self.b_inv[(r, c)];
                }
            }
        }
        self.refresh_x();
        Ok(())
    }

    fn refresh_x(&mut self) {
        for i in 0..self.m {
            let mut v = 0.0;
            for c in 0..self.m {
                v += self.b_inv[(i, c)] * self.b[c];
            }
            self.x_b[i] = v;
        }
    }

    /// Rebuild B⁻¹ from the recorded basis by Gauss-Jordan with partial
    /// pivoting, washing out accumulated eta roundoff.
    fn refactor(&mut self) -> Result<()> {
        let m = self.m;
        let mut aug = Array2::<f64>::zeros((m, 2 * m));
        let basis = self.basis.clone();
        for (i, var) in basis.into_iter().enumerate() {
            self.load_col(var);
            for r in 0..m {
                aug[(r, i)] = self.col_buf[r];
            }
        }
        for i in 0..m {
            aug[(i, m + i)] = 1.0;
        }
        for col in 0..m {
            let mut piv = col;
            for r in col + 1..m {
                if aug[(r, col)].abs() > aug[(piv, col)].abs() {
                    piv = r;
                }
            }
            let p = aug[(piv, col)];
            if p.abs() < 1e-12 {
                return Err(Error::Numerical("singular simplex basis".into()));
            }
            if piv != col {
                for c in 0..2 * m {
                    let tmp = aug[(col, c)];
                    aug[(col, c)] = aug[(piv, c)];
                    aug[(piv, c)] = tmp;
                }
            }
            let inv = 1.0 / aug[(col, col)];
            for c in 0..2 * m {
                aug[(col, c)] *= inv;
            }
            for r in 0..m {
                if r == col {
                    continue;
                }
                let f = aug[(r, col)];
                if f != 0.0 {
                    for c in 0..2 * m {
                        aug[(r, c)] -= f * aug[(col, c)];
                    }
                }
            }
        }
        for r in 0..m {
            for c in 0..m {
                self.b_inv[(r, c)] = aug[(r, m + c)];
            }
        }
        self.refresh_x();
        Ok(())
    }
}

/// Two-phase solve of  min cᵀx  s.t.  Ax = b, x ≥ 0.
pub fn solve<S: ColumnSource + ?Sized>(
    source: &S,
    b: &[f64],
    opts: &SimplexOptions,
) -> Result<LpOutcome> {
    let m = source.nrows();
    let n = source.ncols();
    if b.len() != m {
        return Err(Error::InvalidInput(format!(
            "rhs has {} entries for {m} rows",
            b.len()
        )));
    }
    if m == 0 || n == 0 {
        return Err(Error::InvalidInput("empty linear program".into()));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("rhs must be finite".into()));
    }

    let b_scale: f64 = b.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
    let mut t = Tableau::new(source, b);
    let mut iterations = 0usize;
    let mut since_refactor = 0usize;
    let mut since_improve = 0usize;
    let mut bland = false;
    let mut last_obj = f64::INFINITY;
    let mut d = vec![0.0; m];

    loop {
        if iterations > opts.max_iters {
            return Err(Error::Numerical(format!(
                "simplex iteration limit {} reached",
                opts.max_iters
            )));
        }

        let y = t.duals();
        let entering = t.price(&y, bland, opts.tol);
        match entering {
            None => {
                if t.phase == 1 {
                    let mass = t.objective();
                    if mass > opts.feas_tol * b_scale {
                        return Ok(LpOutcome::Infeasible {
                            farkas: y,
                            phase1_objective: mass,
                        });
                    }
                    t.phase = 2;
                    t.refactor()?;
                    since_refactor = 0;
                    since_improve = 0;
                    bland = false;
                    last_obj = f64::INFINITY;
                    continue;
                }
                let mut x = vec![0.0; n];
                for (i, &var) in t.basis.iter().enumerate() {
                    if var < n {
                        x[var] = t.x_b[i].max(0.0);
                    }
                }
                return Ok(LpOutcome::Optimal(Solution {
                    objective: t.objective(),
                    x,
                    duals: y,
                    iterations,
                }));
            }
            Some(q) => {
                t.load_col(q);
                for (i, di) in d.iter_mut().enumerate() {
                    let mut v = 0.0;
                    for c in 0..m {
                        v += t.b_inv[(i, c)] * t.col_buf[c];
                    }
                    *di = v;
                }
                let Some(r) = t.ratio_test(&d, bland, opts.tol) else {
                    if t.phase == 1 {
                        // Phase-1 cost is bounded below by zero; an unbounded
                        // ray means the arithmetic has broken down.
                        return Err(Error::Numerical(
                            "unbounded direction in feasibility phase".into(),
                        ));
                    }
                    return Ok(LpOutcome::Unbounded);
                };
                t.pivot(r, q, &d)?;
                iterations += 1;
                since_refactor += 1;
                if since_refactor >= opts.refactor_every {
                    t.refactor()?;
                    since_refactor = 0;
                }
                let obj = t.objective();
                if obj < last_obj - 1e-12 * (1.0 + last_obj.abs()) {
                    since_improve = 0;
                    bland = false;
                } else {
                    since_improve += 1;
                    if since_improve >= opts.stall_limit {
                        bland = true;
                    }
                }
                last_obj = obj;
            }
        }
    }
}
