//! Exact verification on discretized marginals.
//!
//! Small instances (d ≤ 3, a few thousand product-grid cells) admit an exact
//! answer: put each marginal on an atom grid, treat the coupling as a vector
//! of cell masses, and solve the resulting linear program over the transport
//! polytope intersected with the price constraints. This module holds the
//! discrete types, the quantile discretizer, exact product-coupling pricing,
//! and (on top of the `simplex` module) the primal solver and the
//! feasibility check used to validate the neural bounds.

use ndarray::Array2;

use crate::dual::{ConstraintInstrument, Direction};
use crate::error::{Error, Result};
use crate::market::MarketSpec;
use crate::payoff::PayoffExpr;

/// Upper bound on product-grid cells an instance may expand to.
pub const DEFAULT_CELL_CAP: usize = 1_000_000;

/// Rows per evaluation chunk when sweeping the product grid.
const GRID_CHUNK: usize = 4096;

/// One asset's marginal as a finite atom distribution.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DiscreteMarginal {
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

impl DiscreteMarginal {
    /// Atoms with explicit probabilities; weights must be nonnegative and sum
    /// to 1 within 1e-12.
    pub fn new(atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidInput("a marginal needs at least one atom".into()));
        }
        if atoms.len() != weights.len() {
            return Err(Error::InvalidInput(format!(
                "{} atoms but {} weights",
                atoms.len(),
                weights.len()
            )));
        }
        if atoms.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidInput("atom locations must be finite".into()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidInput(
                "atom weights must be finite and nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "atom weights sum to {total}, expected 1 within 1e-12"
            )));
        }
        Ok(DiscreteMarginal { atoms, weights })
    }

    /// Equal-probability atoms.
    pub fn uniform(atoms: Vec<f64>) -> Result<Self> {
        let n = atoms.len();
        if n == 0 {
            return Err(Error::InvalidInput("a marginal needs at least one atom".into()));
        }
        let weights = vec![1.0 / n as f64; n];
        Self::new(atoms, weights)
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.atoms
            .iter()
            .zip(&self.weights)
            .map(|(a, w)| a * w)
            .sum()
    }
}

/// A d-asset market with atomic marginals; the joint support is the full
/// product grid of the per-asset atoms.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DiscreteInstance {
    marginals: Vec<DiscreteMarginal>,
}

impl DiscreteInstance {
    pub fn new(marginals: Vec<DiscreteMarginal>) -> Result<Self> {
        if marginals.is_empty() {
            return Err(Error::InvalidInput("an instance needs at least one marginal".into()));
        }
        Ok(DiscreteInstance { marginals })
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    pub fn marginals(&self) -> &[DiscreteMarginal] {
        &self.marginals
    }

    /// Number of product-grid cells (saturating on overflow).
    pub fn cells(&self) -> usize {
        self.marginals
            .iter()
            .map(|m| m.len())
            .fold(1usize, |acc, n| acc.saturating_mul(n))
    }

    /// Per-asset means — the natural input scale for the dual networks.
    pub fn scales(&self) -> Vec<f64> {
        self.marginals.iter().map(|m| m.mean()).collect()
    }

    /// Decompose a cell index into per-asset atom indices (last asset fastest).
    pub fn unrank(&self, cell: usize, out: &mut [usize]) {
        debug_assert_eq!(out.len(), self.dim());
        let mut k = cell;
        for j in (0..self.dim()).rev() {
            let n = self.marginals[j].len();
            out[j] = k % n;
            k /= n;
        }
        debug_assert_eq!(k, 0, "cell index out of range");
    }

    /// Atom prices of one cell.
    pub fn cell_atoms(&self, cell: usize, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dim());
        let mut k = cell;
        for j in (0..self.dim()).rev() {
            let m = &self.marginals[j];
            out[j] = m.atoms[k % m.len()];
            k /= m.len();
        }
    }

    /// Product-coupling probability of one cell.
    pub fn cell_weight(&self, cell: usize) -> f64 {
        let mut k = cell;
        let mut w = 1.0;
        for j in (0..self.dim()).rev() {
            let m = &self.marginals[j];
            w *= m.weights[k % m.len()];
            k /= m.len();
        }
        w
    }
}

/// Put each marginal on `grid_sizes[j]` equal-probability atoms at the
/// quantile midpoints (k − ½)/n, k = 1..n. Equal-probability atoms keep the
/// later LP rows uniformly scaled.
pub fn discretize(spec: &MarketSpec, grid_sizes: &[usize]) -> Result<DiscreteInstance> {
    spec.validate()?;
    if grid_sizes.len() != spec.dim() {
        return Err(Error::InvalidInput(format!(
            "{} grid sizes for {} assets",
            grid_sizes.len(),
            spec.dim()
        )));
    }
    let mut marginals = Vec::with_capacity(spec.dim());
    for (j, &n) in grid_sizes.iter().enumerate() {
        if n < 2 {
            return Err(Error::InvalidInput(format!(
                "asset {j}: at least 2 atoms required, got {n}"
            )));
        }
        let mut atoms = Vec::with_capacity(n);
        for k in 1..=n {
            let u = (k as f64 - 0.5) / n as f64;
            atoms.push(spec.marginal_quantile(j, u)?);
        }
        marginals.push(DiscreteMarginal::uniform(atoms)?);
    }
    let instance = DiscreteInstance::new(marginals)?;
    if instance.cells() > DEFAULT_CELL_CAP {
        return Err(Error::SizeCap(format!(
            "product grid has {} cells, cap is {DEFAULT_CELL_CAP}",
            instance.cells()
        )));
    }
    Ok(instance)
}

/// Exact payoff expectation under the product coupling of the instance's
/// marginals. Used to manufacture constraint prices that are consistent with
/// a discrete market by construction.
pub fn product_price(instance: &DiscreteInstance, payoff: &PayoffExpr) -> Result<f64> {
    if payoff.dim() != instance.dim() {
        return Err(Error::InvalidInput(format!(
            "payoff binds {} assets, instance has {}",
            payoff.dim(),
            instance.dim()
        )));
    }
    let cells = instance.cells();
    if cells > DEFAULT_CELL_CAP {
        return Err(Error::SizeCap(format!(
            "product grid has {cells} cells, cap is {DEFAULT_CELL_CAP}"
        )));
    }
    let d = instance.dim();
    let mut buf = Array2::<f64>::zeros((GRID_CHUNK, d));
    let mut row_atoms = vec![0.0; d];
    let mut total = 0.0;
    let mut start = 0;
    while start < cells {
        let take = GRID_CHUNK.min(cells - start);
        for r in 0..take {
            instance.cell_atoms(start + r, &mut row_atoms);
            for j in 0..d {
                buf[(r, j)] = row_atoms[j];
            }
        }
        let vals = payoff.eval_batch(&buf.slice(ndarray::s![..take, ..]))?;
        for r in 0..take {
            total += instance.cell_weight(start + r) * vals[r];
        }
        start += take;
    }
    Ok(total)
}

/// Price tolerance below which a constraint collapses to a single equality
/// row instead of a two-sided band.
pub const EXACT_PRICE_TOL: f64 = 1e-8;

/// LP-side tolerance for a quoted price: three standard errors for simulated
/// prices (floored at 1e-4 so bands never vanish from a lucky run), and
/// essentially exact for analytically known prices.
pub fn default_tolerance(stderr: Option<f64>) -> f64 {
    match stderr {
        Some(s) => (3.0 * s).max(1e-4),
        None => 1e-9,
    }
}

/// An instrument price constraint for the oracle: the coupling must price
/// `payoff` within `tolerance` of `price`.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PriceConstraint {
    pub payoff: PayoffExpr,
    pub price: f64,
    /// Half-width of the admissible band; below [`EXACT_PRICE_TOL`] the
    /// constraint is imposed as an equality.
    pub tolerance: f64,
}

impl PriceConstraint {
    /// Constraint with an exact (equality) price.
    pub fn exact(payoff: PayoffExpr, price: f64) -> Self {
        PriceConstraint {
            payoff,
            price,
            tolerance: 0.0,
        }
    }

    /// Constraint from a training instrument, tolerance chosen by
    /// [`default_tolerance`] from its standard error.
    pub fn from_instrument(c: &ConstraintInstrument) -> Self {
        PriceConstraint {
            payoff: c.payoff.clone(),
            price: c.price,
            tolerance: default_tolerance(c.stderr),
        }
    }

    fn validate(&self, i: usize, dim: usize) -> Result<()> {
        if self.payoff.dim() != dim {
            return Err(Error::InvalidInput(format!(
                "constraint {i} binds {} assets, instance has {dim}",
                self.payoff.dim()
            )));
        }
        if !self.price.is_finite() {
            return Err(Error::InvalidInput(format!(
                "constraint {i} has non-finite price {}",
                self.price
            )));
        }
        if !self.tolerance.is_finite() || self.tolerance < 0.0 {
            return Err(Error::InvalidInput(format!(
                "constraint {i} has invalid tolerance {}",
                self.tolerance
            )));
        }
        Ok(())
    }
}

/// Identity of one LP row; duals and certificates align with this.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub enum RowLabel {
    /// Mass on asset `asset` must hit atom `atom`'s weight.
    Marginal { asset: usize, atom: usize },
    /// Equality-priced instrument.
    PriceExact { instrument: usize },
    /// Upper edge of an instrument's price band.
    PriceUpper { instrument: usize },
    /// Lower edge of an instrument's price band.
    PriceLower { instrument: usize },
}

/// Exact bound from the transport LP.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LpBound {
    /// Optimal E[target] over the constrained couplings.
    pub value: f64,
    /// The optimal coupling: (cell index, mass) for cells carrying mass.
    pub support: Vec<(usize, f64)>,
    /// Row duals of the minimization form (see `rows` for identities).
    pub duals: Vec<f64>,
    pub rows: Vec<RowLabel>,
    pub iterations: usize,
}

/// Outcome of the price-system consistency check.
#[derive(Debug, Clone, serde::Serialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// Minimal mass the constraints miss by (0 when feasible).
    pub infeasibility_mass: f64,
    /// When infeasible: nonzero dual weights per row — a portfolio of
    /// marginal positions and instrument trades with positive payout against
    /// every admissible coupling.
    pub certificate: Option<Vec<(RowLabel, f64)>>,
}

/// The transport polytope LP, columns generated on demand: one variable per
/// product-grid cell plus one slack per band edge.
struct TransportLp<'a> {
    instance: &'a DiscreteInstance,
    cells: usize,
    rows: Vec<RowLabel>,
    /// row_of[asset][atom] — `None` for the dropped redundant rows.
    row_of: Vec<Vec<Option<usize>>>,
    /// Per constraint: the LP rows its φ-coefficients appear in.
    cons_rows: Vec<Vec<usize>>,
    /// Per slack column: (row, coefficient).
    slacks: Vec<(usize, f64)>,
    /// Cell objective (already negated for maximization); `None` = zero cost.
    costs: Option<Vec<f64>>,
    /// φ_i per cell, shape (cells, n_constraints).
    phis: Array2<f64>,
    rhs: Vec<f64>,
}

impl crate::simplex::ColumnSource for TransportLp<'_> {
    fn nrows(&self) -> usize {
        self.rows.len()
    }

    fn ncols(&self) -> usize {
        self.cells + self.slacks.len()
    }

    fn col(&self, j: usize, out: &mut [f64]) {
        out.fill(0.0);
        if j < self.cells {
            let mut k = j;
            for a in (0..self.instance.dim()).rev() {
                let n = self.instance.marginals()[a].len();
                if let Some(r) = self.row_of[a][k % n] {
                    out[r] = 1.0;
                }
                k /= n;
            }
            for (i, rows) in self.cons_rows.iter().enumerate() {
                let v = self.phis[(j, i)];
                for &r in rows {
                    out[r] = v;
                }
            }
        } else {
            let (row, coeff) = self.slacks[j - self.cells];
            out[row] = coeff;
        }
    }

    fn cost(&self, j: usize) -> f64 {
        if j < self.cells {
            self.costs.as_ref().map_or(0.0, |c| c[j])
        } else {
            0.0
        }
    }
}

/// Evaluate a payoff on every product-grid cell, chunked.
fn eval_on_grid(instance: &DiscreteInstance, payoff: &PayoffExpr) -> Result<Vec<f64>> {
    let cells = instance.cells();
    let d = instance.dim();
    let mut out = Vec::with_capacity(cells);
    let mut buf = Array2::<f64>::zeros((GRID_CHUNK.min(cells), d));
    let mut row_atoms = vec![0.0; d];
    let mut start = 0;
    while start < cells {
        let take = GRID_CHUNK.min(cells - start);
        for r in 0..take {
            instance.cell_atoms(start + r, &mut row_atoms);
            for j in 0..d {
                buf[(r, j)] = row_atoms[j];
            }
        }
        let vals = payoff.eval_batch(&buf.slice(ndarray::s![..take, ..]))?;
        out.extend(vals.iter().copied());
        start += take;
    }
    Ok(out)
}

fn build_lp<'a>(
    instance: &'a DiscreteInstance,
    objective: Option<(&PayoffExpr, Direction)>,
    constraints: &[PriceConstraint],
    max_cells: usize,
) -> Result<TransportLp<'a>> {
    let d = instance.dim();
    let cells = instance.cells();
    if cells > max_cells {
        return Err(Error::SizeCap(format!(
            "product grid has {cells} cells, cap is {max_cells}"
        )));
    }
    for (i, c) in constraints.iter().enumerate() {
        c.validate(i, d)?;
    }
    if let Some((target, _)) = objective {
        if target.dim() != d {
            return Err(Error::InvalidInput(format!(
                "target binds {} assets, instance has {d}",
                target.dim()
            )));
        }
    }

    // Marginal rows: all atoms of asset 0; for each further asset the last
    // atom's row is implied by the others plus total-mass conservation, so it
    // is dropped to reduce degeneracy.
    let mut rows = Vec::new();
    let mut rhs = Vec::new();
    let mut row_of: Vec<Vec<Option<usize>>> = Vec::with_capacity(d);
    for (a, m) in instance.marginals().iter().enumerate() {
        let keep = if a == 0 { m.len() } else { m.len() - 1 };
        let mut per_atom = Vec::with_capacity(m.len());
        for k in 0..m.len() {
            if k < keep {
                per_atom.push(Some(rows.len()));
                rows.push(RowLabel::Marginal { asset: a, atom: k });
                rhs.push(m.weights()[k]);
            } else {
                per_atom.push(None);
            }
        }
        row_of.push(per_atom);
    }

    let mut cons_rows = Vec::with_capacity(constraints.len());
    let mut slacks = Vec::new();
    let mut phi_cols = Vec::with_capacity(constraints.len());
    for (i, c) in constraints.iter().enumerate() {
        phi_cols.push(eval_on_grid(instance, &c.payoff)?);
        if c.tolerance < EXACT_PRICE_TOL {
            let r = rows.len();
            rows.push(RowLabel::PriceExact { instrument: i });
            rhs.push(c.price);
            cons_rows.push(vec![r]);
        } else {
            let up = rows.len();
            rows.push(RowLabel::PriceUpper { instrument: i });
            rhs.push(c.price + c.tolerance);
            slacks.push((up, 1.0));
            let lo = rows.len();
            rows.push(RowLabel::PriceLower { instrument: i });
            rhs.push(c.price - c.tolerance);
            slacks.push((lo, -1.0));
            cons_rows.push(vec![up, lo]);
        }
    }

    let mut phis = Array2::<f64>::zeros((cells, constraints.len()));
    for (i, col) in phi_cols.into_iter().enumerate() {
        for (j, v) in col.into_iter().enumerate() {
            phis[(j, i)] = v;
        }
    }

    let costs = match objective {
        None => None,
        Some((target, direction)) => {
            let f = eval_on_grid(instance, target)?;
            Some(match direction {
                // Simplex minimizes; an upper bound maximizes E[f].
                Direction::Upper => f.into_iter().map(|v| -v).collect(),
                Direction::Lower => f,
            })
        }
    };

    Ok(TransportLp {
        instance,
        cells,
        rows,
        row_of,
        cons_rows,
        slacks,
        costs,
        phis,
        rhs,
    })
}

/// Exact price bound over all couplings of the instance's marginals whose
/// instrument prices fall inside the given bands. `Direction::Upper`
/// maximizes E[target], `Direction::Lower` minimizes it.
pub fn solve_primal(
    instance: &DiscreteInstance,
    target: &PayoffExpr,
    direction: Direction,
    constraints: &[PriceConstraint],
    max_cells: usize,
) -> Result<LpBound> {
    let lp = build_lp(instance, Some((target, direction)), constraints, max_cells)?;
    let outcome = crate::simplex::solve(&lp, &lp.rhs, &crate::simplex::SimplexOptions::default())?;
    match outcome {
        crate::simplex::LpOutcome::Optimal(s) => {
            let value = match direction {
                Direction::Upper => -s.objective,
                Direction::Lower => s.objective,
            };
            let support: Vec<(usize, f64)> = s.x[..lp.cells]
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > 1e-12)
                .map(|(c, v)| (c, *v))
                .collect();
            Ok(LpBound {
                value,
                support,
                duals: s.duals,
                rows: lp.rows.clone(),
                iterations: s.iterations,
            })
        }
        crate::simplex::LpOutcome::Infeasible {
            phase1_objective, ..
        } => Err(Error::Infeasible(format!(
            "price system admits no coupling (residual mass {phase1_objective:.3e}); \
             run the feasibility check for a certificate"
        ))),
        crate::simplex::LpOutcome::Unbounded => Err(Error::Numerical(
            "transport program reported an unbounded direction over bounded mass".into(),
        )),
    }
}

/// Does any coupling of the marginals reproduce all quoted prices? Infeasible
/// price systems come back with a dual certificate — a static portfolio with
/// strictly positive value against every admissible coupling.
pub fn check_feasibility(
    instance: &DiscreteInstance,
    constraints: &[PriceConstraint],
    max_cells: usize,
) -> Result<FeasibilityReport> {
    let lp = build_lp(instance, None, constraints, max_cells)?;
    let outcome = crate::simplex::solve(&lp, &lp.rhs, &crate::simplex::SimplexOptions::default())?;
    match outcome {
        crate::simplex::LpOutcome::Optimal(_) => Ok(FeasibilityReport {
            feasible: true,
            infeasibility_mass: 0.0,
            certificate: None,
        }),
        crate::simplex::LpOutcome::Infeasible {
            farkas,
            phase1_objective,
        } => {
            let certificate: Vec<(RowLabel, f64)> = lp
                .rows
                .iter()
                .zip(&farkas)
                .filter(|(_, y)| y.abs() > 1e-9)
                .map(|(r, y)| (*r, *y))
                .collect();
            Ok(FeasibilityReport {
                feasible: false,
                infeasibility_mass: phase1_objective,
                certificate: Some(certificate),
            })
        }
        crate::simplex::LpOutcome::Unbounded => Err(Error::Numerical(
            "feasibility program reported an unbounded direction".into(),
        )),
    }
}
