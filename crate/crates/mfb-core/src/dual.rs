//! Penalized dual training for model-free price bounds.
//!
//! The upper bound on E[f] over all couplings with the given marginals and
//! instrument prices is approached from the hedging side: one network ψ_j per
//! asset (the marginal legs), one weight b_i per traded instrument, and a
//! penalty γ·max(y, 0)² on the shortfall y = f − Σψ_j − Σb_iφ_i, integrated
//! over a samplable reference measure θ. Training minimizes
//!
//!   mean[Σ_j ψ_j(x_j)] + Σ_i b_i p_i + γ·mean[max(f − Σψ_j − Σb_iφ_i, 0)²]
//!
//! with Adam on minibatches from θ. By default θ is the product of the
//! marginals, so one batch serves both the marginal-cost and penalty
//! integrals; with the benchmark-copula θ an independent product batch feeds
//! the cost term. Lower bounds negate the target's values (never the
//! expression), train the same machinery, and negate the result.
//!
//! Determinism: every random object is derived from the config seed and a
//! purpose label — network init from "init-net-j", iteration i's batches from
//! "batch-i"/"cost-i", the final estimate from "fresh-eval", the residual
//! diagnostic from "slack". Resuming from a checkpoint therefore replays the
//! exact stream without storing RNG state.

use std::collections::HashSet;

use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::DiscreteInstance;
use crate::market::{MarketSpec, PathSampler, SampleBatch};
use crate::math::quantile_sorted;
use crate::nn::{adam_step, AdamState, Mlp, MlpGrad, MlpWorkspace};
use crate::payoff::PayoffExpr;
use crate::seed::derive_seed;

/// Rows per chunk when evaluating large fresh batches or grids.
const EVAL_CHUNK: usize = 8192;

/// Which side of the price interval to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Upper,
    Lower,
}

impl Direction {
    /// Sign applied to the target's values before training (+1 upper, −1 lower).
    pub fn sign(self) -> f64 {
        match self {
            Direction::Upper => 1.0,
            Direction::Lower => -1.0,
        }
    }
}

/// Reference measure θ for the penalty integral.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaSource {
    /// Product of the marginals — the default; one batch serves both integrals.
    Product,
    /// The benchmark Gaussian-copula coupling; the marginal-cost term then
    /// draws its own independent product batch.
    BenchmarkCopula,
}

/// A traded instrument whose price constrains the feasible couplings.
#[derive(Debug, Clone, Serialize)]
pub struct ConstraintInstrument {
    pub payoff: PayoffExpr,
    pub price: f64,
    /// Monte Carlo standard error when the price was simulated; `None` for
    /// exact prices.
    pub stderr: Option<f64>,
}

/// A bound computation: market, target payoff, price constraints, direction.
#[derive(Debug, Clone, Serialize)]
pub struct BoundProblem {
    pub spec: MarketSpec,
    pub target: PayoffExpr,
    pub constraints: Vec<ConstraintInstrument>,
    pub direction: Direction,
}

impl BoundProblem {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let d = self.spec.dim();
        if self.target.dim() != d {
            return Err(Error::InvalidInput(format!(
                "target binds {} assets, market has {}",
                self.target.dim(),
                d
            )));
        }
        for (i, c) in self.constraints.iter().enumerate() {
            if c.payoff.dim() != d {
                return Err(Error::InvalidInput(format!(
                    "constraint {i} binds {} assets, market has {}",
                    c.payoff.dim(),
                    d
                )));
            }
            if !c.price.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "constraint {i} has non-finite price {}",
                    c.price
                )));
            }
            if let Some(s) = c.stderr {
                if !s.is_finite() || s < 0.0 {
                    return Err(Error::InvalidInput(format!(
                        "constraint {i} has invalid stderr {s}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Drop exact repeats of (canonical payoff text, price), keeping first
/// occurrences in order. Same payoff at a different price is kept — the LP
/// side is the place that detects genuinely contradictory quotes.
fn dedup_constraints(constraints: &[ConstraintInstrument]) -> Vec<ConstraintInstrument> {
    let mut seen: HashSet<(String, u64)> = HashSet::new();
    let mut out = Vec::with_capacity(constraints.len());
    for c in constraints {
        if seen.insert((c.payoff.to_canonical_string(), c.price.to_bits())) {
            out.push(c.clone());
        }
    }
    out
}

/// Training hyperparameters. The defaults are the production configuration;
/// tests and the timing sweep override `iterations` and the network size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    /// Penalty factor γ.
    pub gamma: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Multiplier applied to the learning rate late in the run.
    pub decay_factor: f64,
    /// Fraction of the run after which the decay applies (0.8 → last 20%).
    pub decay_frac: f64,
    /// Fresh θ-samples for the final bound estimate.
    pub eval_samples: usize,
    pub theta: ThetaSource,
    pub hidden_layers: usize,
    pub hidden_width: usize,
    /// Copula samples for the residual diagnostic.
    pub slack_samples: usize,
    /// Residuals below −slack_tol count as superhedge violations.
    pub slack_tol: f64,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            gamma: 80.0,
            batch_size: 128,
            iterations: 25_000,
            learning_rate: 1e-3,
            decay_factor: 0.1,
            decay_frac: 0.8,
            eval_samples: 1 << 17,
            theta: ThetaSource::Product,
            hidden_layers: 4,
            hidden_width: 64,
            slack_samples: 1 << 16,
            slack_tol: 1e-3,
            seed: 0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::InvalidInput(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidInput("batch_size must be at least 2".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidInput("iterations must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidInput("learning_rate must be positive".into()));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            return Err(Error::InvalidInput("decay_factor must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.decay_frac) {
            return Err(Error::InvalidInput("decay_frac must lie in [0, 1]".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::InvalidInput("eval_samples must be positive".into()));
        }
        if self.hidden_layers == 0 || self.hidden_width == 0 {
            return Err(Error::InvalidInput("networks need at least one hidden unit".into()));
        }
        if self.slack_samples == 0 {
            return Err(Error::InvalidInput("slack_samples must be positive".into()));
        }
        if !(self.slack_tol.is_finite() && self.slack_tol >= 0.0) {
            return Err(Error::InvalidInput("slack_tol must be nonnegative".into()));
        }
        Ok(())
    }

    /// Layer widths of each per-asset network.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_layers + 2);
        w.push(1);
        w.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        w.push(1);
        w
    }

    /// Learning rate for 0-based iteration `i`: the base rate, times
    /// `decay_factor` once `decay_frac` of the run is behind us.
    pub fn lr_at(&self, i: usize) -> f64 {
        let threshold = (self.decay_frac * self.iterations as f64).round() as usize;
        if i >= threshold {
            self.learning_rate * self.decay_factor
        } else {
            self.learning_rate
        }
    }
}

/// Distribution summary of the superhedging residual r = Σψ + Σbφ − f on
/// copula samples. A residual below −tol means the trained portfolio fails
/// to dominate the (signed) target there.
#[derive(Debug, Clone, Serialize)]
pub struct SlackStats {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub q01: f64,
    pub q25: f64,
    pub q50: f64,
    pub q75: f64,
    pub q99: f64,
    /// Fraction of samples with r < −tol.
    pub violation_fraction: f64,
    pub tol: f64,
}

fn slack_stats_from(mut residuals: Vec<f64>, tol: f64) -> SlackStats {
    let n = residuals.len();
    let mean = residuals.iter().sum::<f64>() / n as f64;
    let violations = residuals.iter().filter(|r| **r < -tol).count();
    residuals.sort_by(|a, b| a.partial_cmp(b).expect("residuals are finite"));
    SlackStats {
        n,
        mean,
        min: residuals[0],
        max: residuals[n - 1],
        q01: quantile_sorted(&residuals, 0.01),
        q25: quantile_sorted(&residuals, 0.25),
        q50: quantile_sorted(&residuals, 0.50),
        q75: quantile_sorted(&residuals, 0.75),
        q99: quantile_sorted(&residuals, 0.99),
        violation_fraction: violations as f64 / n as f64,
        tol,
    }
}

/// The trained dual variables: one network per asset plus the instrument
/// weights. `scale[j]` divides asset j's price before it enters network j.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DualState {
    psis: Vec<Mlp>,
    b: Vec<f64>,
    scale: Vec<f64>,
}

impl DualState {
    pub fn new(psis: Vec<Mlp>, b: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        if psis.is_empty() {
            return Err(Error::InvalidInput("at least one network required".into()));
        }
        for (j, p) in psis.iter().enumerate() {
            let w = p.widths();
            if w[0] != 1 || *w.last().unwrap() != 1 {
                return Err(Error::InvalidInput(format!(
                    "network {j} must map scalar to scalar, has widths {w:?}"
                )));
            }
        }
        if scale.len() != psis.len() {
            return Err(Error::InvalidInput(format!(
                "{} scales for {} networks",
                scale.len(),
                psis.len()
            )));
        }
        if scale.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidInput("scales must be positive and finite".into()));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("instrument weights must be finite".into()));
        }
        Ok(DualState { psis, b, scale })
    }

    pub fn dim(&self) -> usize {
        self.psis.len()
    }

    pub fn psis(&self) -> &[Mlp] {
        &self.psis
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    /// Σ_j ψ_j(x_j / scale_j) for every row of `data`, evaluated in chunks.
    pub fn psi_sum(&self, data: &ArrayView2<f64>) -> Result<Array1<f64>> {
        psi_sum(&self.psis, &self.scale, data)
    }
}

fn psi_sum(psis: &[Mlp], scale: &[f64], data: &ArrayView2<f64>) -> Result<Array1<f64>> {
    let d = psis.len();
    if data.ncols() != d {
        return Err(Error::InvalidInput(format!(
            "{} sample columns for {d} networks",
            data.ncols()
        )));
    }
    let n = data.nrows();
    let mut out = Array1::<f64>::zeros(n);
    let chunk_rows = EVAL_CHUNK.min(n.max(1));
    let mut col = Array2::<f64>::zeros((chunk_rows, 1));
    let mut ws: Vec<MlpWorkspace> = psis.iter().map(|p| MlpWorkspace::new(p, chunk_rows)).collect();
    let mut start = 0;
    while start < n {
        let take = chunk_rows.min(n - start);
        for j in 0..d {
            for r in 0..take {
                col[(r, 0)] = data[(start + r, j)] / scale[j];
            }
            psis[j].forward(&col.slice(s![..take, ..]), &mut ws[j])?;
            let o = ws[j].output();
            for r in 0..take {
                out[start + r] += o[(r, 0)];
            }
        }
        start += take;
    }
    Ok(out)
}

/// Outcome of one training run. For LOWER problems the sign flip is already
/// undone in `bound` and `trace`; `fresh_eval`, `b_values` and `slack` refer
/// to the internally trained problem (the superhedge of −f).
#[derive(Debug, Clone, Serialize)]
pub struct BoundResult {
    /// The price bound, correctly signed for the requested direction.
    pub bound: f64,
    /// Raw objective of the internal problem on the fresh evaluation batch.
    pub fresh_eval: f64,
    /// Per-iteration minibatch objective in original units (length = iterations run).
    pub trace: Vec<f64>,
    /// Learned instrument weights of the internal problem, aligned with the
    /// deduplicated constraint list.
    pub b_values: Vec<f64>,
    pub slack: SlackStats,
    pub direction: Direction,
    /// Configuration echo for provenance.
    pub config: TrainerConfig,
    /// Trained networks; excluded from serialization for size.
    #[serde(skip_serializing)]
    pub state: DualState,
}

/// Serializable training snapshot. RNG state is not stored: batches are
/// derived from (seed, iteration), so resuming replays the identical stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub iteration: usize,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub trace: Vec<f64>,
    pub config: TrainerConfig,
}

/// Where the marginals come from.
enum MarginalModel {
    Lognormal(MarketSpec),
    Discrete {
        instance: DiscreteInstance,
        samplers: Vec<WeightedIndex<f64>>,
    },
}

impl MarginalModel {
    fn dim(&self) -> usize {
        match self {
            MarginalModel::Lognormal(spec) => spec.dim(),
            MarginalModel::Discrete { instance, .. } => instance.dim(),
        }
    }

    fn scales(&self) -> Vec<f64> {
        match self {
            MarginalModel::Lognormal(spec) => (0..spec.dim()).map(|j| spec.marginal_mean(j)).collect(),
            MarginalModel::Discrete { instance, .. } => instance.scales(),
        }
    }

    /// Fill `out` with one batch: the benchmark copula when `copula` is set,
    /// otherwise the product of the marginals.
    fn fill(&self, seed: u64, copula: bool, mut out: ArrayViewMut2<f64>) -> Result<()> {
        match self {
            MarginalModel::Lognormal(spec) => {
                let mut sampler = if copula {
                    PathSampler::benchmark(spec, seed)?
                } else {
                    PathSampler::independent(spec, seed)?
                };
                sampler.fill(out);
                Ok(())
            }
            MarginalModel::Discrete { instance, samplers } => {
                if copula {
                    return Err(Error::InvalidInput(
                        "the benchmark-copula reference measure requires a lognormal market".into(),
                    ));
                }
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                let marginals = instance.marginals();
                for r in 0..out.nrows() {
                    for j in 0..marginals.len() {
                        out[(r, j)] = marginals[j].atoms()[samplers[j].sample(&mut rng)];
                    }
                }
                Ok(())
            }
        }
    }
}

/// Step-by-step training driver. `train`/`lower_bound`/`train_discrete` wrap
/// it; it is public so callers can time individual iterations, checkpoint,
/// and resume.
pub struct Trainer {
    model: MarginalModel,
    target: PayoffExpr,
    constraints: Vec<ConstraintInstrument>,
    direction: Direction,
    sign: f64,
    copula: bool,
    config: TrainerConfig,
    scale: Vec<f64>,
    prices: Vec<f64>,

    psis: Vec<Mlp>,
    b: Vec<f64>,
    params: Vec<f64>,
    grads: Vec<f64>,
    adam: AdamState,
    net_len: usize,
    iteration: usize,
    trace: Vec<f64>,

    // reusable per-iteration buffers
    batch: Array2<f64>,
    cost_batch: Array2<f64>,
    outputs: Array2<f64>,
    cost_outputs: Array2<f64>,
    col_in: Array2<f64>,
    ws_pen: Vec<MlpWorkspace>,
    ws_cost: Vec<MlpWorkspace>,
    grad_buf: MlpGrad,
    phi: Array2<f64>,
    relu_y: Vec<f64>,
    dout: Array2<f64>,
    dout_cost: Array2<f64>,
}

impl Trainer {
    /// Trainer over lognormal marginals (the production path).
    pub fn new(problem: &BoundProblem, config: &TrainerConfig) -> Result<Self> {
        problem.validate()?;
        Self::build(
            MarginalModel::Lognormal(problem.spec.clone()),
            problem.target.clone(),
            dedup_constraints(&problem.constraints),
            problem.direction,
            config.clone(),
        )
    }

    /// Trainer over atomic marginals — used to cross-check against the exact
    /// LP on small instances. θ is the product of the atom marginals; the
    /// final estimate integrates the product grid exactly instead of sampling.
    pub fn new_discrete(
        instance: &DiscreteInstance,
        target: &PayoffExpr,
        constraints: &[ConstraintInstrument],
        direction: Direction,
        config: &TrainerConfig,
    ) -> Result<Self> {
        if target.dim() != instance.dim() {
            return Err(Error::InvalidInput(format!(
                "target binds {} assets, instance has {}",
                target.dim(),
                instance.dim()
            )));
        }
        for (i, c) in constraints.iter().enumerate() {
            if c.payoff.dim() != instance.dim() {
                return Err(Error::InvalidInput(format!(
                    "constraint {i} binds {} assets, instance has {}",
                    c.payoff.dim(),
                    instance.dim()
                )));
            }
        }
        let samplers = instance
            .marginals()
            .iter()
            .map(|m| {
                WeightedIndex::new(m.weights().iter().copied())
                    .map_err(|e| Error::InvalidInput(format!("atom weights: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::build(
            MarginalModel::Discrete {
                instance: instance.clone(),
                samplers,
            },
            target.clone(),
            dedup_constraints(constraints),
            direction,
            config.clone(),
        )
    }

    fn build(
        model: MarginalModel,
        target: PayoffExpr,
        constraints: Vec<ConstraintInstrument>,
        direction: Direction,
        config: TrainerConfig,
    ) -> Result<Self> {
        config.validate()?;
        let copula = matches!(config.theta, ThetaSource::BenchmarkCopula);
        if copula && matches!(model, MarginalModel::Discrete { .. }) {
            return Err(Error::InvalidInput(
                "the benchmark-copula reference measure requires a lognormal market".into(),
            ));
        }
        let d = model.dim();
        let scale = model.scales();
        if scale.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::InvalidInput(
                "marginal means must be positive to scale network inputs".into(),
            ));
        }
        let widths = config.widths();
        let mut psis = Vec::with_capacity(d);
        for j in 0..d {
            let mut rng = crate::seed::rng_for(config.seed, &format!("init-net-{j}"));
            psis.push(Mlp::xavier_init(&widths, &mut rng)?);
        }
        let net_len = psis[0].param_count();
        let k = constraints.len();
        let n_params = d * net_len + k;
        let mut params = vec![0.0; n_params];
        for (j, p) in psis.iter().enumerate() {
            p.copy_params_to(&mut params[j * net_len..(j + 1) * net_len]);
        }
        let prices: Vec<f64> = constraints.iter().map(|c| c.price).collect();
        let n = config.batch_size;
        let ws_pen = psis.iter().map(|p| MlpWorkspace::new(p, n)).collect();
        let ws_cost = if copula {
            psis.iter().map(|p| MlpWorkspace::new(p, n)).collect()
        } else {
            Vec::new()
        };
        let grad_buf = MlpGrad::zeros_like(&psis[0]);
        let iterations = config.iterations;
        Ok(Trainer {
            sign: direction.sign(),
            copula,
            scale,
            prices,
            b: vec![0.0; k],
            grads: vec![0.0; n_params],
            adam: AdamState::new(n_params),
            net_len,
            iteration: 0,
            trace: Vec::with_capacity(iterations),
            batch: Array2::zeros((n, d)),
            cost_batch: Array2::zeros(if copula { (n, d) } else { (0, 0) }),
            outputs: Array2::zeros((n, d)),
            cost_outputs: Array2::zeros(if copula { (n, d) } else { (0, 0) }),
            col_in: Array2::zeros((n, 1)),
            ws_pen,
            ws_cost,
            grad_buf,
            phi: Array2::zeros((n, k)),
            relu_y: vec![0.0; n],
            dout: Array2::zeros((n, 1)),
            dout_cost: Array2::from_elem((n, 1), 1.0 / n as f64),
            model,
            target,
            constraints,
            direction,
            config,
            psis,
            params,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Constraints after deduplication — `b_values` aligns with this list.
    pub fn constraints(&self) -> &[ConstraintInstrument] {
        &self.constraints
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Objective trace in original units, one entry per completed iteration.
    pub fn trace(&self) -> &[f64] {
        &self.trace
    }

    /// Snapshot of the current dual variables.
    pub fn state(&self) -> DualState {
        DualState {
            psis: self.psis.clone(),
            b: self.b.clone(),
            scale: self.scale.clone(),
        }
    }

    /// One Adam step on a fresh minibatch; returns the trace entry.
    pub fn step(&mut self) -> Result<f64> {
        let i = self.iteration;
        let d = self.model.dim();
        let n = self.config.batch_size;
        let n_f = n as f64;
        let k = self.constraints.len();
        let gamma = self.config.gamma;

        let pen_seed = derive_seed(self.config.seed, &format!("batch-{i}"));
        self.model.fill(pen_seed, self.copula, self.batch.view_mut())?;
        if self.copula {
            let cost_seed = derive_seed(self.config.seed, &format!("cost-{i}"));
            self.model.fill(cost_seed, false, self.cost_batch.view_mut())?;
        }

        let f = self.target.eval_batch(&self.batch.view())?;
        for (ci, c) in self.constraints.iter().enumerate() {
            let v = c.payoff.eval_batch(&self.batch.view())?;
            self.phi.column_mut(ci).assign(&v);
        }

        for j in 0..d {
            for r in 0..n {
                self.col_in[(r, 0)] = self.batch[(r, j)] / self.scale[j];
            }
            self.psis[j].forward(&self.col_in.view(), &mut self.ws_pen[j])?;
            self.outputs
                .column_mut(j)
                .assign(&self.ws_pen[j].output().column(0));
        }
        if self.copula {
            for j in 0..d {
                for r in 0..n {
                    self.col_in[(r, 0)] = self.cost_batch[(r, j)] / self.scale[j];
                }
                self.psis[j].forward(&self.col_in.view(), &mut self.ws_cost[j])?;
                self.cost_outputs
                    .column_mut(j)
                    .assign(&self.ws_cost[j].output().column(0));
            }
        }

        let mut cost_sum = 0.0;
        let mut pen_sum = 0.0;
        for r in 0..n {
            let u: f64 = self.outputs.row(r).sum();
            let mut y = self.sign * f[r] - u;
            for ci in 0..k {
                y -= self.b[ci] * self.phi[(r, ci)];
            }
            let relu = y.max(0.0);
            self.relu_y[r] = relu;
            pen_sum += relu * relu;
            if !self.copula {
                cost_sum += u;
            }
        }
        if self.copula {
            for r in 0..n {
                cost_sum += self.cost_outputs.row(r).sum();
            }
        }
        let price_term: f64 = self.b.iter().zip(&self.prices).map(|(b, p)| b * p).sum();
        let loss = cost_sum / n_f + price_term + gamma * pen_sum / n_f;
        if !loss.is_finite() {
            return Err(Error::TrainingAbort {
                iteration: i + 1,
                msg: format!("objective became {loss}"),
            });
        }

        for r in 0..n {
            let pen_part = -2.0 * gamma * self.relu_y[r] / n_f;
            self.dout[(r, 0)] = if self.copula { pen_part } else { pen_part + 1.0 / n_f };
        }
        for j in 0..d {
            self.psis[j].backward(&mut self.ws_pen[j], &self.dout.view(), &mut self.grad_buf);
            if self.copula {
                self.psis[j].backward_accumulate(
                    &mut self.ws_cost[j],
                    &self.dout_cost.view(),
                    &mut self.grad_buf,
                );
            }
            self.grad_buf
                .copy_to(&mut self.grads[j * self.net_len..(j + 1) * self.net_len]);
        }
        let tail = d * self.net_len;
        for ci in 0..k {
            let mut g = self.prices[ci];
            for r in 0..n {
                g -= 2.0 * gamma * self.relu_y[r] * self.phi[(r, ci)] / n_f;
            }
            self.grads[tail + ci] = g;
        }

        let lr = self.config.lr_at(i);
        adam_step(&mut self.params, &self.grads, &mut self.adam, lr)?;
        for j in 0..d {
            self.psis[j]
                .copy_params_from(&self.params[j * self.net_len..(j + 1) * self.net_len]);
        }
        for ci in 0..k {
            self.b[ci] = self.params[tail + ci];
        }

        let entry = self.sign * loss;
        self.trace.push(entry);
        self.iteration += 1;
        Ok(entry)
    }

    /// Run the remaining iterations.
    pub fn run(&mut self) -> Result<()> {
        while self.iteration < self.config.iterations {
            self.step()?;
        }
        Ok(())
    }

    /// Final estimate: the objective on a large fresh batch (exact on the
    /// product grid for discrete marginals), plus the residual diagnostic.
    pub fn finish(&self) -> Result<BoundResult> {
        let fresh = self.fresh_objective()?;
        if !fresh.is_finite() {
            return Err(Error::Numerical(format!(
                "fresh evaluation produced {fresh}"
            )));
        }
        let slack = self.internal_slack()?;
        Ok(BoundResult {
            bound: self.sign * fresh,
            fresh_eval: fresh,
            trace: self.trace.clone(),
            b_values: self.b.clone(),
            slack,
            direction: self.direction,
            config: self.config.clone(),
            state: self.state(),
        })
    }

    /// Objective with the current parameters on fresh θ-samples; for discrete
    /// marginals both integrals are computed exactly on the product grid.
    fn fresh_objective(&self) -> Result<f64> {
        let gamma = self.config.gamma;
        let price_term: f64 = self.b.iter().zip(&self.prices).map(|(b, p)| b * p).sum();
        match &self.model {
            MarginalModel::Lognormal(spec) => {
                let n = self.config.eval_samples;
                let d = spec.dim();
                let seed = derive_seed(self.config.seed, "fresh-eval");
                let mut pen_sampler = if self.copula {
                    PathSampler::benchmark(spec, seed)?
                } else {
                    PathSampler::independent(spec, seed)?
                };
                let mut cost_sampler = if self.copula {
                    Some(PathSampler::independent(
                        spec,
                        derive_seed(self.config.seed, "fresh-eval-cost"),
                    )?)
                } else {
                    None
                };
                let chunk = EVAL_CHUNK.min(n);
                let mut buf = Array2::<f64>::zeros((chunk, d));
                let mut cost_sum = 0.0;
                let mut pen_sum = 0.0;
                let mut left = n;
                while left > 0 {
                    let take = chunk.min(left);
                    pen_sampler.fill(buf.slice_mut(s![..take, ..]));
                    let data = buf.slice(s![..take, ..]);
                    let psi = psi_sum(&self.psis, &self.scale, &data)?;
                    let fv = self.target.eval_batch(&data)?;
                    let mut y: Vec<f64> = (0..take).map(|r| self.sign * fv[r] - psi[r]).collect();
                    for (ci, c) in self.constraints.iter().enumerate() {
                        let pv = c.payoff.eval_batch(&data)?;
                        for r in 0..take {
                            y[r] -= self.b[ci] * pv[r];
                        }
                    }
                    for yr in &y {
                        let relu = yr.max(0.0);
                        pen_sum += relu * relu;
                    }
                    match &mut cost_sampler {
                        None => cost_sum += psi.sum(),
                        Some(cs) => {
                            cs.fill(buf.slice_mut(s![..take, ..]));
                            let psi_c = psi_sum(&self.psis, &self.scale, &buf.slice(s![..take, ..]))?;
                            cost_sum += psi_c.sum();
                        }
                    }
                    left -= take;
                }
                Ok(cost_sum / n as f64 + price_term + gamma * pen_sum / n as f64)
            }
            MarginalModel::Discrete { instance, .. } => {
                // Marginal-cost term, exactly per marginal.
                let mut cost = 0.0;
                for (j, m) in instance.marginals().iter().enumerate() {
                    let nj = m.len();
                    let mut col = Array2::<f64>::zeros((nj, 1));
                    for (r, a) in m.atoms().iter().enumerate() {
                        col[(r, 0)] = a / self.scale[j];
                    }
                    let out = self.psis[j].forward_owned(&col.view())?;
                    for (r, w) in m.weights().iter().enumerate() {
                        cost += w * out[(r, 0)];
                    }
                }
                // Penalty term, exactly over the product grid.
                let cells = instance.cells();
                let d = instance.dim();
                let chunk = EVAL_CHUNK.min(cells);
                let mut buf = Array2::<f64>::zeros((chunk, d));
                let mut row = vec![0.0; d];
                let mut pen_sum = 0.0;
                let mut start = 0;
                while start < cells {
                    let take = chunk.min(cells - start);
                    for r in 0..take {
                        instance.cell_atoms(start + r, &mut row);
                        for j in 0..d {
                            buf[(r, j)] = row[j];
                        }
                    }
                    let data = buf.slice(s![..take, ..]);
                    let psi = psi_sum(&self.psis, &self.scale, &data)?;
                    let fv = self.target.eval_batch(&data)?;
                    let mut y: Vec<f64> = (0..take).map(|r| self.sign * fv[r] - psi[r]).collect();
                    for (ci, c) in self.constraints.iter().enumerate() {
                        let pv = c.payoff.eval_batch(&data)?;
                        for r in 0..take {
                            y[r] -= self.b[ci] * pv[r];
                        }
                    }
                    for (r, yr) in y.iter().enumerate() {
                        let relu = yr.max(0.0);
                        pen_sum += instance.cell_weight(start + r) * relu * relu;
                    }
                    start += take;
                }
                Ok(cost + price_term + gamma * pen_sum)
            }
        }
    }

    /// Residual diagnostic under the benchmark copula (or the product of the
    /// atoms for discrete marginals, which have no copula).
    fn internal_slack(&self) -> Result<SlackStats> {
        let n = self.config.slack_samples;
        let seed = derive_seed(self.config.seed, "slack");
        let residuals = match &self.model {
            MarginalModel::Lognormal(spec) => {
                let mut sampler = PathSampler::benchmark(spec, seed)?;
                let d = spec.dim();
                let chunk = EVAL_CHUNK.min(n);
                let mut buf = Array2::<f64>::zeros((chunk, d));
                let mut res = Vec::with_capacity(n);
                let mut left = n;
                while left > 0 {
                    let take = chunk.min(left);
                    sampler.fill(buf.slice_mut(s![..take, ..]));
                    let data = buf.slice(s![..take, ..]);
                    self.residual_chunk(&data, &mut res)?;
                    left -= take;
                }
                res
            }
            MarginalModel::Discrete { .. } => {
                let d = self.model.dim();
                let chunk = EVAL_CHUNK.min(n);
                let mut buf = Array2::<f64>::zeros((chunk, d));
                let mut res = Vec::with_capacity(n);
                let mut left = n;
                let mut piece = 0u64;
                while left > 0 {
                    let take = chunk.min(left);
                    let piece_seed = derive_seed(seed, &format!("piece-{piece}"));
                    self.model.fill(piece_seed, false, buf.slice_mut(s![..take, ..]))?;
                    let data = buf.slice(s![..take, ..]);
                    self.residual_chunk(&data, &mut res)?;
                    left -= take;
                    piece += 1;
                }
                res
            }
        };
        Ok(slack_stats_from(residuals, self.config.slack_tol))
    }

    fn residual_chunk(&self, data: &ArrayView2<f64>, out: &mut Vec<f64>) -> Result<()> {
        let take = data.nrows();
        let psi = psi_sum(&self.psis, &self.scale, data)?;
        let fv = self.target.eval_batch(data)?;
        let mut r: Vec<f64> = (0..take).map(|i| psi[i] - self.sign * fv[i]).collect();
        for (ci, c) in self.constraints.iter().enumerate() {
            let pv = c.payoff.eval_batch(data)?;
            for i in 0..take {
                r[i] += self.b[ci] * pv[i];
            }
        }
        out.extend_from_slice(&r);
        Ok(())
    }

    /// Snapshot for a later bitwise-identical resume.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: 1,
            iteration: self.iteration,
            params: self.params.clone(),
            adam: self.adam.clone(),
            trace: self.trace.clone(),
            config: self.config.clone(),
        }
    }

    /// Rebuild a trainer from a checkpoint; `problem` must be the one the
    /// checkpoint was taken from (shape-checked, not content-checked).
    pub fn restore(problem: &BoundProblem, cp: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(problem, &cp.config)?;
        t.apply_checkpoint(cp)?;
        Ok(t)
    }

    /// Checkpoint restore for a discrete-marginal trainer.
    pub fn restore_discrete(
        instance: &DiscreteInstance,
        target: &PayoffExpr,
        constraints: &[ConstraintInstrument],
        direction: Direction,
        cp: &Checkpoint,
    ) -> Result<Self> {
        let mut t = Trainer::new_discrete(instance, target, constraints, direction, &cp.config)?;
        t.apply_checkpoint(cp)?;
        Ok(t)
    }

    fn apply_checkpoint(&mut self, cp: &Checkpoint) -> Result<()> {
        if cp.schema_version != 1 {
            return Err(Error::InvalidInput(format!(
                "unknown checkpoint schema version {}",
                cp.schema_version
            )));
        }
        if cp.params.len() != self.params.len() {
            return Err(Error::InvalidInput(format!(
                "checkpoint has {} parameters, problem needs {}",
                cp.params.len(),
                self.params.len()
            )));
        }
        if cp.adam.len() != self.params.len() {
            return Err(Error::InvalidInput("checkpoint moment size mismatch".into()));
        }
        if cp.trace.len() != cp.iteration {
            return Err(Error::InvalidInput(format!(
                "checkpoint trace has {} entries for {} iterations",
                cp.trace.len(),
                cp.iteration
            )));
        }
        if cp.iteration > self.config.iterations {
            return Err(Error::InvalidInput(format!(
                "checkpoint is at iteration {}, config stops at {}",
                cp.iteration, self.config.iterations
            )));
        }
        self.params.copy_from_slice(&cp.params);
        self.adam = cp.adam.clone();
        self.iteration = cp.iteration;
        self.trace = cp.trace.clone();
        let d = self.model.dim();
        for j in 0..d {
            self.psis[j]
                .copy_params_from(&self.params[j * self.net_len..(j + 1) * self.net_len]);
        }
        let tail = d * self.net_len;
        for ci in 0..self.b.len() {
            self.b[ci] = self.params[tail + ci];
        }
        Ok(())
    }
}

/// Train an upper (or, per `problem.direction`, lower) bound end to end.
pub fn train(problem: &BoundProblem, config: &TrainerConfig) -> Result<BoundResult> {
    let mut t = Trainer::new(problem, config)?;
    t.run()?;
    t.finish()
}

/// Convenience wrapper: the same problem with direction forced to LOWER.
pub fn lower_bound(problem: &BoundProblem, config: &TrainerConfig) -> Result<BoundResult> {
    let mut p = problem.clone();
    p.direction = Direction::Lower;
    train(&p, config)
}

/// Train a bound over atomic marginals (the LP cross-check path).
pub fn train_discrete(
    instance: &DiscreteInstance,
    target: &PayoffExpr,
    constraints: &[ConstraintInstrument],
    direction: Direction,
    config: &TrainerConfig,
) -> Result<BoundResult> {
    let mut t = Trainer::new_discrete(instance, target, constraints, direction, config)?;
    t.run()?;
    t.finish()
}

/// The penalized objective of `state` on one batch, for the problem's target
/// as given (no direction sign). The batch must come from the reference
/// measure θ = product of the marginals, whose columns double as marginal
/// sample streams.
pub fn objective_batch(
    state: &DualState,
    batch: &SampleBatch,
    problem: &BoundProblem,
    gamma: f64,
) -> Result<f64> {
    problem.validate()?;
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidInput(format!("gamma must be positive, got {gamma}")));
    }
    let d = problem.spec.dim();
    if state.dim() != d || batch.data.ncols() != d {
        return Err(Error::InvalidInput(format!(
            "dimension mismatch: {} networks, {}-column batch, {}-asset market",
            state.dim(),
            batch.data.ncols(),
            d
        )));
    }
    if state.b.len() != problem.constraints.len() {
        return Err(Error::InvalidInput(format!(
            "{} instrument weights for {} constraints",
            state.b.len(),
            problem.constraints.len()
        )));
    }
    let data = batch.data.view();
    let n = data.nrows();
    let psi = state.psi_sum(&data)?;
    let fv = problem.target.eval_batch(&data)?;
    let mut y: Vec<f64> = (0..n).map(|r| fv[r] - psi[r]).collect();
    let mut price_term = 0.0;
    for (ci, c) in problem.constraints.iter().enumerate() {
        let pv = c.payoff.eval_batch(&data)?;
        for r in 0..n {
            y[r] -= state.b[ci] * pv[r];
        }
        price_term += state.b[ci] * c.price;
    }
    let pen_sum: f64 = y.iter().map(|v| { let r = v.max(0.0); r * r }).sum();
    Ok(psi.sum() / n as f64 + price_term + gamma * pen_sum / n as f64)
}

/// Residual statistics of a trained state on `n` benchmark-copula samples:
/// r(x) = Σψ_j(x_j) + Σb_iφ_i(x) − sign·f(x), where sign follows the
/// problem's direction (so LOWER problems diagnose the superhedge of −f).
pub fn slack_diagnostic(
    state: &DualState,
    problem: &BoundProblem,
    n: usize,
    tol: f64,
    seed: u64,
) -> Result<SlackStats> {
    problem.validate()?;
    if n == 0 {
        return Err(Error::InvalidInput("slack diagnostic needs at least one sample".into()));
    }
    if !(tol.is_finite() && tol >= 0.0) {
        return Err(Error::InvalidInput("slack tolerance must be nonnegative".into()));
    }
    let d = problem.spec.dim();
    if state.dim() != d || state.b.len() != problem.constraints.len() {
        return Err(Error::InvalidInput(
            "state shape does not match the problem".into(),
        ));
    }
    let sign = problem.direction.sign();
    let mut sampler = PathSampler::benchmark(&problem.spec, seed)?;
    let chunk = EVAL_CHUNK.min(n);
    let mut buf = Array2::<f64>::zeros((chunk, d));
    let mut residuals = Vec::with_capacity(n);
    let mut left = n;
    while left > 0 {
        let take = chunk.min(left);
        sampler.fill(buf.slice_mut(s![..take, ..]));
        let data = buf.slice(s![..take, ..]);
        let psi = state.psi_sum(&data)?;
        let fv = problem.target.eval_batch(&data)?;
        let mut r: Vec<f64> = (0..take).map(|i| psi[i] - sign * fv[i]).collect();
        for (ci, c) in problem.constraints.iter().enumerate() {
            let pv = c.payoff.eval_batch(&data)?;
            for i in 0..take {
                r[i] += state.b[ci] * pv[i];
            }
        }
        residuals.extend_from_slice(&r);
        left -= take;
    }
    Ok(slack_stats_from(residuals, tol))
}
