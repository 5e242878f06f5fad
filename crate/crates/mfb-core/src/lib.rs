//! Model-free upper and lower price bounds for multi-asset options.
//!
//! The crate combines four pieces:
//! 1. a synthetic market generator (lognormal marginals, Gaussian-copula
//!    benchmark dependence) and Monte Carlo pricer for option-implied
//!    constraint prices,
//! 2. a payoff expression language shared by every component,
//! 3. a penalized dual trainer — per-asset scalar networks plus static
//!    constraint weights — whose objective value estimates the bound,
//! 4. an exact LP oracle on discretized marginals for small-instance
//!    verification and price-system feasibility checks,
//! 5. a bundled experiment suite (case catalogs, convergence study, timing
//!    harness) that turns the other pieces into tables.

pub mod dual;
pub mod error;
pub mod experiments;
pub mod lp;
pub mod market;
pub mod math;
pub mod nn;
pub mod payoff;
pub mod pricer;
pub mod seed;
pub mod simplex;

pub use dual::{
    lower_bound, objective_batch, slack_diagnostic, train, train_discrete, BoundProblem,
    BoundResult, Checkpoint, ConstraintInstrument, Direction, DualState, SlackStats, ThetaSource,
    Trainer, TrainerConfig,
};
pub use error::{Error, Result};
pub use experiments::{
    case_by_name, case_csv, constraint_from_priced, convergence_csv, e1_bundle, e1_market,
    e2_bundle, e2_desk_bundle, e2_market, instrument_seed, price_case_instruments, render_bundle,
    render_case, run_case, run_convergence, run_timing, timing_csv, timing_market, CaseResult,
    CaseRow, ConstraintFamily, ConvergenceResult, EnvInfo, ExperimentCase, RunSettings,
    TimingResult, TimingRow,
};
pub use lp::{
    check_feasibility, default_tolerance, discretize, product_price, solve_primal,
    DiscreteInstance, DiscreteMarginal, FeasibilityReport, LpBound, PriceConstraint, RowLabel,
    DEFAULT_CELL_CAP, EXACT_PRICE_TOL,
};
pub use market::{
    sample_copula, sample_reference, BatchSource, MarketSpec, PathSampler, SampleBatch,
};
pub use nn::{adam_step, AdamState, Dense, Mlp, MlpGrad, MlpWorkspace};
pub use payoff::{builtin, BuiltinKind, Expr, PayoffExpr};
pub use pricer::{price_closed_form_call, price_mc, price_on_batch, PricedInstrument};
pub use seed::{derive_seed, rng_for};
