//! The six subcommands. Each reads the resolved config, does its work through
//! the core library, and writes JSON/CSV outputs that embed that config and
//! every seed used, so any output file documents how to reproduce itself.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mfb_core::{
    case_csv, check_feasibility, convergence_csv, derive_seed, discretize, instrument_seed,
    product_price, run_case, run_convergence, run_timing, sample_copula, solve_primal, timing_csv,
    train, BoundProblem, BoundResult, CaseResult, ConstraintInstrument, ConvergenceResult,
    Direction, DiscreteInstance, Error, FeasibilityReport, LpBound, MarketSpec, PayoffExpr,
    PriceConstraint, Result, RowLabel, TimingResult, DEFAULT_CELL_CAP,
};

use crate::config::{ConstraintDecl, Resolved, RunConfig};

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// A priced instrument as stored in instruments.json. MC-priced entries carry
/// their sampling metadata; pass-through declared prices do not.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstrumentRecord {
    /// Canonical payoff text.
    pub payoff: String,
    pub price: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct InstrumentsFile {
    schema_version: u32,
    config: RunConfig,
    instruments: Vec<InstrumentRecord>,
}

#[derive(Debug, Serialize)]
struct BoundSection {
    seed: u64,
    result: BoundResult,
}

#[derive(Debug, Serialize)]
struct ResultFile {
    schema_version: u32,
    config: RunConfig,
    /// Canonical target payoff text.
    target: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    upper: Option<BoundSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lower: Option<BoundSection>,
}

// Lenient readers for the comparison path: only the bound values matter.
#[derive(Deserialize)]
struct ResultPeek {
    #[serde(default)]
    upper: Option<SectionPeek>,
    #[serde(default)]
    lower: Option<SectionPeek>,
}
#[derive(Deserialize)]
struct SectionPeek {
    result: BoundPeek,
}
#[derive(Deserialize)]
struct BoundPeek {
    bound: f64,
}

#[derive(Debug, Serialize)]
struct GapLine {
    trained: f64,
    exact: f64,
    /// (trained − exact) / max(|exact|, 1e-12), signed.
    relative_gap: f64,
}

#[derive(Debug, Serialize)]
struct Comparison {
    source: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    upper: Option<GapLine>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lower: Option<GapLine>,
}

#[derive(Debug, Serialize)]
struct VerifyFile {
    schema_version: u32,
    config: RunConfig,
    target: String,
    grid: Vec<usize>,
    cells: usize,
    /// Whether constraint prices were recomputed exactly on the grid.
    repriced: bool,
    constraints: Vec<PriceConstraint>,
    feasibility: FeasibilityReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    upper: Option<LpBound>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lower: Option<LpBound>,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<Comparison>,
}

#[derive(Debug, Serialize)]
struct SweepFile {
    schema_version: u32,
    config: RunConfig,
    results: Vec<CaseResult>,
}

#[derive(Debug, Serialize)]
struct ConvergenceFile {
    schema_version: u32,
    config: RunConfig,
    result: ConvergenceResult,
}

#[derive(Debug, Serialize)]
struct TimingFile {
    schema_version: u32,
    config: RunConfig,
    result: TimingResult,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidInput(format!("cannot serialize {}: {e}", path.display())))?;
    text.push('\n');
    std::fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Deserialized market specs bypass the constructor; re-run its checks.
fn revalidate_market(market: &MarketSpec) -> Result<()> {
    MarketSpec::new(
        market.s0.clone(),
        market.sigma.clone(),
        market.rho.clone(),
        market.maturity,
    )
    .map(|_| ())
}

/// Parse every declared constraint payoff against the market dimension.
fn parse_decls(decls: &[ConstraintDecl], d: usize) -> Result<Vec<PayoffExpr>> {
    decls.iter().map(|c| PayoffExpr::parse(&c.payoff, d)).collect()
}

/// Turn the declared constraints into priced instruments: explicit prices
/// pass through, the rest are looked up in instruments.json (as written by
/// `generate`) under their canonical payoff text.
fn resolve_constraints(resolved: &Resolved, d: usize) -> Result<Vec<ConstraintInstrument>> {
    let decls = &resolved.config.constraints;
    let payoffs = parse_decls(decls, d)?;
    let needs_file = decls.iter().any(|c| c.price.is_none());
    let table: HashMap<String, InstrumentRecord> = if needs_file {
        let path = resolved.instruments_path();
        let text = std::fs::read_to_string(&path).map_err(|e| {
            Error::InvalidInput(format!(
                "constraints lack explicit prices and {} is unreadable ({e}); run `mfb generate` first",
                path.display()
            ))
        })?;
        let file: InstrumentsFile = serde_json::from_str(&text).map_err(|e| {
            Error::InvalidInput(format!("{} is not a valid instruments file: {e}", path.display()))
        })?;
        file.instruments
            .into_iter()
            .map(|r| {
                // Key by canonical text so hand-edited files still match.
                let key = PayoffExpr::parse(&r.payoff, d).map(|p| p.to_canonical_string())?;
                Ok((key, r))
            })
            .collect::<Result<_>>()?
    } else {
        HashMap::new()
    };
    decls
        .iter()
        .zip(payoffs)
        .map(|(decl, payoff)| match decl.price {
            Some(price) => Ok(ConstraintInstrument {
                payoff,
                price,
                stderr: decl.stderr,
            }),
            None => {
                let key = payoff.to_canonical_string();
                let record = table.get(&key).ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "no price for {key:?} in {}; re-run `mfb generate` with this constraint set",
                        resolved.instruments_path().display()
                    ))
                })?;
                Ok(ConstraintInstrument {
                    payoff,
                    price: record.price,
                    stderr: record.stderr,
                })
            }
        })
        .collect()
}

fn describe_label(label: &RowLabel) -> String {
    match label {
        RowLabel::Marginal { asset, atom } => format!("marginal(asset {}, atom {atom})", asset + 1),
        RowLabel::PriceExact { instrument } => format!("price[{instrument}]"),
        RowLabel::PriceUpper { instrument } => format!("price_upper[{instrument}]"),
        RowLabel::PriceLower { instrument } => format!("price_lower[{instrument}]"),
    }
}

/// The certificate's heaviest rows, for the error message.
fn describe_certificate(report: &FeasibilityReport) -> String {
    let Some(cert) = &report.certificate else {
        return "(no certificate)".into();
    };
    let mut rows: Vec<&(RowLabel, f64)> = cert.iter().collect();
    rows.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()));
    rows.iter()
        .take(4)
        .map(|(label, w)| format!("{} weight {w:+.4}", describe_label(label)))
        .collect::<Vec<_>>()
        .join(", ")
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

/// Price the declared constraint instruments under the benchmark coupling and
/// write instruments.json.
pub fn cmd_generate(resolved: &Resolved) -> Result<()> {
    let market = resolved.config.market()?;
    revalidate_market(market)?;
    let d = market.s0.len();
    let payoffs = parse_decls(&resolved.config.constraints, d)?;
    let instruments = resolved
        .config
        .constraints
        .iter()
        .zip(payoffs)
        .map(|(decl, payoff)| match decl.price {
            Some(price) => Ok(InstrumentRecord {
                payoff: payoff.to_canonical_string(),
                price,
                stderr: decl.stderr,
                n_samples: None,
                seed: None,
            }),
            None => {
                let seed = instrument_seed(resolved.seed, &payoff);
                let batch = sample_copula(market, resolved.config.price_samples, seed)?;
                let priced = mfb_core::price_on_batch(&batch, &payoff)?;
                Ok(InstrumentRecord {
                    payoff: priced.payoff.to_canonical_string(),
                    price: priced.price,
                    stderr: Some(priced.stderr),
                    n_samples: Some(priced.n_samples),
                    seed: Some(priced.seed),
                })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let file = InstrumentsFile {
        schema_version: 1,
        config: resolved.config.clone(),
        instruments,
    };
    write_json(&resolved.out_dir.join("instruments.json"), &file)
}

/// Train the dual networks for the target payoff and write result.json with
/// the requested bound(s).
pub fn cmd_bound(resolved: &Resolved) -> Result<()> {
    let market = resolved.config.market()?;
    revalidate_market(market)?;
    let d = market.s0.len();
    let target = PayoffExpr::parse(resolved.config.target()?, d)?;
    let constraints = resolve_constraints(resolved, d)?;
    let run = |direction: Direction, label: &str| -> Result<BoundSection> {
        let seed = derive_seed(resolved.seed, label);
        let mut trainer = resolved.config.trainer.clone();
        trainer.seed = seed;
        let problem = BoundProblem {
            spec: market.clone(),
            target: target.clone(),
            constraints: constraints.clone(),
            direction,
        };
        Ok(BoundSection {
            seed,
            result: train(&problem, &trainer)?,
        })
    };
    let upper = if resolved.direction.wants_upper() {
        Some(run(Direction::Upper, "bound:upper")?)
    } else {
        None
    };
    let lower = if resolved.direction.wants_lower() {
        Some(run(Direction::Lower, "bound:lower")?)
    } else {
        None
    };
    let file = ResultFile {
        schema_version: 1,
        config: resolved.config.clone(),
        target: target.to_canonical_string(),
        upper,
        lower,
    };
    write_json(&resolved.out_dir.join("result.json"), &file)
}

fn grid_constraints(
    resolved: &Resolved,
    instance: &DiscreteInstance,
    d: usize,
) -> Result<Vec<PriceConstraint>> {
    if resolved.config.reprice_constraints_on_grid {
        parse_decls(&resolved.config.constraints, d)?
            .into_iter()
            .map(|payoff| {
                let price = product_price(instance, &payoff)?;
                Ok(PriceConstraint::exact(payoff, price))
            })
            .collect()
    } else {
        Ok(resolve_constraints(resolved, d)?
            .iter()
            .map(PriceConstraint::from_instrument)
            .collect())
    }
}

/// Cross-check the price system and bounds against the exact transport LP on
/// a discretized instance; writes verify.json. Infeasible price systems still
/// produce the report (with the certificate) before the command fails.
pub fn cmd_verify(resolved: &Resolved) -> Result<()> {
    let market = resolved.config.market()?;
    revalidate_market(market)?;
    let d = market.s0.len();
    if d > 3 {
        return Err(Error::SizeCap(format!(
            "the exact cross-check enumerates the product grid and supports at most 3 assets, got {d}"
        )));
    }
    let target = PayoffExpr::parse(resolved.config.target()?, d)?;
    if resolved.config.grid.is_empty() {
        return Err(Error::InvalidInput(
            "config is missing the verify grid (atoms per asset)".into(),
        ));
    }
    let instance = discretize(market, &resolved.config.grid)?;
    let max_cells = resolved.config.max_cells.unwrap_or(DEFAULT_CELL_CAP);
    let constraints = grid_constraints(resolved, &instance, d)?;
    let feasibility = check_feasibility(&instance, &constraints, max_cells)?;
    let mut report = VerifyFile {
        schema_version: 1,
        config: resolved.config.clone(),
        target: target.to_canonical_string(),
        grid: resolved.config.grid.clone(),
        cells: instance.cells(),
        repriced: resolved.config.reprice_constraints_on_grid,
        constraints,
        feasibility,
        upper: None,
        lower: None,
        comparison: None,
    };
    let path = resolved.out_dir.join("verify.json");
    if !report.feasibility.feasible {
        let certificate = describe_certificate(&report.feasibility);
        write_json(&path, &report)?;
        return Err(Error::Infeasible(format!(
            "no coupling of the marginals reproduces the quoted prices; certificate: {certificate} \
             (full report in {})",
            path.display()
        )));
    }
    if resolved.direction.wants_upper() {
        report.upper = Some(solve_primal(
            &instance,
            &target,
            Direction::Upper,
            &report.constraints,
            max_cells,
        )?);
    }
    if resolved.direction.wants_lower() {
        report.lower = Some(solve_primal(
            &instance,
            &target,
            Direction::Lower,
            &report.constraints,
            max_cells,
        )?);
    }
    if let Some(source) = &resolved.config.compare_result {
        let text = std::fs::read_to_string(source).map_err(|e| {
            Error::InvalidInput(format!("cannot read compare_result {}: {e}", source.display()))
        })?;
        let peek: ResultPeek = serde_json::from_str(&text).map_err(|e| {
            Error::InvalidInput(format!("{} is not a result file: {e}", source.display()))
        })?;
        let gap = |trained: Option<f64>, exact: Option<&LpBound>| -> Option<GapLine> {
            let (trained, exact) = (trained?, exact?.value);
            Some(GapLine {
                trained,
                exact,
                relative_gap: (trained - exact) / exact.abs().max(1e-12),
            })
        };
        report.comparison = Some(Comparison {
            source: source.clone(),
            upper: gap(peek.upper.map(|s| s.result.bound), report.upper.as_ref()),
            lower: gap(peek.lower.map(|s| s.result.bound), report.lower.as_ref()),
        });
    }
    write_json(&path, &report)
}

fn csv_file_name(case_name: &str) -> String {
    let safe: String = case_name
        .chars()
        .map(|c| if c.is_alphanumeric() || c == '-' || c == '_' { c } else { '-' })
        .collect();
    format!("{safe}.csv")
}

/// Run every declared case over its strike sweep; one CSV per case plus a
/// manifest with configs, seeds, instruments, and runtimes.
pub fn cmd_sweep(resolved: &Resolved) -> Result<()> {
    let cases = resolved.resolve_cases()?;
    let settings = resolved.run_settings();
    let mut results = Vec::with_capacity(cases.len());
    for case in &cases {
        let result = run_case(case, &settings)?;
        write_text(
            &resolved.out_dir.join(csv_file_name(&case.name)),
            &case_csv(&result),
        )?;
        results.push(result);
    }
    let file = SweepFile {
        schema_version: 1,
        config: resolved.config.clone(),
        results,
    };
    write_json(&resolved.out_dir.join("sweep.json"), &file)
}

/// Record per-iteration training traces for the declared cases at one strike.
/// With no cases declared, runs the five incremental three-asset cases.
pub fn cmd_convergence(resolved: &Resolved) -> Result<()> {
    let cases = if resolved.config.cases.is_empty() && resolved.config.custom_cases.is_empty() {
        mfb_core::e1_bundle().into_iter().take(5).collect()
    } else {
        resolved.resolve_cases()?
    };
    let strike = resolved.config.convergence_strike.unwrap_or(6.0);
    let settings = resolved.run_settings();
    let result = run_convergence(&cases, strike, &settings)?;
    write_text(
        &resolved.out_dir.join("convergence.csv"),
        &convergence_csv(&result),
    )?;
    let file = ConvergenceFile {
        schema_version: 1,
        config: resolved.config.clone(),
        result,
    };
    write_json(&resolved.out_dir.join("convergence.json"), &file)
}

/// Time a fixed training run across market dimensions (default 3, 6, 12).
pub fn cmd_timing(resolved: &Resolved) -> Result<()> {
    let dims = if resolved.config.timing_dimensions.is_empty() {
        vec![3, 6, 12]
    } else {
        resolved.config.timing_dimensions.clone()
    };
    let settings = resolved.run_settings();
    let result = run_timing(&dims, &settings)?;
    write_text(&resolved.out_dir.join("timing.csv"), &timing_csv(&result))?;
    let file = TimingFile {
        schema_version: 1,
        config: resolved.config.clone(),
        result,
    };
    write_json(&resolved.out_dir.join("timing.json"), &file)
}
