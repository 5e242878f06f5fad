//! Run configuration: one JSON schema shared by every subcommand, with
//! unknown keys rejected and command-line flags layered on top. The resolved
//! config is embedded in every output file, so any output can be re-run.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use mfb_core::{Error, ExperimentCase, MarketSpec, Result, RunSettings, TrainerConfig};

/// Which bound(s) a command computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DirectionChoice {
    Upper,
    Lower,
    Both,
}

impl DirectionChoice {
    pub fn wants_upper(self) -> bool {
        matches!(self, DirectionChoice::Upper | DirectionChoice::Both)
    }
    pub fn wants_lower(self) -> bool {
        matches!(self, DirectionChoice::Lower | DirectionChoice::Both)
    }
}

/// One declared constraint instrument: a payoff in grammar text, optionally
/// with a fixed price. Without a price, `generate` prices it under the
/// benchmark model and `bound` reads the price from instruments.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintDecl {
    pub payoff: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
}

fn default_price_samples() -> usize {
    1 << 20
}

fn is_default_price_samples(n: &usize) -> bool {
    *n == default_price_samples()
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// The configuration file. One schema serves all subcommands; each command
/// uses the sections it needs and validates that they are present. Unknown
/// keys fail parsing, so typos surface immediately.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Must be 1.
    pub schema_version: u32,
    /// Market for generate/bound/verify.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market: Option<MarketSpec>,
    /// Target payoff text for bound/verify.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    /// Constraint instruments for generate/bound/verify.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<ConstraintDecl>,
    /// Training hyperparameters; defaults are the production settings.
    #[serde(default)]
    pub trainer: TrainerConfig,
    /// Monte Carlo paths per instrument/reference price.
    #[serde(
        default = "default_price_samples",
        skip_serializing_if = "is_default_price_samples"
    )]
    pub price_samples: usize,
    /// Atoms per asset for the verify grid (one entry per asset).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub grid: Vec<usize>,
    /// Product-grid cell cap for verify (defaults to the library cap).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_cells: Option<usize>,
    /// Verify only: replace declared constraint prices with exact prices
    /// under the product coupling of the grid marginals, making the price
    /// system consistent on the grid by construction.
    #[serde(default, skip_serializing_if = "is_false")]
    pub reprice_constraints_on_grid: bool,
    /// Bundled case names for sweep/convergence (e.g. "e1-case0").
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cases: Vec<String>,
    /// Inline case definitions; names may be referenced from `cases`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub custom_cases: Vec<ExperimentCase>,
    /// Target strike for the convergence command (default 6).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence_strike: Option<f64>,
    /// Asset counts for the timing command (default [3, 6, 12]).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub timing_dimensions: Vec<usize>,
    /// Where bound looks for priced instruments (default {out}/instruments.json).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instruments: Option<PathBuf>,
    /// A result.json to compare against the exact LP in verify.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare_result: Option<PathBuf>,
    /// Output directory (flag --out overrides).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Root seed (flag --seed overrides; default 0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Worker threads (flag --threads overrides; default 1 — bitwise
    /// reproducible; results are seed-derived and identical at any count).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Bound direction (flag --direction overrides; default both).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<DirectionChoice>,
}

impl RunConfig {
    /// Read and parse a config file. I/O and JSON problems (including
    /// unknown keys) are config errors.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidInput(format!("cannot read config {}: {e}", path.display()))
        })?;
        let config: RunConfig = serde_json::from_str(&text).map_err(|e| {
            Error::InvalidInput(format!("config {} is invalid: {e}", path.display()))
        })?;
        if config.schema_version != 1 {
            return Err(Error::InvalidInput(format!(
                "config schema_version {} is not supported (expected 1)",
                config.schema_version
            )));
        }
        Ok(config)
    }

    pub fn market(&self) -> Result<&MarketSpec> {
        self.market
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("config is missing the market section".into()))
    }

    pub fn target(&self) -> Result<&str> {
        self.target
            .as_deref()
            .ok_or_else(|| Error::InvalidInput("config is missing the target payoff".into()))
    }
}

/// Config after command-line overrides: the echoed form plus the resolved
/// knobs every command needs.
#[derive(Debug, Clone)]
pub struct Resolved {
    /// The config with flag overrides folded in; this exact value is embedded
    /// in every output file.
    pub config: RunConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub threads: usize,
    pub direction: DirectionChoice,
}

impl Resolved {
    pub fn new(
        mut config: RunConfig,
        out: Option<PathBuf>,
        seed: Option<u64>,
        threads: Option<usize>,
        direction: Option<DirectionChoice>,
    ) -> Result<Self> {
        if let Some(out) = out {
            config.out_dir = Some(out);
        }
        if let Some(seed) = seed {
            config.seed = Some(seed);
        }
        if let Some(threads) = threads {
            config.threads = Some(threads);
        }
        if let Some(direction) = direction {
            config.direction = Some(direction);
        }
        let out_dir = config.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
        let seed = config.seed.unwrap_or(0);
        let threads = config.threads.unwrap_or(1);
        if threads == 0 {
            return Err(Error::InvalidInput("threads must be at least 1".into()));
        }
        let direction = config.direction.unwrap_or(DirectionChoice::Both);
        // Re-echo the resolved values so the embedded config is complete.
        config.out_dir = Some(out_dir.clone());
        config.seed = Some(seed);
        config.threads = Some(threads);
        config.direction = Some(direction);
        Ok(Resolved {
            config,
            out_dir,
            seed,
            threads,
            direction,
        })
    }

    /// Experiment-runner settings derived from this config.
    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            trainer: self.config.trainer.clone(),
            price_samples: self.config.price_samples,
            seed: self.seed,
        }
    }

    /// Resolve the case names in `cases` against the bundled catalogs and any
    /// inline definitions. Inline definitions win on name collisions; with no
    /// names declared, all inline definitions run in order.
    pub fn resolve_cases(&self) -> Result<Vec<ExperimentCase>> {
        for case in &self.config.custom_cases {
            case.validate()?;
        }
        if self.config.cases.is_empty() {
            if self.config.custom_cases.is_empty() {
                return Err(Error::InvalidInput(
                    "config declares no cases (set `cases` and/or `custom_cases`)".into(),
                ));
            }
            return Ok(self.config.custom_cases.clone());
        }
        let bundles: Vec<ExperimentCase> = mfb_core::e1_bundle()
            .into_iter()
            .chain(mfb_core::e2_bundle())
            .chain(mfb_core::e2_desk_bundle())
            .collect();
        self.config
            .cases
            .iter()
            .map(|name| {
                mfb_core::case_by_name(&self.config.custom_cases, name)
                    .or_else(|| mfb_core::case_by_name(&bundles, name))
                    .cloned()
                    .ok_or_else(|| {
                        Error::InvalidInput(format!(
                            "unknown case {name:?}: not a bundled case and not in custom_cases"
                        ))
                    })
            })
            .collect()
    }

    /// Path `bound` reads priced instruments from.
    pub fn instruments_path(&self) -> PathBuf {
        self.config
            .instruments
            .clone()
            .unwrap_or_else(|| self.out_dir.join("instruments.json"))
    }
}
