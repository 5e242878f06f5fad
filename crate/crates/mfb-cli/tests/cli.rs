//! End-to-end tests of the `mfb` binary: exit codes, output files, flag
//! overrides, and bitwise reproducibility of the written artifacts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn mfb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfb"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap())
        .unwrap_or_else(|e| panic!("{} is valid json: {e}", path.display()))
}

fn quick_trainer(iterations: usize) -> Value {
    json!({
        "iterations": iterations,
        "batch_size": 32,
        "hidden_layers": 2,
        "hidden_width": 8,
        "eval_samples": 1024,
        "slack_samples": 512,
    })
}

fn d1_market() -> Value {
    json!({"s0": [10.0], "sigma": [0.3], "rho": [[1.0]], "maturity": 1.0})
}

fn d2_market() -> Value {
    json!({
        "s0": [10.0, 10.0],
        "sigma": [0.3, 0.4],
        "rho": [[1.0, 0.5], [0.5, 1.0]],
        "maturity": 1.0,
    })
}

fn d3_market() -> Value {
    json!({
        "s0": [10.0, 10.0, 10.0],
        "sigma": [0.3, 0.4, 0.5],
        "rho": [[1.0, 0.5, 0.5], [0.5, 1.0, 0.5], [0.5, 0.5, 1.0]],
        "maturity": 1.5,
    })
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

#[test]
fn generate_prices_mc_instruments_and_passes_declared_prices_through() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "market": d3_market(),
            "constraints": [
                {"payoff": "(max(x1, x2) - 6)^+"},
                {"payoff": "(x3 - 10)^+", "price": 1.25, "stderr": 0.01},
            ],
            "price_samples": 4096,
        }),
    );
    let out = mfb(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let file = read_json(&dir.path().join("instruments.json"));
    let instruments = file["instruments"].as_array().unwrap();
    assert_eq!(instruments.len(), 2);

    let mc = &instruments[0];
    assert_eq!(mc["payoff"], "(max(x1, x2) - 6)^+");
    assert!(mc["price"].as_f64().unwrap() > 3.0, "deep ITM on-max call");
    assert!(mc["stderr"].as_f64().unwrap() > 0.0);
    assert_eq!(mc["n_samples"], 4096);
    let expected_seed = mfb_core::instrument_seed(
        0,
        &mfb_core::PayoffExpr::parse("(max(x1, x2) - 6)^+", 3).unwrap(),
    );
    assert_eq!(mc["seed"].as_u64().unwrap(), expected_seed);

    let declared = &instruments[1];
    assert_eq!(declared["price"], 1.25);
    assert_eq!(declared["stderr"], 0.01);
    assert!(declared.get("n_samples").is_none(), "declared prices carry no sampling metadata");
}

#[test]
fn generate_with_no_constraints_writes_an_empty_table() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        &json!({"schema_version": 1, "market": d1_market()}),
    );
    let out = mfb(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let file = read_json(&dir.path().join("instruments.json"));
    assert_eq!(file["instruments"], json!([]));
}

#[test]
fn malformed_payoffs_exit_with_the_parse_code_and_an_offset() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "market": d1_market(),
            "constraints": [{"payoff": "(x1 - "}],
        }),
    );
    let out = mfb(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 3);
    assert!(
        stderr(&out).contains("offset"),
        "parse errors name the byte offset: {}",
        stderr(&out)
    );
}

// ---------------------------------------------------------------------------
// config handling
// ---------------------------------------------------------------------------

#[test]
fn unknown_config_keys_are_a_config_error() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        &json!({"schema_version": 1, "tarket": "(x1 - 9)^+"}),
    );
    let out = mfb(&["generate", "--config", config.to_str().unwrap()]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("tarket"), "{}", stderr(&out));
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.json");
    let out = mfb(&["generate", "--config", missing.to_str().unwrap()]);
    assert_code(&out, 2);
}

#[test]
fn bound_without_a_market_section_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        &json!({"schema_version": 1, "target": "(x1 - 9)^+"}),
    );
    let out = mfb(&[
        "bound",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("market"), "{}", stderr(&out));
}

#[test]
fn seed_flag_overrides_the_config_and_is_echoed_everywhere() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "market": d1_market(),
            "constraints": [{"payoff": "(x1 - 10)^+"}],
            "price_samples": 2048,
            "seed": 3,
        }),
    );
    let out = mfb(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--seed",
        "9",
    ]);
    assert_code(&out, 0);
    let file = read_json(&dir.path().join("instruments.json"));
    assert_eq!(file["config"]["seed"], 9, "flag wins and is echoed");
    let expected = mfb_core::instrument_seed(
        9,
        &mfb_core::PayoffExpr::parse("(x1 - 10)^+", 1).unwrap(),
    );
    assert_eq!(file["instruments"][0]["seed"].as_u64().unwrap(), expected);
}

// ---------------------------------------------------------------------------
// bound
// ---------------------------------------------------------------------------

#[test]
fn bound_on_a_constant_payoff_recovers_the_constant() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "market": d1_market(),
            "target": "5",
            // Production-size networks at a reduced budget: constants
            // converge in a few hundred iterations.
            "trainer": {"iterations": 3000, "eval_samples": 16384, "slack_samples": 4096},
        }),
    );
    let out = mfb(&[
        "bound",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let file = read_json(&dir.path().join("result.json"));
    let upper = file["upper"]["result"]["bound"].as_f64().unwrap();
    let lower = file["lower"]["result"]["bound"].as_f64().unwrap();
    assert!((upper - 5.0).abs() < 0.05, "upper {upper}");
    assert!((lower - 5.0).abs() < 0.05, "lower {lower}");
}

#[test]
fn bound_writes_both_sections_and_reruns_byte_identically() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "market": d1_market(),
            "target": "(x1 - 9)^+",
            "trainer": quick_trainer(300),
        }),
    );
    let args = [
        "bound",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ];
    assert_code(&mfb(&args), 0);
    let result_path = dir.path().join("result.json");
    let first = std::fs::read(&result_path).unwrap();
    assert_code(&mfb(&args), 0);
    let second = std::fs::read(&result_path).unwrap();
    assert_eq!(first, second, "rerun reproduces result.json byte for byte");

    let file = read_json(&result_path);
    assert_eq!(file["schema_version"], 1);
    assert_eq!(file["target"], "(x1 - 9)^+");
    assert_eq!(
        file["upper"]["seed"].as_u64().unwrap(),
        mfb_core::derive_seed(0, "bound:upper")
    );
    assert_eq!(
        file["lower"]["seed"].as_u64().unwrap(),
        mfb_core::derive_seed(0, "bound:lower")
    );
    assert!(file["upper"]["result"]["bound"].as_f64().unwrap().is_finite());
    assert!(file["lower"]["result"]["bound"].as_f64().unwrap().is_finite());
    assert_eq!(
        file["upper"]["result"]["trace"].as_array().unwrap().len(),
        300
    );
}

#[test]
fn direction_lower_omits_the_upper_section() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "market": d1_market(),
            "target": "(x1 - 9)^+",
            "trainer": quick_trainer(100),
        }),
    );
    let out = mfb(&[
        "bound",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--direction",
        "lower",
    ]);
    assert_code(&out, 0);
    let file = read_json(&dir.path().join("result.json"));
    assert!(file.get("upper").is_none(), "upper section omitted");
    assert!(file["lower"]["result"]["bound"].as_f64().is_some());
    assert_eq!(file["config"]["direction"], "lower");
}

#[test]
fn bound_needs_generate_first_when_constraints_lack_prices() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "market": d2_market(),
            "target": "(max(x1, x2) - 10)^+",
            "constraints": [{"payoff": "(x1 - 10)^+"}],
            "trainer": quick_trainer(100),
            "price_samples": 2048,
        }),
    );
    let args_bound = [
        "bound",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ];
    let out = mfb(&args_bound);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("generate"), "{}", stderr(&out));

    let out = mfb(&[
        "generate",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let out = mfb(&args_bound);
    assert_code(&out, 0);
    let file = read_json(&dir.path().join("result.json"));
    assert_eq!(
        file["upper"]["result"]["b_values"].as_array().unwrap().len(),
        1,
        "one instrument weight per constraint"
    );
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

#[test]
fn verify_on_a_small_grid_is_feasible_and_ordered() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "market": d2_market(),
            "target": "(max(x1, x2) - 10)^+",
            "constraints": [{"payoff": "(x1 - 10)^+"}],
            "grid": [12, 12],
            "reprice_constraints_on_grid": true,
        }),
    );
    let out = mfb(&[
        "verify",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let file = read_json(&dir.path().join("verify.json"));
    assert_eq!(file["cells"], 144);
    assert_eq!(file["repriced"], true);
    assert_eq!(file["feasibility"]["feasible"], true);
    let upper = file["upper"]["value"].as_f64().unwrap();
    let lower = file["lower"]["value"].as_f64().unwrap();
    assert!(
        upper >= lower - 1e-9,
        "upper {upper} dominates lower {lower}"
    );
}

#[test]
fn verify_rejects_an_inconsistent_price_system_with_a_certificate() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "market": d2_market(),
            "target": "(max(x1, x2) - 10)^+",
            "constraints": [{"payoff": "(x1 - 10)^+", "price": 50.0}],
            "grid": [10, 10],
        }),
    );
    let out = mfb(&[
        "verify",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 5);
    assert!(stderr(&out).contains("certificate"), "{}", stderr(&out));
    let file = read_json(&dir.path().join("verify.json"));
    assert_eq!(file["feasibility"]["feasible"], false);
    assert!(
        !file["feasibility"]["certificate"].as_array().unwrap().is_empty(),
        "report still written, with the certificate"
    );
}

#[test]
fn verify_refuses_markets_beyond_three_assets() {
    let dir = TempDir::new().unwrap();
    let rho: Vec<Vec<f64>> = (0..6)
        .map(|i| (0..6).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let config = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "market": {
                "s0": vec![10.0; 6],
                "sigma": vec![0.3; 6],
                "rho": rho,
                "maturity": 1.0,
            },
            "target": "(x1 - 10)^+",
            "grid": [5, 5, 5, 5, 5, 5],
        }),
    );
    let out = mfb(&[
        "verify",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 6);
}

#[test]
fn verify_reports_the_gap_to_a_trained_result() {
    let dir = TempDir::new().unwrap();
    let result_path = dir.path().join("result.json");
    let bound_config = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "market": d2_market(),
            "target": "(max(x1, x2) - 10)^+",
            "trainer": quick_trainer(300),
        }),
    );
    assert_code(
        &mfb(&[
            "bound",
            "--config",
            bound_config.to_str().unwrap(),
            "--out",
            dir.path().to_str().unwrap(),
        ]),
        0,
    );

    let verify_dir = TempDir::new().unwrap();
    let verify_config = write_config(
        verify_dir.path(),
        &json!({
            "schema_version": 1,
            "market": d2_market(),
            "target": "(max(x1, x2) - 10)^+",
            "grid": [15, 15],
            "compare_result": result_path,
        }),
    );
    let out = mfb(&[
        "verify",
        "--config",
        verify_config.to_str().unwrap(),
        "--out",
        verify_dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let file = read_json(&verify_dir.path().join("verify.json"));
    let upper_gap = file["comparison"]["upper"]["relative_gap"].as_f64().unwrap();
    let lower_gap = file["comparison"]["lower"]["relative_gap"].as_f64().unwrap();
    assert!(upper_gap.is_finite() && lower_gap.is_finite());
    assert!(file["comparison"]["upper"]["exact"].as_f64().unwrap() > 0.0);
}

// ---------------------------------------------------------------------------
// sweep / convergence / timing
// ---------------------------------------------------------------------------

fn tiny_case() -> Value {
    json!({
        "name": "tiny",
        "market": d2_market(),
        "target_kind": "call_on_max",
        "target_assets": [1, 2],
        "target_strikes": [8.0],
        "families": [
            {"kind": "vanilla_call", "assets": [1], "strikes": [9.0]},
        ],
    })
}

#[test]
fn sweep_writes_csvs_that_do_not_depend_on_the_thread_count() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "custom_cases": [tiny_case()],
            "trainer": quick_trainer(200),
            "price_samples": 2048,
            "seed": 7,
        }),
    );
    let out_one = TempDir::new().unwrap();
    let out = mfb(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_one.path().to_str().unwrap(),
        "--threads",
        "1",
    ]);
    assert_code(&out, 0);
    let csv_one = std::fs::read(out_one.path().join("tiny.csv")).unwrap();
    let text = String::from_utf8(csv_one.clone()).unwrap();
    assert!(
        text.starts_with("strike,upper,lower,reference,reference_stderr\n"),
        "{text}"
    );
    assert_eq!(text.lines().count(), 2, "header plus one strike row");
    let manifest = read_json(&out_one.path().join("sweep.json"));
    assert_eq!(manifest["results"][0]["case"]["name"], "tiny");
    assert_eq!(manifest["results"][0]["rows"][0]["strike"], 8.0);

    let out_two = TempDir::new().unwrap();
    let out = mfb(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_two.path().to_str().unwrap(),
        "--threads",
        "2",
    ]);
    assert_code(&out, 0);
    let csv_two = std::fs::read(out_two.path().join("tiny.csv")).unwrap();
    assert_eq!(csv_one, csv_two, "thread count never changes the numbers");
}

#[test]
fn sweep_rejects_unknown_case_names() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        &json!({"schema_version": 1, "cases": ["e9-case0"]}),
    );
    let out = mfb(&[
        "sweep",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("e9-case0"), "{}", stderr(&out));
}

#[test]
fn convergence_defaults_to_the_first_five_incremental_cases() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "trainer": quick_trainer(5),
            "price_samples": 2048,
        }),
    );
    let out = mfb(&[
        "convergence",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let csv = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "iteration,e1-case0,e1-case1,e1-case2,e1-case3,e1-case4"
    );
    assert_eq!(lines.count(), 5, "one row per iteration");
    let manifest = read_json(&dir.path().join("convergence.json"));
    assert_eq!(manifest["result"]["strike"], 6.0);
    assert_eq!(manifest["result"]["case_names"].as_array().unwrap().len(), 5);
}

#[test]
fn timing_covers_the_declared_dimensions() {
    let dir = TempDir::new().unwrap();
    let config = write_config(
        dir.path(),
        &json!({
            "schema_version": 1,
            "timing_dimensions": [1, 2],
            "trainer": quick_trainer(5),
        }),
    );
    let out = mfb(&[
        "timing",
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let csv = std::fs::read_to_string(dir.path().join("timing.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "assets,seconds,bound");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,"));
    assert!(lines[2].starts_with("2,"));
    let manifest = read_json(&dir.path().join("timing.json"));
    assert!(manifest["result"]["environment"]["arch"].as_str().is_some());
}
