//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use hise_core::ablation::{self, Axis, RowSpec};
use hise_core::config::RunConfig;
use hise_core::datamodel::{generate_synthetic, DatasetSplit};
use hise_core::evalretrieval::MetricsReport;
use hise_core::gradsuite::run_suite;
use hise_core::model::Components;
use hise_core::train::{final_metrics, Trainer};

const STANDARD: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/standard.json");
const HARD: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/hard.json");

const GRAD_SEEDS: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const HAL_TOLERANCE: f64 = 1e-9;
const HAL_CASES: usize = 100;
const HAND_ONE: f64 = -0.1386294;
const HAND_ONE_TOLERANCE: f64 = 1e-7;
const HAND_IDENTITY: f64 = -0.1289115;
const HAND_IDENTITY_TOLERANCE: f64 = 1e-6;
const METRIC_CASES: usize = 100;
const METRIC_SIZE: usize = 20;
const MIN_R1: f64 = 95.0;
const TRAIN_BUDGET: Duration = Duration::from_secs(300);
const HARD_BASELINE_MAX_R1: f64 = 80.0;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        Outcome::new(false, format!("error: {e}"))
    }
}

fn load(path: &str) -> (RunConfig, DatasetSplit) {
    let cfg = RunConfig::load(path.as_ref()).expect("config loads");
    cfg.validate().expect("config is valid");
    let split = generate_synthetic(&cfg.data, cfg.data.seed).expect("fixtures generate");
    (cfg, split)
}

fn train(cfg: &RunConfig, split: &DatasetSplit) -> hise_core::Result<MetricsReport> {
    let mut trainer = Trainer::new(cfg.clone(), split)?;
    let history = trainer.run(|_| {})?;
    Ok(final_metrics(&history).expect("run ends with an evaluation"))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let report = match run_suite(0, GRAD_SEEDS, None) {
        Ok(r) => r,
        Err(e) => return Outcome::error(e),
    };
    let elapsed = start.elapsed();
    let worst_op = report
        .checks
        .iter()
        .filter(|c| c.tolerance <= 1e-4)
        .map(|c| c.max_rel_error)
        .fold(0.0, f64::max);
    let end_to_end = report.get("end-to-end loss").map_or(f64::NAN, |c| c.max_rel_error);
    Outcome::new(
        report.passed() && elapsed < GRAD_BUDGET,
        format!(
            "{} checks x {GRAD_SEEDS} seeds, worst op/composite rel err {worst_op:.2e} (<= 1e-4), end-to-end {end_to_end:.2e} (<= 1e-3), {:.1}s (< {}s)",
            report.checks.len(),
            elapsed.as_secs_f64(),
            GRAD_BUDGET.as_secs()
        ),
    )
}

fn hal_oracle() -> Outcome {
    let worst = common::hal_worst_gap(HAL_CASES, 7);
    let (one, eye) = common::hal_hand_values();
    let passed = worst <= HAL_TOLERANCE
        && (one - HAND_ONE).abs() < HAND_ONE_TOLERANCE
        && (eye - HAND_IDENTITY).abs() < HAND_IDENTITY_TOLERANCE;
    Outcome::new(
        passed,
        format!(
            "{HAL_CASES} matrices, max gap {worst:.2e} (<= {HAL_TOLERANCE:e}); L(1x1) = {one:.7} (want {HAND_ONE} +/- {HAND_ONE_TOLERANCE:e}); L(I2) = {eye:.7} (want {HAND_IDENTITY} +/- {HAND_IDENTITY_TOLERANCE:e})"
        ),
    )
}

fn metrics_oracle() -> Outcome {
    match common::metrics_against_sort(METRIC_CASES, METRIC_SIZE, 21) {
        Ok(()) => Outcome::new(
            true,
            format!("{METRIC_CASES} random {METRIC_SIZE}x{METRIC_SIZE} matrices with ties, exact match"),
        ),
        Err(e) => Outcome::new(false, e),
    }
}

fn invariants() -> Outcome {
    let results = common::structural_invariants();
    let failed: Vec<String> = results
        .iter()
        .filter_map(|(name, r)| r.as_ref().err().map(|e| format!("{name}: {e}")))
        .collect();
    if failed.is_empty() {
        let names: Vec<&str> = results.iter().map(|(n, _)| *n).collect();
        Outcome::new(true, names.join("; "))
    } else {
        Outcome::new(false, failed.join("; "))
    }
}

fn convergence() -> (Outcome, Option<String>) {
    let (cfg, split) = load(STANDARD);
    let start = Instant::now();
    let metrics = match train(&cfg, &split) {
        Ok(m) => m,
        Err(e) => return (Outcome::error(e), None),
    };
    let elapsed = start.elapsed();
    let outcome = Outcome::new(
        metrics.t2v.r1 >= MIN_R1 && metrics.v2t.r1 >= MIN_R1 && elapsed < TRAIN_BUDGET,
        format!(
            "seed {}, {} epochs: R@1 t2v {:.2} v2t {:.2} (>= {MIN_R1}), {:.1}s (< {}s)",
            cfg.seed,
            cfg.train.epochs,
            metrics.t2v.r1,
            metrics.v2t.r1,
            elapsed.as_secs_f64(),
            TRAIN_BUDGET.as_secs()
        ),
    );
    (outcome, serde_json::to_string_pretty(&metrics).ok())
}

fn ablation_direction() -> Outcome {
    let (cfg, split) = load(HARD);
    let with_components = |label: &str, c: Components| {
        let mut config = cfg.clone();
        config.model.components = c;
        RowSpec {
            label: label.to_string(),
            config,
        }
    };
    let mut specs = vec![
        with_components("baseline", Components::NONE),
        with_components("full", Components::ALL),
    ];
    match ablation::rows(&cfg, Axis::Aggregation, None) {
        Ok(rows) => specs.extend(rows),
        Err(e) => return Outcome::error(e),
    }
    let rows = match ablation::run(&specs, &split) {
        Ok(r) => r,
        Err(e) => return Outcome::error(e),
    };
    let rsum = |label: &str| rows.iter().find(|r| r.row == label).map(|r| r.metrics.r_sum).unwrap_or(f64::NAN);
    let baseline = &rows[0].metrics;
    let full = &rows[1].metrics;
    let hard_enough = baseline.t2v.r1 < HARD_BASELINE_MAX_R1;
    let semantics_help = full.r_sum >= baseline.r_sum;
    let (graph, pooled) = (rsum("VGR+TGR"), rsum("VMP+TMP"));
    let aggregation = if graph >= pooled {
        format!("graph R@Sum {graph:.2} >= mean-pool {pooled:.2}")
    } else {
        format!("discrepancy at seed {}: graph R@Sum {graph:.2} < mean-pool {pooled:.2}", cfg.seed)
    };
    let cross = format!("VGR+TMP {:.2}, VMP+TGR {:.2}", rsum("VGR+TMP"), rsum("VMP+TGR"));
    Outcome::new(
        hard_enough && semantics_help,
        format!(
            "seed {}, hard config: baseline R@1 t2v {:.2} (< {HARD_BASELINE_MAX_R1}), R@Sum full {:.2} >= baseline {:.2}; {aggregation} ({cross})",
            cfg.seed, baseline.t2v.r1, full.r_sum, baseline.r_sum
        ),
    )
}

fn determinism(first: Option<String>) -> Outcome {
    let (cfg, split) = load(STANDARD);
    let second = match train(&cfg, &split) {
        Ok(m) => serde_json::to_string_pretty(&m).ok(),
        Err(e) => return Outcome::error(e),
    };
    match (first, second) {
        (Some(a), Some(b)) => Outcome::new(
            a.as_bytes() == b.as_bytes(),
            format!("two standard runs, metric JSON of {} bytes each, byte-identical: {}", a.len(), a == b),
        ),
        _ => Outcome::new(false, "a run did not produce metrics"),
    }
}

fn main() -> ExitCode {
    let (converged, first_json) = convergence();
    let outcomes = [
        ("gradient suite", gradient_suite()),
        ("hal oracle", hal_oracle()),
        ("metrics oracle", metrics_oracle()),
        ("structural invariants", invariants()),
        ("convergence", converged),
        ("ablation direction", ablation_direction()),
        ("determinism", determinism(first_json)),
    ];
    let mut all = true;
    for (i, (name, outcome)) in outcomes.iter().enumerate() {
        all &= outcome.passed;
        let tag = if outcome.passed { "PASS" } else { "FAIL" };
        println!("criterion {} {tag} {name}: {}", i + 1, outcome.detail);
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
