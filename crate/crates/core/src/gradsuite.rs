//! Finite-difference verification of every tape op and every composite path.

use std::fmt;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::Serialize;

use crate::config::RunConfig;
use crate::datamodel::{generate_synthetic, VocabConfig, VocabSpec};
use crate::encoders::{encode_text_global, encode_video_global};
use crate::error::Result;
use crate::model::PreparedSplit;
use crate::numcore::{GradChecker, GradFault, OpKind, Tape, Var};
use crate::objective::{bank_hal_loss, fuse, hal_loss, infonce_loss, total_objective, BatchEmbeddings, MemoryBank, Positives};
use crate::params::ModelParams;
use crate::train::{batch_objective, momentum_embeddings, TrainState};
use crate::tse::textual_semantics;
use crate::vse::visual_semantics;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
const OP_STEP: f64 = 1e-5;
const END_TO_END_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    pub seeds: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub first_seed: u64,
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    fn record(&mut self, name: &str, tolerance: f64, max_rel_error: f64, coordinates: usize) {
        match self.checks.iter_mut().find(|c| c.name == name) {
            Some(c) => {
                c.max_rel_error = c.max_rel_error.max(max_rel_error);
                c.coordinates += coordinates;
                c.seeds += 1;
            }
            None => self.checks.push(CheckResult {
                name: name.to_string(),
                max_rel_error,
                tolerance,
                coordinates,
                seeds: 1,
            }),
        }
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<22} {:>12} {:>9} {:>7} {:>6}  status", "check", "max rel err", "tol", "coords", "seeds")?;
        for c in &self.checks {
            writeln!(
                f,
                "{:<22} {:>12.3e} {:>9.0e} {:>7} {:>6}  {}",
                c.name,
                c.max_rel_error,
                c.tolerance,
                c.coordinates,
                c.seeds,
                if c.passed() { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "{}", if self.passed() { "all checks passed" } else { "gradient check FAILED" })
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array2<f64> {
    let dist = Uniform::new(lo, hi);
    Array2::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

/// Values bounded away from zero so piecewise-linear ops stay on one side
/// of their kink under the finite-difference step.
fn away_from_zero(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) { m } else { -m }
    })
}

/// Reduces `y` to a scalar through a fixed random weighting.
fn weighted_sum(tape: &mut Tape, y: Var, weights: &Array2<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

/// Runs every check for `seeds` consecutive seeds starting at `first_seed`.
/// With `fault` set, the named op's backward rule is scaled to simulate a
/// wrong gradient.
pub fn run_suite(first_seed: u64, seeds: usize, fault: Option<GradFault>) -> Result<SuiteReport> {
    let mut report = SuiteReport {
        first_seed,
        checks: Vec::new(),
    };
    let checker = GradChecker::new(OP_STEP).with_fault(fault);
    let e2e = GradChecker::new(END_TO_END_STEP).with_fault(fault);
    for seed in first_seed..first_seed + seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check_ops(&checker, &mut rng, &mut report)?;
        check_composites(&checker, &e2e, seed, &mut rng, &mut report)?;
    }
    Ok(report)
}

fn check_ops(checker: &GradChecker, rng: &mut ChaCha8Rng, report: &mut SuiteReport) -> Result<()> {
    let r = rng.gen_range(1..5);
    let c = rng.gen_range(1..5);
    let k = rng.gen_range(1..5);
    for op in OpKind::catalog() {
        let (inputs, out_shape): (Vec<Array2<f64>>, (usize, usize)) = match op {
            OpKind::Matmul => (vec![uniform(rng, r, k, -1.0, 1.0), uniform(rng, k, c, -1.0, 1.0)], (r, c)),
            OpKind::Add | OpKind::ElementwiseMultiply => {
                (vec![uniform(rng, r, c, -1.0, 1.0), uniform(rng, r, c, -1.0, 1.0)], (r, c))
            }
            OpKind::ConcatColumns => (vec![uniform(rng, r, c, -1.0, 1.0), uniform(rng, r, k, -1.0, 1.0)], (r, c + k)),
            OpKind::Relu => (vec![away_from_zero(rng, r, c)], (r, c)),
            OpKind::MeanRows => (vec![uniform(rng, r, c, -1.0, 1.0)], (1, c)),
            OpKind::SumAll => (vec![uniform(rng, r, c, -1.0, 1.0)], (1, 1)),
            OpKind::Transpose => (vec![uniform(rng, r, c, -1.0, 1.0)], (c, r)),
            OpKind::Log => (vec![uniform(rng, r, c, 0.5, 2.0)], (r, c)),
            OpKind::SelectRow(_) => (vec![uniform(rng, r, c, -1.0, 1.0)], (1, c)),
            _ => (vec![uniform(rng, r, c, -1.0, 1.0)], (r, c)),
        };
        let op = match op {
            OpKind::Scale(_) => OpKind::Scale(rng.gen_range(-2.0..2.0)),
            OpKind::SelectRow(_) => OpKind::SelectRow(rng.gen_range(0..r)),
            other => other,
        };
        let weights = uniform(rng, out_shape.0, out_shape.1, -1.0, 1.0);
        let rep = checker.check(
            |t, vs| {
                let y = t.apply(op, vs)?;
                weighted_sum(t, y, &weights)
            },
            &inputs,
        )?;
        report.record(op.name(), OP_TOLERANCE, rep.max_rel_error, rep.coordinates);
    }
    // broadcasting a bias row over a matrix
    let inputs = vec![uniform(rng, r, c, -1.0, 1.0), uniform(rng, 1, c, -1.0, 1.0)];
    let weights = uniform(rng, r, c, -1.0, 1.0);
    let rep = checker.check(
        |t, vs| {
            let y = t.add(vs[0], vs[1])?;
            weighted_sum(t, y, &weights)
        },
        &inputs,
    )?;
    report.record("add (row broadcast)", OP_TOLERANCE, rep.max_rel_error, rep.coordinates);
    Ok(())
}

/// A deliberately small configuration so every composite has few inputs.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = seed;
    cfg.data.seed = seed;
    cfg.data.d_frame = 3;
    cfg.data.d_roi = 2;
    cfg.data.d_model = 4;
    cfg.data.pairs = 3;
    cfg.data.frames_per_video = 2;
    cfg.data.distractors_per_frame = 1;
    cfg.data.vocab = VocabConfig {
        subjects: VocabSpec::Count(2),
        actions: VocabSpec::Count(2),
        objects: VocabSpec::Count(2),
        places: VocabSpec::Count(2),
        attributes: VocabSpec::Count(2),
    };
    cfg.model.top_k = 2;
    cfg.model.max_text_len = 8;
    cfg.model.max_frames = 2;
    cfg.train.bank_capacity = 4;
    cfg
}

fn check_composites(
    checker: &GradChecker,
    e2e: &GradChecker,
    seed: u64,
    rng: &mut ChaCha8Rng,
    report: &mut SuiteReport,
) -> Result<()> {
    let cfg = tiny_config(seed);
    let split = generate_synthetic(&cfg.data, seed)?;
    let opts = cfg.model_options();
    let prepared = PreparedSplit::new(&split, &opts)?;
    let state = TrainState::init(&cfg)?;
    let params = perturbed(&state.params, rng);
    let d = cfg.data.d_model;
    let w = uniform(rng, 1, d, -1.0, 1.0);

    // base text encoder
    let text = &prepared.texts[0];
    let inputs: Vec<Array2<f64>> = params.text.refs().into_iter().cloned().collect();
    let rep = checker.check(
        |t, vs| {
            let mut it = vs.iter().copied();
            let p = params.text.map(&mut |_| it.next().expect("one var per leaf"));
            let y = encode_text_global(t, &text.record.tokens, &p)?;
            weighted_sum(t, y, &w)
        },
        &inputs,
    )?;
    report.record("text encoder", OP_TOLERANCE, rep.max_rel_error, rep.coordinates);

    // base video encoder
    let video = &prepared.videos[0];
    let inputs: Vec<Array2<f64>> = params.video.refs().into_iter().cloned().collect();
    let rep = checker.check(
        |t, vs| {
            let mut it = vs.iter().copied();
            let p = params.video.map(&mut |_| it.next().expect("one var per leaf"));
            let y = encode_video_global(t, &video.frames, &p)?;
            weighted_sum(t, y, &w)
        },
        &inputs,
    )?;
    report.record("video encoder", OP_TOLERANCE, rep.max_rel_error, rep.coordinates);

    // textual semantics through the role graph, both aggregation modes
    for (name, mean_pool) in [("tse (graph)", false), ("tse (mean pool)", true)] {
        let inputs: Vec<Array2<f64>> = params.tse.refs().into_iter().cloned().collect();
        let rep = checker.check(
            |t, vs| {
                let mut it = vs.iter().copied();
                let p = params.tse.map(&mut |_| it.next().expect("one var per leaf"));
                let sem = textual_semantics(t, &text.record, &text.graph, &p, mean_pool)?;
                weighted_sum(t, sem.ts, &w)
            },
            &inputs,
        )?;
        report.record(name, OP_TOLERANCE, rep.max_rel_error, rep.coordinates);
    }

    // visual semantics through the entity graph, with the shared tables
    for (name, visual_graph) in [("vse (graph)", true), ("vse (mean pool)", false)] {
        let vse_opts = crate::vse::VseOptions {
            mean_pool: !visual_graph,
            raw_affinity: false,
        };
        let mut inputs: Vec<Array2<f64>> = params.vse.refs().into_iter().cloned().collect();
        let n_vse = inputs.len();
        inputs.push(params.tse.occurrence.token_embedding.clone());
        inputs.extend(params.text.refs().into_iter().cloned());
        let rep = checker.check(
            |t, vs| {
                let mut it = vs[..n_vse].iter().copied();
                let vse = params.vse.map(&mut |_| it.next().expect("one var per leaf"));
                let table = vs[n_vse];
                let mut it = vs[n_vse + 1..].iter().copied();
                let caption = params.text.map(&mut |_| it.next().expect("one var per leaf"));
                let sem = visual_semantics(t, &video.groups, &video.caption, &vse, table, &caption, vse_opts)?;
                weighted_sum(t, sem.vs, &w)
            },
            &inputs,
        )?;
        report.record(name, OP_TOLERANCE, rep.max_rel_error, rep.coordinates);
    }

    // fusion
    let alpha = rng.gen_range(0.0..1.0);
    let inputs = vec![uniform(rng, 3, d, -1.0, 1.0), uniform(rng, 3, d, -1.0, 1.0)];
    let weights = uniform(rng, 3, d, -1.0, 1.0);
    let rep = checker.check(
        |t, vs| {
            let f = fuse(t, vs[0], vs[1], alpha)?;
            weighted_sum(t, f, &weights)
        },
        &inputs,
    )?;
    report.record("fusion", OP_TOLERANCE, rep.max_rel_error, rep.coordinates);

    // contrastive losses on random similarity matrices
    let gamma = 0.3;
    let mu = 0.1;
    let square = uniform(rng, 4, 4, -0.9, 0.9);
    let rect = uniform(rng, 5, 3, -0.9, 0.9);
    let rect_pos = Positives::from_pairs(5, 3, &[(0, 0), (1, 1), (2, 2), (3, 0), (4, 1)])?;
    let rep = checker.check(|t, vs| hal_loss(t, vs[0], &Positives::diagonal(4), gamma, mu), &[square.clone()])?;
    report.record("hal 4x4", OP_TOLERANCE, rep.max_rel_error, rep.coordinates);
    let rep = checker.check(|t, vs| hal_loss(t, vs[0], &rect_pos, gamma, mu), &[rect])?;
    report.record("hal 5x3", OP_TOLERANCE, rep.max_rel_error, rep.coordinates);
    let tau = rng.gen_range(0.05..1.0);
    let rep = checker.check(|t, vs| infonce_loss(t, vs[0], &Positives::diagonal(4), tau), &[square])?;
    report.record("infonce", OP_TOLERANCE, rep.max_rel_error, rep.coordinates);

    let unit = |m: Array2<f64>| {
        let mut m = m;
        for mut row in m.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n;
        }
        m
    };
    let anchors = uniform(rng, 3, d, -1.0, 1.0);
    let positives = unit(uniform(rng, 3, d, -1.0, 1.0));
    let bank = unit(uniform(rng, 5, d, -1.0, 1.0));
    let rep = checker.check(
        |t, vs| {
            let a = t.l2_normalize_rows(vs[0])?;
            bank_hal_loss(t, a, &positives, &bank, gamma, mu)
        },
        &[anchors],
    )?;
    report.record("bank hal", OP_TOLERANCE, rep.max_rel_error, rep.coordinates);

    // total objective over embedding matrices
    let mut video_bank = MemoryBank::new(4);
    let mut text_bank = MemoryBank::new(4);
    video_bank.push(&unit(uniform(rng, 3, d, -1.0, 1.0)))?;
    text_bank.push(&unit(uniform(rng, 2, d, -1.0, 1.0)))?;
    let momentum = crate::objective::MomentumEmbeddings {
        video: unit(uniform(rng, 3, d, -1.0, 1.0)),
        text: unit(uniform(rng, 3, d, -1.0, 1.0)),
    };
    let inputs: Vec<Array2<f64>> = (0..4).map(|_| uniform(rng, 3, d, -1.0, 1.0)).collect();
    let rep = checker.check(
        |t, vs| {
            let n: Vec<Var> = vs.iter().map(|&v| t.l2_normalize_rows(v)).collect::<Result<_>>()?;
            let batch = BatchEmbeddings {
                fused_video: n[0],
                fused_text: n[1],
                base_video: n[2],
                base_text: n[3],
            };
            Ok(total_objective(t, &batch, &momentum, &video_bank, &text_bank, &cfg.loss)?.0)
        },
        &inputs,
    )?;
    report.record("total objective", OP_TOLERANCE, rep.max_rel_error, rep.coordinates);

    // the full training loss with respect to every model parameter
    let texts: Vec<usize> = (0..prepared.texts.len()).collect();
    let momentum = momentum_embeddings(&state.momentum, &prepared, &texts)?;
    let inputs: Vec<Array2<f64>> = params.refs().into_iter().cloned().collect();
    let rep = e2e.check(
        |t, vs| {
            let mut it = vs.iter().copied();
            let vars = params.map(&mut |_| it.next().expect("one var per leaf"));
            let banks = (&video_bank, &text_bank);
            Ok(batch_objective(t, &vars, &prepared, &texts, &momentum, banks, &cfg)?.0)
        },
        &inputs,
    )?;
    report.record("end-to-end loss", END_TO_END_TOLERANCE, rep.max_rel_error, rep.coordinates);
    Ok(())
}

/// Initial parameters plus small noise so zero-initialized biases do not
/// leave units exactly at a kink.
fn perturbed(params: &ModelParams, rng: &mut ChaCha8Rng) -> ModelParams {
    let mut p = params.clone();
    for m in p.refs_mut() {
        let noise = uniform(rng, m.nrows(), m.ncols(), -0.05, 0.05);
        *m += &noise;
    }
    p
}
