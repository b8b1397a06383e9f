//! Oracles and invariant checks shared by the integration test targets.
#![allow(dead_code)]

use hise_core::datamodel::{generate_synthetic, SyntheticConfig};
use hise_core::evalretrieval::{median_rank, ranks, recall_at_k, Direction, MetricsReport};
use hise_core::model::{embed_split, Components, ModelOptions, PreparedSplit};
use hise_core::numcore::Tape;
use hise_core::objective::{hal_loss, momentum_update, MemoryBank, Positives};
use hise_core::params::{ModelDims, ModelParams};
use hise_core::tse::{build_role_graph, rgcn_layer};
use hise_core::vse::{affinity_matrix, gcn_layer};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GAMMA: f64 = 0.3;
pub const MU: f64 = 0.1;

/// Plain-loop evaluation of the hubness-aware loss, one direction per pass.
pub fn hal_direct(s: &Array2<f64>, row_pos: &[usize], col_pos: &[usize], gamma: f64, mu: f64) -> f64 {
    let (q, r) = s.dim();
    let mut rows = 0.0;
    for i in 0..q {
        let mut neg = 0.0;
        for j in 0..r {
            if j != row_pos[i] {
                neg += ((s[[i, j]] - gamma) / mu).exp();
            }
        }
        rows += (neg + 1.0).ln() - (s[[i, row_pos[i]]] + 1.0).ln();
    }
    let mut cols = 0.0;
    for j in 0..r {
        let mut neg = 0.0;
        for i in 0..q {
            if i != col_pos[j] {
                neg += ((s[[i, j]] - gamma) / mu).exp();
            }
        }
        cols += (neg + 1.0).ln() - (s[[col_pos[j], j]] + 1.0).ln();
    }
    mu / q as f64 * rows + mu / r as f64 * cols
}

pub fn hal_taped(s: &Array2<f64>, pos: &Positives, gamma: f64, mu: f64) -> f64 {
    let mut t = Tape::new();
    let v = t.constant(s.clone());
    let l = hal_loss(&mut t, v, pos, gamma, mu).unwrap();
    t.value(l)[[0, 0]]
}

pub fn random_similarities(rng: &mut ChaCha8Rng, q: usize, r: usize) -> Array2<f64> {
    Array2::from_shape_fn((q, r), |_| rng.gen_range(-0.99..1.0))
}

/// Largest absolute gap between the taped loss and the direct evaluation
/// over `cases` random matrices. Every fourth case is rectangular with
/// several rows sharing a positive column.
pub fn hal_worst_gap(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let q = rng.gen_range(1..9);
        let (s, pos) = if case % 4 == 3 {
            let r = rng.gen_range(1..=q);
            let mut pairs: Vec<(usize, usize)> = (0..r).map(|c| (c, c)).collect();
            pairs.extend((r..q).map(|i| (i, rng.gen_range(0..r))));
            (random_similarities(&mut rng, q, r), Positives::from_pairs(q, r, &pairs).unwrap())
        } else {
            let mut perm: Vec<usize> = (0..q).collect();
            perm.shuffle(&mut rng);
            (random_similarities(&mut rng, q, q), Positives::permutation(&perm).unwrap())
        };
        let expected = hal_direct(&s, pos.row_to_col(), pos.col_to_row(), GAMMA, MU);
        worst = worst.max((hal_taped(&s, &pos, GAMMA, MU) - expected).abs());
    }
    worst
}

/// Loss at `S = [1]` and at `S = I_2`.
pub fn hal_hand_values() -> (f64, f64) {
    (
        hal_taped(&Array2::ones((1, 1)), &Positives::diagonal(1), GAMMA, MU),
        hal_taped(&Array2::eye(2), &Positives::diagonal(2), GAMMA, MU),
    )
}

/// Full sort of every query's candidates: score descending, index ascending.
pub fn sorted_ranks(s: &Array2<f64>, truth: &[usize], direction: Direction) -> Vec<usize> {
    truth
        .iter()
        .enumerate()
        .map(|(q, &t)| {
            let scores: Vec<f64> = match direction {
                Direction::TextToVideo => s.column(q).to_vec(),
                Direction::VideoToText => s.row(q).to_vec(),
            };
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            order.iter().position(|&i| i == t).unwrap() + 1
        })
        .collect()
}

pub fn sorted_recall(r: &[usize], k: usize) -> f64 {
    100.0 * r.iter().filter(|&&x| x <= k).count() as f64 / r.len() as f64
}

pub fn sorted_median(r: &[usize]) -> f64 {
    let mut v: Vec<f64> = r.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Similarities drawn from a coarse grid so ties occur often.
pub fn grid_similarities(rng: &mut ChaCha8Rng, n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |_| rng.gen_range(-10..=10) as f64 / 10.0)
}

pub fn random_pairing(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Compares ranks, recalls, medians and the full report against the sort
/// oracle on `cases` random `n x n` matrices; returns the first mismatch.
pub fn metrics_against_sort(cases: usize, n: usize, seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for case in 0..cases {
        let s = grid_similarities(&mut rng, n);
        let text_to_video = random_pairing(&mut rng, n);
        let mut video_to_text = vec![0; n];
        for (t, &v) in text_to_video.iter().enumerate() {
            video_to_text[v] = t;
        }
        let mut sums = 0.0;
        for (dir, truth) in [
            (Direction::TextToVideo, &text_to_video),
            (Direction::VideoToText, &video_to_text),
        ] {
            let expected = sorted_ranks(&s, truth, dir);
            if ranks(&s, truth, dir) != expected {
                return Err(format!("case {case} {dir:?}: ranks differ"));
            }
            for k in [1, 5, 10, n] {
                let (got, want) = (recall_at_k(&s, truth, k, dir), sorted_recall(&expected, k));
                if got != want {
                    return Err(format!("case {case} {dir:?}: R@{k} {got} != {want}"));
                }
            }
            let (got, want) = (median_rank(&s, truth, dir), sorted_median(&expected));
            if got != want {
                return Err(format!("case {case} {dir:?}: MdR {got} != {want}"));
            }
            let report = MetricsReport::from_similarity(&s, &text_to_video).map_err(|e| e.to_string())?;
            let m = match dir {
                Direction::TextToVideo => report.t2v,
                Direction::VideoToText => report.v2t,
            };
            let want = [1, 5, 10].map(|k| sorted_recall(&expected, k));
            if [m.r1, m.r5, m.r10] != want || m.mdr != sorted_median(&expected) {
                return Err(format!("case {case} {dir:?}: report {m:?}"));
            }
            sums += want.iter().sum::<f64>();
            if dir == Direction::VideoToText && report.r_sum != sums {
                return Err(format!("case {case}: R@Sum {} != {sums}", report.r_sum));
            }
        }
    }
    Ok(())
}

fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(f64::abs).fold(0.0, |m, &x| m.max(x))
}

fn small_data() -> SyntheticConfig {
    SyntheticConfig {
        pairs: 6,
        d_model: 8,
        ..Default::default()
    }
}

fn small_params(cfg: &SyntheticConfig, seed: u64) -> ModelParams {
    let vocab = cfg.validate().unwrap();
    let dims = ModelDims {
        vocab_size: vocab.size,
        d_model: cfg.d_model,
        d_frame: cfg.d_frame,
        d_roi: cfg.d_roi,
        max_text_len: 16,
        max_frames: 8,
        num_roles: 3,
    };
    ModelParams::init(&dims, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// With all relation weights zero and nonnegative node features the layer is
/// the identity, for every generated role graph.
pub fn rgcn_zero_weight_identity() -> Result<(), String> {
    let cfg = small_data();
    let split = generate_synthetic(&cfg, 5).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for text in &split.texts {
        let graph = build_role_graph(text, 3).map_err(|e| e.to_string())?;
        let n = graph.num_nodes();
        let e = Array2::from_shape_fn((n, 5), |_| rng.gen_range(0.0..2.0));
        let mut t = Tape::new();
        let nodes = t.constant(e.clone());
        let zeros: Vec<_> = (0..graph.num_relations()).map(|_| t.constant(Array2::zeros((5, 5)))).collect();
        let out = rgcn_layer(&mut t, nodes, &graph, &zeros).map_err(|e| e.to_string())?;
        if t.value(out) != &e {
            return Err(format!("text {}: output differs from input", text.text_id));
        }
    }
    Ok(())
}

/// Permuting the entity nodes permutes the affinity-graph layer output the
/// same way.
pub fn gcn_permutation_equivariance() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let (n, d) = (rng.gen_range(2..9), rng.gen_range(2..7));
        let mut m = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0));
        let (e, wq, wk, w) = (m(n, d), m(d, d), m(d, d), m(d, d));
        let run = |e: &Array2<f64>| {
            let mut t = Tape::new();
            let nodes = t.constant(e.clone());
            let (q, k, w) = (t.constant(wq.clone()), t.constant(wk.clone()), t.constant(w.clone()));
            let h = affinity_matrix(&mut t, nodes, q, k, false).unwrap();
            let out = gcn_layer(&mut t, nodes, h, w).unwrap();
            t.value(out).clone()
        };
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permute = |x: &Array2<f64>| Array2::from_shape_fn(x.dim(), |(i, j)| x[[perm[i], j]]);
        let gap = max_abs_diff(&run(&permute(&e)), &permute(&run(&e)));
        if gap > 1e-12 {
            return Err(format!("n={n} d={d}: gap {gap:e}"));
        }
    }
    Ok(())
}

pub fn affinity_rows_sum_to_one() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..20 {
        let (n, d) = (rng.gen_range(1..9), rng.gen_range(1..7));
        let mut m = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| rng.gen_range(-3.0..3.0));
        let mut t = Tape::new();
        let nodes = t.constant(m(n, d));
        let (q, k) = (t.constant(m(d, d)), t.constant(m(d, d)));
        let h = affinity_matrix(&mut t, nodes, q, k, false).map_err(|e| e.to_string())?;
        for row in t.value(h).rows() {
            if (row.sum() - 1.0).abs() > 1e-12 || row.iter().any(|&x| x < 0.0) {
                return Err(format!("row {row} is not a distribution"));
            }
        }
    }
    Ok(())
}

/// Fused embeddings at alpha = 1 equal those of the model with every
/// semantic component switched off, bit for bit.
pub fn alpha_one_matches_disabled() -> Result<(), String> {
    let cfg = small_data();
    let split = generate_synthetic(&cfg, 2).map_err(|e| e.to_string())?;
    let params = small_params(&cfg, 4);
    let full = ModelOptions::default();
    let off = ModelOptions {
        components: Components::NONE,
        ..Default::default()
    };
    let a = embed_split(&params, &PreparedSplit::new(&split, &full).unwrap(), &full, 1.0).map_err(|e| e.to_string())?;
    let b = embed_split(&params, &PreparedSplit::new(&split, &off).unwrap(), &off, 0.9).map_err(|e| e.to_string())?;
    let bits = |m: &Array2<f64>| m.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    if bits(&a.video_fused) != bits(&b.video_fused) || bits(&a.text_fused) != bits(&b.text_fused) {
        return Err("fused embeddings differ".into());
    }
    Ok(())
}

fn unit(d: usize, i: usize) -> Array2<f64> {
    Array2::from_shape_fn((1, d), |(_, j)| if j == i { 1.0 } else { 0.0 })
}

/// Pushing rows one batch at a time keeps exactly the newest `capacity`
/// rows, oldest first.
pub fn fifo_eviction() -> Result<(), String> {
    let mut bank = MemoryBank::new(3);
    let mut pushed = Vec::new();
    for i in 0..7 {
        let batch = if i % 2 == 0 {
            unit(8, i)
        } else {
            ndarray::concatenate![ndarray::Axis(0), unit(8, i), unit(8, 7 - i)]
        };
        bank.push(&batch).map_err(|e| e.to_string())?;
        pushed.extend(batch.rows().into_iter().map(|r| r.to_owned()));
        let keep = pushed.len().min(3);
        let expected: Vec<_> = pushed[pushed.len() - keep..].to_vec();
        let got: Vec<_> = bank.matrix(8).rows().into_iter().map(|r| r.to_owned()).collect();
        if got != expected {
            return Err(format!("after push {i}: bank holds the wrong rows"));
        }
    }
    let before = bank.clone();
    if bank.push(&Array2::from_elem((2, 8), 1.0)).is_ok() || bank != before {
        return Err("non-unit rows were accepted".into());
    }
    Ok(())
}

/// m = 0 copies the live weights; m = 1 leaves the momentum copy untouched
/// however many updates are applied.
pub fn momentum_endpoints() -> Result<(), String> {
    let cfg = small_data();
    let live = small_params(&cfg, 1);
    let mut momentum = small_params(&cfg, 2);
    let frozen = momentum.clone();
    for step in 0..50 {
        let drifting = small_params(&cfg, 100 + step);
        momentum_update(&drifting, &mut momentum, 1.0).map_err(|e| e.to_string())?;
    }
    if momentum != frozen {
        return Err("m = 1 changed the momentum copy".into());
    }
    momentum_update(&live, &mut momentum, 0.0).map_err(|e| e.to_string())?;
    if momentum != live {
        return Err("m = 0 did not copy the live weights".into());
    }
    Ok(())
}

pub fn structural_invariants() -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("rgcn zero-weight identity", rgcn_zero_weight_identity()),
        ("gcn permutation equivariance", gcn_permutation_equivariance()),
        ("affinity rows sum to 1", affinity_rows_sum_to_one()),
        ("alpha = 1 matches disabled semantics", alpha_one_matches_disabled()),
        ("fifo eviction", fifo_eviction()),
        ("momentum endpoints", momentum_endpoints()),
    ]
}
