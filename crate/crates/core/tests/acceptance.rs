//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use online_thinning::anscombe::anscombe_value;
use online_thinning::engine::{subsample_mask, EngineConfig, ObservationBatch, ThinningEngine};
use online_thinning::eval::{auc, baseline_online_gmm, run_synthetic, tradeoff_sweep, SweepBase, SweepKind};
use online_thinning::model::{LowRankGaussian, SampleMask};
use online_thinning::stream::write_matrix;
use online_thinning::synth::{gen_synthetic, SyntheticConfig};
use online_thinning::tracking::{largest_principal_angle, petrels_update_masked, TrackerState};
use online_thinning::tree::{MixtureTree, NodeKind, StructureEvent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;

const SEEDS: u64 = 10;
/// Forgetting factor used for every synthetic detection run below.
const DETECTION_ALPHA: f64 = 0.97;
const DETECTION_BATCH: usize = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs()
}

/// Dense log-density of `N(mean, cov)` at `x` via a Cholesky factor.
fn dense_log_likelihood(cov: &DMatrix<f64>, d: &DVector<f64>) -> (f64, f64, f64) {
    let chol = cov.clone().cholesky().expect("covariance is positive definite");
    let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let quad = d.dot(&chol.solve(d));
    let p = d.len() as f64;
    let ll = -0.5 * (p * (2.0 * std::f64::consts::PI).ln() + log_det + quad);
    (quad, log_det, ll)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let p = rng.random_range(2..=50);
        let r = rng.random_range(1..=5.min(p - 1));
        let basis = DMatrix::from_fn(p, r, |_, _| gauss(&mut rng)).qr().q();
        let eigs = DVector::from_fn(r, |_, _| rng.random_range(0.05..10.0));
        let s2 = rng.random_range(0.01..2.0);
        let mean = DVector::from_fn(p, |_, _| gauss(&mut rng));
        let g = LowRankGaussian::new(mean.clone(), basis.clone(), eigs.clone(), s2).unwrap();
        let cov = &basis * DMatrix::from_diagonal(&eigs) * basis.transpose() + DMatrix::identity(p, p) * s2;
        let x = DVector::from_fn(p, |_, _| 2.0 * gauss(&mut rng));
        let (quad, log_det, ll) = dense_log_likelihood(&cov, &(&x - &mean));
        worst = worst
            .max(rel_err(g.quad_form(&x).unwrap(), quad))
            .max(rel_err(g.log_det(), log_det))
            .max(rel_err(g.log_likelihood(&x).unwrap(), ll));

        let k = rng.random_range(1..=p);
        let mask = subsample_mask(p, k as f64 / p as f64, 0, &mut rng).unwrap();
        let idx = mask.indices();
        let sub_cov = DMatrix::from_fn(k, k, |i, j| cov[(idx[i], idx[j])]);
        let d_obs = DVector::from_fn(k, |i, _| x[idx[i]] - mean[idx[i]]);
        let x_obs = DVector::from_fn(k, |i, _| x[idx[i]]);
        let (_, _, want) = dense_log_likelihood(&sub_cov, &d_obs);
        worst = worst.max(rel_err(g.masked_log_likelihood(&x_obs, &mask).unwrap(), want));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-8 && secs < 10.0,
        format!("max relative error {worst:.2e} over 1000 components, {secs:.2}s"),
    )
}

fn reference_setup(delta: f64, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        ambient_dim: 100,
        subspace_rank: 10,
        total: 4000,
        train_count: 1000,
        noise_var: 0.1,
        rotation_speed: delta,
        seed,
        ..SyntheticConfig::default()
    }
}

fn detection_base(delta: f64) -> SweepBase {
    SweepBase {
        synth: reference_setup(delta, 0),
        engine: EngineConfig {
            alpha: DETECTION_ALPHA,
            ..EngineConfig::default()
        },
        batch_size: DETECTION_BATCH,
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let rows = tradeoff_sweep(SweepKind::Subsample, &[1.0, 0.55], &[5e-3], &detection_base(5e-3), SEEDS).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let (full, sub) = (rows[0].detection_error, rows[1].detection_error);
    outcome(
        full <= 0.05 && sub <= 0.08 && secs < 300.0,
        format!("mean detection error {full:.4} at rate 1.0 (<= 0.05), {sub:.4} at rate 0.55 (<= 0.08), {secs:.1}s"),
    )
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut spreads = Vec::new();
    let mut parts = Vec::new();
    for delta in [0.0, 5e-3] {
        let rows = tradeoff_sweep(SweepKind::Batch, &[10.0, 100.0, 1000.0], &[delta], &detection_base(delta), SEEDS).unwrap();
        let errs: Vec<f64> = rows.iter().map(|r| r.detection_error).collect();
        let spread = errs.iter().cloned().fold(f64::MIN, f64::max) - errs.iter().cloned().fold(f64::MAX, f64::min);
        parts.push(format!(
            "delta {delta}: errors {:.4}/{:.4}/{:.4} spread {:.2}pp",
            errs[0],
            errs[1],
            errs[2],
            100.0 * spread
        ));
        spreads.push(spread);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        spreads.iter().all(|&s| s <= 0.04) && secs < 600.0,
        format!("{} (<= 4pp), {secs:.1}s", parts.join("; ")),
    )
}

fn criterion_4() -> Outcome {
    let pairs: Vec<(f64, f64)> = (0..SEEDS)
        .into_par_iter()
        .map(|seed| {
            let synth = reference_setup(5e-3, seed);
            let engine = EngineConfig {
                alpha: DETECTION_ALPHA,
                seed,
                ..EngineConfig::default()
            };
            let ot = run_synthetic(&synth, &engine, DETECTION_BATCH).unwrap().auc;
            let s = gen_synthetic(&synth).unwrap();
            let base = baseline_online_gmm(&s.training(), &s.test_data(), 2, DETECTION_ALPHA, DETECTION_BATCH, seed).unwrap();
            (ot, auc(&base, s.test_labels()).unwrap())
        })
        .collect();
    let n = pairs.len() as f64;
    let ot = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let gmm = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    outcome(
        ot - gmm >= 0.05,
        format!("mean AUC {ot:.4} vs diagonal online GMM {gmm:.4}, margin {:.4} (>= 0.05)", ot - gmm),
    )
}

/// Checks the structural invariants directly from the public node view.
fn invariant_violation(tree: &MixtureTree) -> Option<String> {
    let leaf_sum: f64 = tree.nodes().filter(|n| n.kind == NodeKind::Leaf).map(|n| n.weight).sum();
    if (leaf_sum - 1.0).abs() > 1e-9 {
        return Some(format!("leaf weights sum to {leaf_sum}"));
    }
    for n in tree.nodes() {
        let v = n.gaussian.basis();
        let gram = v.tr_mul(v) - DMatrix::identity(v.ncols(), v.ncols());
        if gram.amax() > 1e-8 {
            return Some(format!("node {} basis off by {:e}", n.id, gram.amax()));
        }
        match n.kind {
            NodeKind::Leaf => {
                let Some(ch) = n.children else {
                    return Some(format!("leaf {} has no virtual children", n.id));
                };
                if ch.iter().any(|&c| tree.node(c).map(|c| c.kind) != Some(NodeKind::Virtual)) {
                    return Some(format!("leaf {} children are not virtual", n.id));
                }
            }
            NodeKind::Internal => {
                let ch = n.children.expect("internal node has children");
                let sum: f64 = ch.iter().map(|&c| tree.node(c).unwrap().weight).sum();
                if (sum - n.weight).abs() > 1e-9 {
                    return Some(format!("internal {} weight {} vs children {sum}", n.id, n.weight));
                }
            }
            NodeKind::Virtual => {}
        }
    }
    None
}

fn criterion_5() -> Outcome {
    let synth = SyntheticConfig {
        total: 5000,
        ..reference_setup(5e-3, 0)
    };
    let s = gen_synthetic(&synth).unwrap();
    let (mut engine, _) = ThinningEngine::train(&EngineConfig::default(), &s.training()).unwrap();
    let test = s.test_data();
    let (mut splits, mut merges) = (0, 0);
    let mut violation = invariant_violation(engine.tree());
    for t in 0..test.ncols() {
        if violation.is_some() {
            break;
        }
        let batch = ObservationBatch::new(t as u64, test.columns(t, 1).into_owned()).unwrap();
        for e in engine.process_batch(&batch).unwrap().events {
            match e {
                StructureEvent::Split { .. } => splits += 1,
                StructureEvent::Merge { .. } => merges += 1,
            }
        }
        violation = invariant_violation(engine.tree()).map(|v| format!("step {t}: {v}"));
    }
    let detail = format!(
        "{} steps, {splits} splits, {merges} merges, {}",
        test.ncols(),
        violation.as_deref().unwrap_or("all invariants held")
    );
    outcome(violation.is_none() && splits >= 1 && merges >= 1, detail)
}

fn thin_wall_time(input: &Path) -> Duration {
    let start = Instant::now();
    let status = Command::new(env!("CARGO_BIN_EXE_othin"))
        .env("RUST_LOG", "off")
        .arg("thin")
        .arg(input)
        .args(["--train", "1000", "--batch-size", "10", "--rank", "10"])
        .args(["--tol", "1e300", "--gamma", "1e300", "--out", "/dev/null"])
        .status()
        .unwrap();
    assert!(status.success());
    start.elapsed()
}

fn criterion_6() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = [100, 200]
        .into_iter()
        .map(|p| {
            let s = gen_synthetic(&SyntheticConfig {
                ambient_dim: p,
                ..reference_setup(0.0, 0)
            })
            .unwrap();
            let path = dir.path().join(format!("p{p}.bin"));
            write_matrix(&path, &s.data).unwrap();
            thin_wall_time(&path);
            path
        })
        .collect();
    // Interleaved so that background load drifts affect both sizes alike.
    let mut times = [Vec::new(), Vec::new()];
    for _ in 0..5 {
        for (k, path) in paths.iter().enumerate() {
            times[k].push(thin_wall_time(path));
        }
    }
    let medians: Vec<f64> = times
        .iter_mut()
        .map(|t| {
            t.sort();
            t[2].as_secs_f64()
        })
        .collect();
    let ratio = medians[1] / medians[0];
    outcome(
        ratio <= 2.5,
        format!("median thin time {:.3}s at p=100, {:.3}s at p=200, ratio {ratio:.2} (<= 2.5)", medians[0], medians[1]),
    )
}

fn criterion_7() -> Outcome {
    let (p, r) = (100, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let q = DMatrix::from_fn(p, 2 * r, |_, _| gauss(&mut rng)).qr().q();
    let truth = q.columns(0, r).into_owned();
    let mut basis = &truth * 0.5f64.cos() + q.columns(r, r) * 0.5f64.sin();
    let start = largest_principal_angle(&basis, &truth).unwrap();
    let mut state = TrackerState::new(r, 1e-6);
    for _ in 0..100 {
        let x = &truth * DMatrix::from_fn(r, 20, |_, _| gauss(&mut rng));
        let mask: SampleMask = subsample_mask(p, 0.7, r, &mut rng).unwrap();
        let x_obs = mask.gather_rows(&x);
        let zeros = DMatrix::zeros(x_obs.nrows(), x_obs.ncols());
        (basis, state) = petrels_update_masked(&basis, &state, &x_obs, &zeros, &mask, 0.9).unwrap();
    }
    let end = largest_principal_angle(&basis, &truth).unwrap();
    outcome(end < 0.1, format!("largest principal angle {start:.3} -> {end:.5} rad (< 0.1)"))
}

fn criterion_8() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for (k, lambda) in [5.0, 10.0, 50.0].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(80 + k as u64);
        let pois = Poisson::new(lambda).unwrap();
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| anscombe_value(pois.sample(&mut rng) as u64)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        pass &= (0.8..=1.2).contains(&var);
        parts.push(format!("lambda {lambda}: {var:.4}"));
    }
    outcome(pass, format!("sample variances {} (in [0.8, 1.2])", parts.join(", ")))
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("stream.csv");
    let s = gen_synthetic(&SyntheticConfig {
        total: 2000,
        ..reference_setup(5e-3, 3)
    })
    .unwrap();
    write_matrix(&input, &s.data).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(env!("CARGO_BIN_EXE_othin"))
            .env("RUST_LOG", "off")
            .arg("thin")
            .arg(&input)
            .args(["--train", "1000", "--batch-size", "10", "--subsample-rate", "0.55", "--seed", "42"])
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(out).unwrap()
    };
    let (a, b) = (run("a.jsonl"), run("b.jsonl"));
    let records = a.iter().filter(|&&c| c == b'\n').count();
    outcome(
        a == b && records > 0,
        format!("{} bytes, {records} flagged records, identical: {}", a.len(), a == b),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("oracle equivalence", criterion_1),
        ("subsampling tradeoff", criterion_2),
        ("mini-batch robustness", criterion_3),
        ("comparative ROC", criterion_4),
        ("invariant suite", criterion_5),
        ("complexity scaling", criterion_6),
        ("subspace tracking", criterion_7),
        ("Anscombe stabilization", criterion_8),
        ("determinism", criterion_9),
    ];
    let mut failed = 0;
    for (k, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!("criterion {} {name}: {} ({})", k + 1, if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
