use super::*;
use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn labels(bits: &[u8]) -> Vec<bool> {
    bits.iter().map(|&b| b == 1).collect()
}

/// Pairwise (Mann-Whitney) AUC with ties counted as one half.
fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (sa, _) in scores.iter().zip(labels).filter(|(_, &l)| l) {
        for (sb, _) in scores.iter().zip(labels).filter(|(_, &l)| !l) {
            den += 1.0;
            if sa > sb {
                num += 1.0;
            } else if sa == sb {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Minimum detection error over every threshold that changes the flag set.
fn brute_force_error(scores: &[f64], labels: &[bool]) -> f64 {
    let mut taus: Vec<f64> = scores.to_vec();
    taus.push(f64::NEG_INFINITY);
    taus.iter()
        .map(|&t| detection_rates(scores, labels, t).unwrap().detection_error)
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn hand_counted_rates() {
    let l = labels(&[1, 0, 0, 1]);
    let s = [5.0, 1.0, 2.0, 4.0];
    let m = detection_rates(&s, &l, 3.0).unwrap();
    assert_eq!((m.p_d, m.p_f), (1.0, 0.0));
    let m = detection_rates(&s, &l, 1.5).unwrap();
    assert_eq!((m.p_d, m.p_f), (1.0, 0.5));
    let m = detection_rates(&s, &l, f64::INFINITY).unwrap();
    assert_eq!((m.p_d, m.p_f), (0.0, 0.0));
    assert_relative_eq!(m.detection_error, 1.0);
}

#[test]
fn single_class_and_length_errors() {
    assert!(matches!(detection_rates(&[1.0, 2.0], &[true, true], 0.0), Err(ThinError::SingleClass)));
    assert!(matches!(best_threshold(&[1.0], &[false]), Err(ThinError::SingleClass)));
    assert!(matches!(roc_curve(&[1.0, 2.0], &[false, false]), Err(ThinError::SingleClass)));
    assert!(detection_rates(&[1.0], &[true, false], 0.0).is_err());
}

#[test]
fn best_threshold_edge_cases() {
    let l = labels(&[0, 0, 1, 1]);
    let (tau, m) = best_threshold(&[1.0, 2.0, 3.0, 4.0], &l).unwrap();
    assert_eq!(m.detection_error, 0.0);
    assert_eq!(tau, 2.5);
    let (_, m) = best_threshold(&[7.0; 4], &l).unwrap();
    assert_eq!(m.detection_error, 1.0);
}

#[test]
fn best_threshold_ties_prefer_larger_tau() {
    // Every threshold yields error 1: the largest candidate wins.
    let (tau, _) = best_threshold(&[3.0, 3.0], &[true, false]).unwrap();
    assert_eq!(tau, f64::INFINITY);
}

#[test]
fn best_threshold_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let l: Vec<bool> = (0..200).map(|_| rng.random::<f64>() < 0.3).collect();
        let s: Vec<f64> = l
            .iter()
            .map(|&a| (rng.random_range(0..40) as f64) / 4.0 + if a { 1.5 } else { 0.0 })
            .collect();
        let (tau, m) = best_threshold(&s, &l).unwrap();
        assert_relative_eq!(m.detection_error, brute_force_error(&s, &l), epsilon = 1e-12);
        let again = detection_rates(&s, &l, tau).unwrap();
        assert_eq!(again.detection_error, m.detection_error);
    }
}

#[test]
fn roc_shape_and_auc() {
    let l = labels(&[0, 0, 1, 1]);
    let curve = roc_curve(&[1.0, 2.0, 3.0, 4.0], &l).unwrap();
    assert_eq!(curve.first(), Some(&(0.0, 0.0)));
    assert_eq!(curve.last(), Some(&(1.0, 1.0)));
    assert_eq!(auc_of(&curve), 1.0);
    let rev = auc(&[4.0, 3.0, 2.0, 1.0], &l).unwrap();
    assert_eq!(rev, 0.0);
}

#[test]
fn uninformative_scores_give_auc_near_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let l: Vec<bool> = (0..10_000).map(|_| rng.random::<bool>()).collect();
    let s: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
    let a = auc(&s, &l).unwrap();
    assert!((0.47..=0.53).contains(&a), "{a}");
}

proptest! {
    #[test]
    fn auc_matches_pairwise_count(
        raw in proptest::collection::vec((0u8..12, any::<bool>()), 2..60)
    ) {
        let s: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
        let mut l: Vec<bool> = raw.iter().map(|r| r.1).collect();
        l[0] = true;
        l[1] = false;
        let a = auc(&s, &l).unwrap();
        prop_assert!((a - pairwise_auc(&s, &l)).abs() < 1e-12);
        let rev: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert!((auc(&rev, &l).unwrap() - (1.0 - a)).abs() < 1e-12);
        let warped: Vec<f64> = s.iter().map(|v| (v / 3.0).exp()).collect();
        prop_assert!((auc(&warped, &l).unwrap() - a).abs() < 1e-12);
    }

    #[test]
    fn rates_are_monotone_in_tau(
        raw in proptest::collection::vec((-50i32..50, any::<bool>()), 2..60),
        t1 in -60.0f64..60.0,
        dt in 0.0f64..30.0,
    ) {
        let s: Vec<f64> = raw.iter().map(|r| r.0 as f64).collect();
        let mut l: Vec<bool> = raw.iter().map(|r| r.1).collect();
        l[0] = true;
        l[1] = false;
        let a = detection_rates(&s, &l, t1).unwrap();
        let b = detection_rates(&s, &l, t1 + dt).unwrap();
        prop_assert!(b.p_d <= a.p_d && b.p_f <= a.p_f);
        prop_assert!((a.detection_error - (1.0 - a.p_d + a.p_f)).abs() <= 1e-12);
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

#[test]
fn single_component_gmm_scores_its_fitted_gaussian() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let sd = [1.0, 2.0, 0.5];
    let train = DMatrix::from_fn(3, 2000, |i, _| 1.0 + sd[i] * normal(&mut rng));
    let gmm = OnlineDiagGmm::fit(&train, 1, 0.9, 0).unwrap();
    // Oracle: maximum-likelihood diagonal Gaussian of the training block.
    let mean = train.column_mean();
    let var = train.column_variance();
    let x = DMatrix::from_column_slice(3, 1, &[0.3, -1.0, 2.0]);
    let mut want = 0.0;
    for i in 0..3 {
        want += 0.5 * ((2.0 * std::f64::consts::PI * var[i]).ln() + (x[i] - mean[i]).powi(2) / var[i]);
    }
    assert_relative_eq!(gmm.score(&x)[0], want, epsilon = 1e-9);
}

#[test]
fn gmm_scoring_is_pointwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let train = DMatrix::from_fn(4, 300, |_, _| normal(&mut rng));
    let gmm = OnlineDiagGmm::fit(&train, 3, 0.9, 1).unwrap();
    let x = DMatrix::from_fn(4, 10, |_, _| normal(&mut rng));
    let s = gmm.score(&x);
    let perm: Vec<usize> = (0..10).rev().collect();
    let xp = DMatrix::from_fn(4, 10, |i, j| x[(i, perm[j])]);
    let sp = gmm.score(&xp);
    for j in 0..10 {
        assert_eq!(sp[j], s[perm[j]]);
    }
}

#[test]
fn gmm_tracks_a_shifted_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let train = DMatrix::from_fn(2, 500, |_, _| normal(&mut rng));
    let mut gmm = OnlineDiagGmm::fit(&train, 1, 0.9, 0).unwrap();
    let probe = DMatrix::from_column_slice(2, 1, &[5.0, 5.0]);
    let before = gmm.score(&probe)[0];
    for _ in 0..100 {
        gmm.update(&DMatrix::from_fn(2, 10, |_, _| 5.0 + normal(&mut rng)));
    }
    assert!(gmm.score(&probe)[0] < before - 5.0);
}

#[test]
fn one_cell_sweep_equals_a_single_run() {
    let synth = SyntheticConfig {
        ambient_dim: 30,
        subspace_rank: 3,
        total: 600,
        train_count: 200,
        ..SyntheticConfig::default()
    };
    let engine = EngineConfig {
        rank: 3,
        ..EngineConfig::default()
    };
    let base = SweepBase {
        synth: synth.clone(),
        engine: engine.clone(),
        batch_size: 10,
    };
    let rows = tradeoff_sweep(SweepKind::Subsample, &[1.0], &[0.0], &base, 1).unwrap();
    let single = run_synthetic(&SyntheticConfig { seed: 0, ..synth }, &EngineConfig { seed: 0, ..engine }, 10).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].detection_error, single.best.detection_error);
    assert_eq!(rows[0].auc, single.auc);
    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, SweepKind::Subsample, &rows).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("subsample_rate,delta,detection_error"));
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn thinning_separates_anomalies_on_a_small_static_stream() {
    let synth = SyntheticConfig {
        ambient_dim: 40,
        subspace_rank: 4,
        total: 1500,
        train_count: 500,
        seed: 3,
        ..SyntheticConfig::default()
    };
    let run = run_synthetic(&synth, &EngineConfig { rank: 4, ..EngineConfig::default() }, 10).unwrap();
    let mean = |anom: bool| {
        let v: Vec<f64> = run.scores.iter().zip(&run.labels).filter(|(_, &l)| l == anom).map(|(s, _)| *s).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!(mean(true) > mean(false));
    assert!(run.auc > 0.8, "{}", run.auc);
}
