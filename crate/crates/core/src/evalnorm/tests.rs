use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_labeled(seed: u64, n: usize) -> TrialScores {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = (0..n)
        .map(|i| {
            let target = rng.random_bool(0.3);
            let shift = if target { 1.0 } else { 0.0 };
            // coarse rounding forces ties between and within classes
            let s = ((rng.random::<f64>() * 2.0 + shift) * 20.0).round() / 20.0;
            let label = if target { Label::Target } else { Label::Nontarget };
            Trial::new(format!("e{i}"), format!("t{i}"), s, Some(label))
        })
        .collect();
    TrialScores::new(entries).unwrap()
}

fn rates_at(scores: &TrialScores, tau: f64) -> (f64, f64) {
    let (tg, nt) = scores.split_by_label().unwrap();
    let miss = tg.iter().filter(|&&s| s < tau).count() as f64 / tg.len() as f64;
    let fa = nt.iter().filter(|&&s| s >= tau).count() as f64 / nt.len() as f64;
    (fa, miss)
}

fn oracle_thresholds(scores: &TrialScores) -> Vec<f64> {
    let mut t = scores.scores();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t.push(f64::INFINITY);
    t
}

/// Intersects every segment of the operating-point polyline with the
/// diagonal.
fn eer_oracle(scores: &TrialScores) -> f64 {
    let pts: Vec<(f64, f64)> = oracle_thresholds(scores).iter().map(|&t| rates_at(scores, t)).collect();
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        let (d0, d1) = (y0 - x0, y1 - x1);
        if d0 == 0.0 {
            return y0;
        }
        if d0.signum() != d1.signum() {
            let t = d0 / (d0 - d1);
            return y0 + t * (y1 - y0);
        }
    }
    panic!("no crossing");
}

fn dcf_oracle(scores: &TrialScores, p: &DcfParams) -> f64 {
    let mut cand = oracle_thresholds(scores);
    cand.push(f64::NEG_INFINITY);
    let norm = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
    cand.iter()
        .map(|&t| {
            let (fa, miss) = rates_at(scores, t);
            (p.c_miss * miss * p.p_target + p.c_fa * fa * (1.0 - p.p_target)) / norm
        })
        .fold(f64::INFINITY, f64::min)
}

#[test]
fn eer_trivial_cases() {
    let sep = TrialScores::from_labeled(&[0.9, 0.8], &[0.2, 0.1]).unwrap();
    assert_eq!(compute_eer(&sep).unwrap(), 0.0);
    let inv = TrialScores::from_labeled(&[0.1], &[0.9]).unwrap();
    assert_eq!(compute_eer(&inv).unwrap(), 1.0);
    let half = TrialScores::from_labeled(&[1.0, 3.0], &[2.0, 0.0]).unwrap();
    assert!((compute_eer(&half).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn metrics_need_both_classes_and_labels() {
    assert!(compute_eer(&TrialScores::from_labeled(&[1.0], &[]).unwrap()).is_err());
    let unlabeled = TrialScores::new(vec![Trial::new("a", "b", 1.0, None)]).unwrap();
    assert!(matches!(compute_eer(&unlabeled), Err(Error::Missing(_))));
    assert!(compute_min_dcf(&unlabeled, &DcfParams::default()).is_err());
}

#[test]
fn eer_and_dcf_match_exhaustive_oracles() {
    for seed in 0..20 {
        let s = random_labeled(seed, 200);
        assert!((compute_eer(&s).unwrap() - eer_oracle(&s)).abs() < 1e-9, "seed {seed}");
        for p in [DcfParams::default(), DcfParams { p_target: 0.3, c_miss: 2.0, c_fa: 0.5 }] {
            assert!((compute_min_dcf(&s, &p).unwrap() - dcf_oracle(&s, &p)).abs() < 1e-12, "seed {seed}");
        }
    }
}

#[test]
fn min_dcf_trivial_cases() {
    let p = DcfParams::default();
    let sep = TrialScores::from_labeled(&[0.9, 0.8], &[0.2, 0.1]).unwrap();
    assert_eq!(compute_min_dcf(&sep, &p).unwrap(), 0.0);
    let flat = TrialScores::from_labeled(&[0.5, 0.5], &[0.5, 0.5, 0.5]).unwrap();
    assert!((compute_min_dcf(&flat, &p).unwrap() - 1.0).abs() < 1e-15);
    assert!(compute_min_dcf(&sep, &DcfParams { p_target: 1.0, ..p }).is_err());
}

#[test]
fn metrics_invariant_under_increasing_transforms() {
    let p = DcfParams::default();
    for seed in 0..5 {
        let s = random_labeled(seed, 200);
        let (eer, dcf) = (compute_eer(&s).unwrap(), compute_min_dcf(&s, &p).unwrap());
        for f in [|x: f64| 3.0 * x - 7.0, |x: f64| x.exp(), |x: f64| x.powi(3) + x] {
            let mapped = TrialScores::new(
                s.entries()
                    .iter()
                    .map(|t| Trial::new(&t.enroll_id, &t.test_id, f(t.score), t.label))
                    .collect(),
            )
            .unwrap();
            assert_eq!(compute_eer(&mapped).unwrap(), eer);
            assert_eq!(compute_min_dcf(&mapped, &p).unwrap(), dcf);
        }
    }
}

#[test]
fn det_points_are_brute_force_counts() {
    let sep = TrialScores::from_labeled(&[1.0], &[0.0]).unwrap();
    assert_eq!(det_points(&sep).unwrap(), vec![(1.0, 0.0), (0.0, 0.0), (0.0, 1.0)]);
    let inv = TrialScores::from_labeled(&[0.0], &[1.0]).unwrap();
    assert_eq!(det_points(&inv).unwrap(), vec![(1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]);

    let s = random_labeled(7, 150);
    let pts = det_points(&s).unwrap();
    let oracle: Vec<(f64, f64)> = oracle_thresholds(&s).iter().map(|&t| rates_at(&s, t)).collect();
    assert_eq!(pts, oracle);
    for w in pts.windows(2) {
        assert!(w[1].0 <= w[0].0 && w[1].1 >= w[0].1);
    }
}

fn cohort(scores: &[f64]) -> Vec<CohortScore> {
    scores.iter().enumerate().map(|(i, &s)| CohortScore::new(format!("c{i}"), s)).collect()
}

fn single_trial(score: f64) -> TrialScores {
    TrialScores::new(vec![Trial::new("e", "t", score, Some(Label::Target))]).unwrap()
}

#[test]
fn asnorm_matches_hand_formula() {
    let ec = BTreeMap::from([("e".to_string(), cohort(&[1.0, 2.0, 3.0, 4.0]))]);
    let tc = BTreeMap::from([("t".to_string(), cohort(&[0.5, -1.0, 2.0, 0.0]))]);
    let cfg = AsNormConfig {
        top_frac: 0.5,
        cohort_subsample: None,
        seed: 0,
    };
    let (out, stats) = asnorm_detailed(&single_trial(3.0), &ec, &tc, &cfg).unwrap();
    // enroll side best {4, 3}: mean 3.5, sample sd sqrt(0.5)
    // test side best {2, 0.5}: mean 1.25, sample sd sqrt(1.125)
    let oracle = (3.0 - 3.5) / 0.5f64.sqrt() + (3.0 - 1.25) / 1.125f64.sqrt();
    assert!((out.entries()[0].score - oracle).abs() < 1e-12);
    assert_eq!((stats[0].n_best1, stats[0].n_best2), (2, 2));
    assert_eq!(out.entries()[0].label, Some(Label::Target));
}

#[test]
fn asnorm_centered_score_is_zero() {
    let c = cohort(&[4.0, 6.0, -10.0]);
    let ec = BTreeMap::from([("e".to_string(), c.clone())]);
    let tc = BTreeMap::from([("t".to_string(), c)]);
    let cfg = AsNormConfig {
        top_frac: 0.6,
        cohort_subsample: None,
        seed: 0,
    };
    assert_eq!(asnorm(&single_trial(5.0), &ec, &tc, &cfg).unwrap().entries()[0].score, 0.0);
}

#[test]
fn asnorm_uses_135_of_2700() {
    assert_eq!(n_best(0.05, 2700).unwrap(), 135);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let big: Vec<f64> = (0..4000).map(|_| rng.random::<f64>()).collect();
    let ec = BTreeMap::from([("e".to_string(), cohort(&big))]);
    let tc = BTreeMap::from([("t".to_string(), cohort(&big[500..]))]);
    let cfg = AsNormConfig {
        top_frac: 0.05,
        cohort_subsample: Some(2700),
        seed: 11,
    };
    let (_, stats) = asnorm_detailed(&single_trial(0.5), &ec, &tc, &cfg).unwrap();
    assert_eq!((stats[0].n_best1, stats[0].n_best2), (135, 135));
}

#[test]
fn asnorm_is_affine_invariant_and_decomposes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ec = BTreeMap::new();
    let mut tc = BTreeMap::new();
    let mut entries = Vec::new();
    for i in 0..6 {
        ec.insert(format!("e{i}"), cohort(&(0..50).map(|_| rng.random::<f64>()).collect::<Vec<_>>()));
        tc.insert(format!("t{i}"), cohort(&(0..50).map(|_| rng.random::<f64>()).collect::<Vec<_>>()));
    }
    for i in 0..6 {
        for j in 0..6 {
            entries.push(Trial::new(format!("e{i}"), format!("t{j}"), rng.random::<f64>() * 2.0 - 0.5, None));
        }
    }
    let raw = TrialScores::new(entries).unwrap();
    let cfg = AsNormConfig {
        top_frac: 0.2,
        cohort_subsample: Some(40),
        seed: 9,
    };
    let (base, stats) = asnorm_detailed(&raw, &ec, &tc, &cfg).unwrap();
    for (t, (b, st)) in raw.entries().iter().zip(base.entries().iter().zip(&stats)) {
        let z1 = (t.score - st.mu1) / st.sigma1;
        let z2 = (t.score - st.mu2) / st.sigma2;
        assert_eq!(b.score, z1 + z2);
    }

    let (a, c) = (2.5, -1.75);
    let map = |m: &BTreeMap<String, Vec<CohortScore>>| -> BTreeMap<String, Vec<CohortScore>> {
        m.iter()
            .map(|(k, v)| (k.clone(), v.iter().map(|x| CohortScore::new(&x.cohort_id, a * x.score + c)).collect()))
            .collect()
    };
    let raw2 = TrialScores::new(
        raw.entries()
            .iter()
            .map(|t| Trial::new(&t.enroll_id, &t.test_id, a * t.score + c, None))
            .collect(),
    )
    .unwrap();
    let moved = asnorm(&raw2, &map(&ec), &map(&tc), &cfg).unwrap();
    for (x, y) in base.entries().iter().zip(moved.entries()) {
        assert!((x.score - y.score).abs() < 1e-9);
    }
}

#[test]
fn asnorm_subsampling_is_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let scores: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
    let ec = BTreeMap::from([("e".to_string(), cohort(&scores))]);
    let tc = ec.values().map(|v| ("t".to_string(), v.clone())).collect();
    let run = |seed| {
        let cfg = AsNormConfig {
            top_frac: 0.1,
            cohort_subsample: Some(30),
            seed,
        };
        asnorm(&single_trial(0.7), &ec, &tc, &cfg).unwrap().entries()[0].score
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn asnorm_errors() {
    let ec = BTreeMap::from([("e".to_string(), cohort(&[1.0, 1.0, 1.0, 1.0]))]);
    let tc = BTreeMap::from([("t".to_string(), cohort(&[1.0, 2.0, 3.0, 4.0]))]);
    let cfg = AsNormConfig {
        top_frac: 0.5,
        cohort_subsample: None,
        seed: 0,
    };
    assert!(matches!(asnorm(&single_trial(1.0), &ec, &tc, &cfg), Err(Error::Degenerate(_))));
    let small = AsNormConfig { top_frac: 0.25, ..cfg.clone() };
    let ok = BTreeMap::from([("e".to_string(), cohort(&[1.0, 2.0, 3.0, 4.0]))]);
    assert!(matches!(asnorm(&single_trial(1.0), &ok, &tc, &small), Err(Error::InsufficientData(_))));
    assert!(matches!(asnorm(&single_trial(1.0), &BTreeMap::new(), &tc, &cfg), Err(Error::Missing(_))));
    let bad = AsNormConfig { top_frac: 0.0, ..cfg };
    assert!(matches!(asnorm(&single_trial(1.0), &ok, &tc, &bad), Err(Error::InvalidArgument { .. })));
}

fn three(scores: [f64; 3]) -> TrialScores {
    TrialScores::new(
        ["a", "b", "c"]
            .iter()
            .zip(scores)
            .map(|(id, s)| Trial::new(*id, "x", s, None))
            .collect(),
    )
    .unwrap()
}

#[test]
fn fuse_hand_example() {
    let s1 = three([1.0, 2.0, 3.0]);
    let s2 = three([10.0, 30.0, 20.0]);
    let out = fuse(&[s1, s2], Some(&[1.0, 1.0])).unwrap();
    // population sd of (1,2,3) is sqrt(2/3); of (10,30,20) it is 10 sqrt(2/3)
    let k = (2.0f64 / 3.0).sqrt();
    let oracle = [(-1.0 - 1.0) / k, (0.0 + 1.0) / k, (1.0 + 0.0) / k];
    for (t, o) in out.entries().iter().zip(oracle) {
        assert!((t.score - o).abs() < 1e-12);
    }
}

#[test]
fn fuse_preserves_agreeing_order() {
    let s = three([0.3, -2.0, 5.0]);
    let single = fuse(std::slice::from_ref(&s), Some(&[4.0])).unwrap();
    let pair = fuse(&[s.clone(), s.clone()], None).unwrap();
    let order = |t: &TrialScores| {
        let mut idx: Vec<usize> = (0..t.len()).collect();
        idx.sort_by(|&a, &b| t.entries()[a].score.total_cmp(&t.entries()[b].score));
        idx
    };
    assert_eq!(order(&single), order(&s));
    assert_eq!(order(&pair), order(&s));
}

#[test]
fn fuse_aligns_by_key_and_rejects_mismatch() {
    let s1 = three([1.0, 2.0, 3.0]);
    let mut rev = s1.entries().to_vec();
    rev.reverse();
    let out = fuse(&[s1.clone(), TrialScores::new(rev).unwrap()], None).unwrap();
    let k = (2.0f64 / 3.0).sqrt();
    assert!((out.entries()[0].score + 2.0 / k).abs() < 1e-12);

    let other = TrialScores::new(vec![
        Trial::new("a", "x", 1.0, None),
        Trial::new("b", "x", 2.0, None),
        Trial::new("z", "x", 3.0, None),
    ])
    .unwrap();
    assert!(fuse(&[s1.clone(), other], None).is_err());
    assert!(matches!(fuse(&[three([1.0, 1.0, 1.0])], None), Err(Error::Degenerate(_))));
    assert!(fuse(std::slice::from_ref(&s1), Some(&[0.0])).is_err());
    assert!(fuse(&[s1], Some(&[1.0, 2.0])).is_err());
}

#[test]
fn trial_scores_invariants() {
    let dup = vec![Trial::new("a", "b", 1.0, None), Trial::new("a", "b", 2.0, None)];
    assert!(matches!(TrialScores::new(dup), Err(Error::Duplicate(_))));
    assert!(TrialScores::new(vec![Trial::new("a", "b", f64::NAN, None)]).is_err());
}

#[test]
fn files_round_trip() {
    let keys = read_trials("e1 t1 target\n\ne1 t2 nontarget\ne2 t1\n".as_bytes()).unwrap();
    assert_eq!(keys.len(), 3);
    assert_eq!(keys[2].label, None);
    let mut buf = Vec::new();
    write_trials(&mut buf, &keys).unwrap();
    assert_eq!(read_trials(buf.as_slice()).unwrap(), keys);
    assert!(matches!(read_trials("a b maybe\n".as_bytes()), Err(Error::Parse { line: 1, .. })));
    assert!(matches!(read_trials("a b\na b\n".as_bytes()), Err(Error::Parse { line: 2, .. })));

    let scored = score_trials(&keys, |e, t| Ok((e.len() + t.len()) as f64 / 3.0)).unwrap();
    let mut text = Vec::new();
    write_scores(&mut text, &scored).unwrap();
    assert_eq!(
        String::from_utf8(text.clone()).unwrap(),
        "e1 t1 1.333333\ne1 t2 1.333333\ne2 t1 1.333333\n"
    );
    let back = read_scores(text.as_slice()).unwrap().with_labels(&keys).unwrap();
    assert_eq!(back.entries()[1].label, Some(Label::Nontarget));
    assert!(read_scores("a b c\n".as_bytes()).is_err());

    let cohort = read_cohort_scores("e c1 0.5\ne c2 -1\nf c1 2\n".as_bytes()).unwrap();
    assert_eq!(cohort["e"].len(), 2);
    let mut out = Vec::new();
    write_cohort_scores(&mut out, &cohort).unwrap();
    assert_eq!(read_cohort_scores(out.as_slice()).unwrap(), cohort);
}
