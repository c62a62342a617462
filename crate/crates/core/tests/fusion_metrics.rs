use proptest::prelude::*;
use theftwatch::fusion::{apply_flag, calibrate_threshold, hybrid_score, FusionWeights, ScoreTriple};
use theftwatch::metrics::{evaluate, f1_score, pr_curve, roc_auc, roc_curve};

fn triple(g: f64, r: f64, s: f64) -> ScoreTriple {
    ScoreTriple::new(g, r, s, ("AL".into(), 0)).unwrap()
}

/// Scores on a 0.05 grid so ties occur and monotone maps stay injective.
fn scored(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    prop::collection::vec((0u32..=20, 0u8..=1), n)
        .prop_filter("both classes", |v| v.iter().any(|p| p.1 == 1) && v.iter().any(|p| p.1 == 0))
        .prop_map(|v| v.into_iter().map(|(k, l)| (k as f64 / 20.0, l)).unzip())
}

fn weights() -> impl Strategy<Value = FusionWeights> {
    (0.0f64..1.0, 0.0f64..1.0).prop_map(|(a, b)| {
        let alpha = a;
        let beta = (1.0 - a) * b;
        let gamma = 1.0 - alpha - beta;
        FusionWeights::new(alpha, beta, gamma.max(0.0)).unwrap()
    })
}

#[test]
fn weights_off_the_simplex_are_rejected() {
    assert!(FusionWeights::new(0.5, 0.5, 0.1).is_err());
    assert!(FusionWeights::new(1.2, -0.1, -0.1).is_err());
    assert!(FusionWeights::new(0.4, 0.4, 0.2).is_ok());
}

#[test]
fn out_of_range_scores_are_rejected() {
    assert!(ScoreTriple::new(1.01, 0.0, 0.0, ("AL".into(), 0)).is_err());
    assert!(ScoreTriple::new(0.0, -0.01, 0.0, ("AL".into(), 0)).is_err());
    assert!(ScoreTriple::new(0.0, 0.0, f64::NAN, ("AL".into(), 0)).is_err());
}

#[test]
fn calibration_needs_both_classes() {
    assert!(calibrate_threshold(&[0.1, 0.2], &[1, 1]).is_err());
    assert!(calibrate_threshold(&[0.1, 0.2], &[1]).is_err());
}

proptest! {
    #[test]
    fn hybrid_is_monotone_in_each_component(
        w in weights(),
        base in (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0),
        bump in 0.0f64..1.0,
        which in 0usize..3,
    ) {
        let (g, r, s) = base;
        let lo = hybrid_score(&triple(g, r, s), &w).unwrap();
        let up = |v: f64| v + (1.0 - v) * bump;
        let t = match which {
            0 => triple(up(g), r, s),
            1 => triple(g, up(r), s),
            _ => triple(g, r, up(s)),
        };
        let hi = hybrid_score(&t, &w).unwrap();
        prop_assert!(hi >= lo - 1e-15);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&hi));
    }

    #[test]
    fn zero_gamma_ignores_the_anomaly_score(a in 0.0f64..1.0, g in 0.0f64..1.0, r in 0.0f64..1.0, s1 in 0.0f64..1.0, s2 in 0.0f64..1.0) {
        let w = FusionWeights::new(a, 1.0 - a, 0.0).unwrap();
        prop_assert_eq!(hybrid_score(&triple(g, r, s1), &w).unwrap(), hybrid_score(&triple(g, r, s2), &w).unwrap());
    }

    #[test]
    fn calibration_ignores_record_order((scores, labels) in scored(40), rot in 0usize..40) {
        let t = calibrate_threshold(&scores, &labels).unwrap();
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.reverse();
        idx.rotate_left(rot % scores.len());
        let s2: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l2: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        let t2 = calibrate_threshold(&s2, &l2).unwrap();
        prop_assert_eq!(t, t2);
        let f1 = apply_flag(&scores, &t);
        let f2 = apply_flag(&s2, &t2);
        for (k, &i) in idx.iter().enumerate() {
            prop_assert_eq!(f1[i], f2[k]);
        }
    }

    #[test]
    fn calibrated_f1_matches_its_flags((scores, labels) in scored(30)) {
        let t = calibrate_threshold(&scores, &labels).unwrap();
        let b = evaluate("hybrid", &scores, &labels, t.tau).unwrap();
        let flags = apply_flag(&scores, &t);
        let recount = flags.iter().zip(&labels).filter(|(f, l)| **f == 1 && **l == 1).count();
        prop_assert_eq!(b.confusion.tp as usize, recount);
        prop_assert!((b.report.theft.f1 - t.f1).abs() < 1e-12);
        // no candidate threshold does better
        for &tau in scores.iter().chain([0.0, 1.0].iter()) {
            let other = evaluate("hybrid", &scores, &labels, tau).unwrap();
            prop_assert!(other.report.theft.f1 <= t.f1 + 1e-12);
        }
    }

    #[test]
    fn report_matches_a_direct_recount((scores, labels) in scored(50), thr in 0.0f64..1.0) {
        let b = evaluate("m", &scores, &labels, thr).unwrap();
        let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for (&s, &l) in scores.iter().zip(&labels) {
            match (s >= thr, l == 1) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let cm = b.confusion;
        prop_assert_eq!((cm.tp, cm.fp, cm.tn, cm.fn_), (tp, fp, tn, fn_));
        prop_assert_eq!(b.report.total, labels.len() as u64);
        prop_assert_eq!(b.report.theft.support + b.report.normal.support, labels.len() as u64);
        prop_assert!((b.report.accuracy - (tp + tn) as f64 / labels.len() as f64).abs() < 1e-15);
        if tp > 0 {
            prop_assert!((b.report.theft.precision - tp as f64 / (tp + fp) as f64).abs() < 1e-15);
            prop_assert!((b.report.normal.recall - tn as f64 / (tn + fp) as f64).abs() < 1e-15);
        }
    }

    #[test]
    fn auc_survives_monotone_transforms((scores, labels) in scored(40)) {
        let a = roc_auc(&scores, &labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(a, roc_auc(&warped, &labels).unwrap());
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((roc_auc(&flipped, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
        let pr = pr_curve(&scores, &labels).unwrap();
        prop_assert_eq!(pr.auprc, pr_curve(&warped, &labels).unwrap().auprc);
    }

    #[test]
    fn f1_sits_between_precision_and_recall(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
        let f = f1_score(p, r);
        prop_assert!(f <= 2.0 * p.min(r) + 1e-15);
        prop_assert!(f >= p.min(r) - 1e-15 && f <= p.max(r) + 1e-15);
    }

    #[test]
    fn curves_are_well_formed((scores, labels) in scored(40)) {
        let roc = roc_curve(&scores, &labels).unwrap();
        prop_assert_eq!((roc[0].x, roc[0].y), (0.0, 0.0));
        let last = roc.last().unwrap();
        prop_assert_eq!((last.x, last.y), (1.0, 1.0));
        prop_assert!(roc.windows(2).all(|w| w[1].x >= w[0].x && w[1].y >= w[0].y));
        let pr = pr_curve(&scores, &labels).unwrap();
        prop_assert!(pr.points.windows(2).all(|w| w[1].x >= w[0].x));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&pr.auprc));
        prop_assert_eq!(pr.points.last().unwrap().x, 1.0);
    }
}
