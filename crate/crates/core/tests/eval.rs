use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stdfnc::eval::{classification_metrics, confusion_counts, mean_scores_by_group, paired_ttest, ConfusionCounts, MetricsRecord};
use stdfnc::Error;

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Metrics straight from per-subject label/prediction lists.
fn brute_force(labels: &[u8], preds: &[u8]) -> [f64; 5] {
    let n = labels.len() as f64;
    let hits = labels.iter().zip(preds).filter(|(y, p)| y == p).count() as f64;
    let pred_pos: Vec<usize> = (0..labels.len()).filter(|&i| preds[i] == 1).collect();
    let real_pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let real_neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    let frac = |set: &[usize], want_pred: u8| {
        if set.is_empty() {
            0.0
        } else {
            set.iter().filter(|&&i| preds[i] == want_pred).count() as f64 / set.len() as f64
        }
    };
    let precision = if pred_pos.is_empty() { 0.0 } else { pred_pos.iter().filter(|&&i| labels[i] == 1).count() as f64 / pred_pos.len() as f64 };
    let sens = frac(&real_pos, 1);
    let spec = frac(&real_neg, 0);
    let f1 = if precision + sens == 0.0 { 0.0 } else { 2.0 / (1.0 / precision + 1.0 / sens) };
    [round2(100.0 * hits / n), round2(100.0 * f1), round2(100.0 * precision), round2(100.0 * spec), round2(100.0 * sens)]
}

#[test]
fn confusion_examples() {
    assert_eq!(confusion_counts(&[1, 0], &[1, 0]).unwrap(), ConfusionCounts { tp: 1, fp: 0, tn: 1, fn_: 0 });
    let labels: Vec<u8> = (0..362).map(|i| u8::from(i >= 303)).collect();
    let c = confusion_counts(&labels, &vec![0; 362]).unwrap();
    assert_eq!((c.tn, c.fn_, c.tp, c.fp), (303, 59, 0, 0));
    assert!(confusion_counts(&[1, 0], &[1]).is_err());
    assert!(confusion_counts(&[2], &[1]).is_err());

    let mut r = ChaCha8Rng::seed_from_u64(50);
    let labels: Vec<u8> = (0..50).map(|_| r.random_range(0..2)).collect();
    let preds: Vec<u8> = (0..50).map(|_| r.random_range(0..2)).collect();
    let c = confusion_counts(&labels, &preds).unwrap();
    let mut want = [0usize; 4];
    for i in 0..50 {
        want[(labels[i] * 2 + preds[i]) as usize] += 1;
    }
    assert_eq!([c.tn, c.fp, c.fn_, c.tp], want);
}

#[test]
fn metric_examples() {
    let labels: Vec<u8> = (0..362).map(|i| u8::from(i >= 303)).collect();
    let m = classification_metrics(&confusion_counts(&labels, &vec![0; 362]).unwrap()).unwrap();
    assert_eq!(m, MetricsRecord { accuracy: 83.70, f1: 0.0, precision: 0.0, specificity: 100.0, sensitivity: 0.0 });
    let perfect = classification_metrics(&ConfusionCounts { tp: 4, fp: 0, tn: 6, fn_: 0 }).unwrap();
    assert_eq!(perfect.columns(), [100.0; 5]);
    let m = classification_metrics(&ConfusionCounts { tp: 3, fp: 1, tn: 4, fn_: 2 }).unwrap();
    assert_eq!(m.columns(), [70.0, 66.67, 75.0, 80.0, 60.0]);
    assert!((m.balanced_accuracy() - 0.7).abs() < 1e-15);
    assert!(classification_metrics(&ConfusionCounts::default()).is_err());
}

#[test]
fn thousand_random_tables_match_brute_force() {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let n = r.random_range(1..80);
        let p_pos = r.random_range(0.0..1.0);
        let p_hit = r.random_range(0.0..1.0);
        let labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(p_pos))).collect();
        let preds: Vec<u8> = labels.iter().map(|&y| if r.random_bool(p_hit) { y } else { 1 - y }).collect();
        let c = confusion_counts(&labels, &preds).unwrap();
        let m = classification_metrics(&c).unwrap();
        assert_eq!(m.columns(), brute_force(&labels, &preds), "{c:?}");
        assert!(m.columns().iter().all(|v| (0.0..=100.0).contains(v)));
        let identity = (m.sensitivity * c.positives() as f64 + m.specificity * c.negatives() as f64) / c.total() as f64;
        assert!((m.accuracy - identity).abs() <= 0.01 + 1e-9);
    }
}

/// Two-sided tail of Student's t by Simpson quadrature. With x = sqrt(nu) tan(theta)
/// the density becomes proportional to cos^(nu-1)(theta) on (-pi/2, pi/2).
fn t_tail_quadrature(t: f64, nu: f64) -> f64 {
    let f = |th: f64| th.cos().powf(nu - 1.0);
    let simpson = |a: f64, b: f64| {
        let n = 200_000;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
        }
        s * h / 3.0
    };
    let half = std::f64::consts::FRAC_PI_2;
    let theta0 = (t.abs() / nu.sqrt()).atan();
    simpson(theta0, half) / simpson(0.0, half)
}

fn paired_t_direct(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let sd = (d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt();
    mean / (sd / n.sqrt())
}

#[test]
fn ttest_matches_quadrature() {
    let a = [3.1, 2.9, 3.3, 2.7, 3.0];
    let b = [2.0; 5];
    let r = paired_ttest(&a, &b).unwrap();
    assert_eq!(r.df, 4);
    assert!((r.t - paired_t_direct(&a, &b)).abs() < 1e-12);
    assert!((r.p - t_tail_quadrature(r.t, 4.0)).abs() < 1e-6);

    let mut rng = ChaCha8Rng::seed_from_u64(20);
    for _ in 0..20 {
        let a: Vec<f64> = (0..5).map(|_| rng.random_range(60.0..100.0)).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.random_range(60.0..100.0)).collect();
        let r = paired_ttest(&a, &b).unwrap();
        assert!((r.t - paired_t_direct(&a, &b)).abs() < 1e-9);
        assert!((r.p - t_tail_quadrature(r.t, 4.0)).abs() < 1e-6, "t = {}", r.t);
    }
}

#[test]
fn ttest_degenerate_cases() {
    let a = [80.0, 75.5, 90.0];
    let r = paired_ttest(&a, &a).unwrap();
    assert_eq!((r.t, r.p), (0.0, 1.0));
    let b: Vec<f64> = a.iter().map(|v| v - 1.0).collect();
    let a5 = [1.0, 2.0, 3.0, 4.0, 5.0];
    let b5: Vec<f64> = a5.iter().map(|v| v - 1.0).collect();
    let r = paired_ttest(&a5, &b5).unwrap();
    assert!(r.zero_variance);
    assert_eq!(r.p, 0.0);
    assert_eq!(r.t, f64::INFINITY);
    assert_eq!(paired_ttest(&b, &a).unwrap().t, f64::NEG_INFINITY);
    assert!(paired_ttest(&[1.0], &[2.0]).is_err());
    assert!(paired_ttest(&[1.0, 2.0], &[2.0]).is_err());
}

proptest! {
    #[test]
    fn ttest_antisymmetric_with_valid_p(a in prop::collection::vec(0.0f64..100.0, 2..10), seed in 0u64..1000) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| r.random_range(0.0..100.0)).collect();
        let ab = paired_ttest(&a, &b).unwrap();
        let ba = paired_ttest(&b, &a).unwrap();
        prop_assert_eq!(ab.t, -ba.t);
        prop_assert_eq!(ab.p, ba.p);
        prop_assert!((0.0..=1.0).contains(&ab.p));
    }
}

#[test]
fn group_means() {
    let r = mean_scores_by_group(&[0.2, 0.9, 0.4], &["CN", "AD", "Asym"], &["CN", "Asym", "AD"]).unwrap();
    let names: Vec<&str> = r.groups.iter().map(|g| g.name.as_str()).collect();
    assert_eq!(names, ["CN", "Asym", "AD"]);
    assert_eq!(r.get("Asym").unwrap().mean_score, 0.4);
    let r = mean_scores_by_group(&[0.5; 6], &["a", "b", "a", "b", "c", "c"], &["a", "b", "c"]).unwrap();
    assert!(r.groups.iter().all(|g| g.mean_score == 0.5 && g.size == 2));
    match mean_scores_by_group(&[0.5], &["a"], &["a", "MCI"]) {
        Err(Error::EmptyGroup(name)) => assert_eq!(name, "MCI"),
        other => panic!("unexpected {other:?}"),
    }
}
