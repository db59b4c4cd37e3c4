use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xens_core::evaluation::{mean_ppv, student_t_sf};
use xens_core::{
    aggregate_folds, classification_metrics, confusion_matrix, format_mean_std, pooled_t_test, ppv_true_class,
    EvalReport, Tensor,
};

/// Brute-force metrics straight from the prediction lists. MCC uses the
/// covariance form over one-hot indicator vectors.
struct Oracle {
    precision: Vec<f64>,
    recall: Vec<f64>,
    f1: Vec<f64>,
    accuracy: f64,
    mcc: f64,
}

fn oracle(pred: &[usize], truth: &[usize], k: usize) -> Oracle {
    let n = pred.len() as f64;
    let safe = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let mut f1 = Vec::new();
    for c in 0..k {
        let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count() as f64;
        let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
        let actual = truth.iter().filter(|&&t| t == c).count() as f64;
        let (p, r) = (safe(tp, predicted), safe(tp, actual));
        precision.push(p);
        recall.push(r);
        f1.push(safe(2.0 * p * r, p + r));
    }
    let accuracy = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / n;
    let onehot = |v: &[usize]| -> Vec<Vec<f64>> {
        v.iter().map(|&c| (0..k).map(|j| f64::from(u8::from(j == c))).collect()).collect()
    };
    let (x, y) = (onehot(pred), onehot(truth));
    let cov = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> f64 {
        (0..k)
            .map(|j| {
                let ma = a.iter().map(|r| r[j]).sum::<f64>() / n;
                let mb = b.iter().map(|r| r[j]).sum::<f64>() / n;
                a.iter().zip(b).map(|(ra, rb)| (ra[j] - ma) * (rb[j] - mb)).sum::<f64>() / n
            })
            .sum()
    };
    let den = (cov(&x, &x) * cov(&y, &y)).sqrt();
    Oracle {
        precision,
        recall,
        f1,
        accuracy,
        mcc: safe(cov(&x, &y), den),
    }
}

#[test]
fn metrics_match_brute_force_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for trial in 0..1000 {
        let n = rng.gen_range(1..200);
        let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
        // mix of accurate and random predictors, including degenerate ones
        let skill: f64 = rng.gen();
        let constant = trial % 17 == 0;
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if constant { 1 } else if rng.gen::<f64>() < skill { t } else { rng.gen_range(0..3) })
            .collect();
        let m = classification_metrics(&confusion_matrix(&pred, &truth, 3).unwrap()).unwrap();
        let o = oracle(&pred, &truth, 3);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
        for c in 0..3 {
            assert!(close(m.per_class[c].precision, o.precision[c]), "trial {trial} precision {c}");
            assert!(close(m.per_class[c].recall, o.recall[c]), "trial {trial} recall {c}");
            assert!(close(m.per_class[c].f1, o.f1[c]), "trial {trial} f1 {c}");
        }
        assert!(close(m.accuracy, o.accuracy), "trial {trial} accuracy");
        assert!(close(m.mcc, o.mcc), "trial {trial} mcc {} vs {}", m.mcc, o.mcc);
    }
}

#[test]
fn diagonal_and_single_column_matrices() {
    let m = classification_metrics(&vec![vec![5, 0, 0], vec![0, 7, 0], vec![0, 0, 2]]).unwrap();
    assert_eq!(m.accuracy, 1.0);
    assert_eq!(m.mcc, 1.0);
    assert!(m.per_class.iter().all(|c| c.precision == 1.0 && c.recall == 1.0 && c.f1 == 1.0));

    let m = classification_metrics(&vec![vec![0, 5, 0], vec![0, 7, 0], vec![0, 2, 0]]).unwrap();
    assert_eq!(m.mcc, 0.0);
    assert_eq!(m.per_class[0].precision, 0.0);
}

#[test]
fn confusion_matrix_is_true_by_predicted() {
    let cm = confusion_matrix(&[0, 2, 2, 1], &[0, 1, 2, 1], 3).unwrap();
    assert_eq!(cm, vec![vec![1, 0, 0], vec![0, 1, 1], vec![0, 0, 1]]);
    assert!(confusion_matrix(&[3], &[0], 3).is_err());
    assert!(confusion_matrix(&[0, 1], &[0], 3).is_err());
}

/// `P(T >= t)` with `t = √ν tan θ`: the density becomes `cos^(ν-1) θ`, so
/// the tail is a ratio of two Simpson integrals over θ.
fn quadrature_sf(t: f64, df: f64) -> f64 {
    let simpson = |a: f64, b: f64| {
        let n = 20_000;
        let h = (b - a) / n as f64;
        let f = |th: f64| th.cos().max(0.0).powf(df - 1.0);
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    };
    let half = std::f64::consts::FRAC_PI_2;
    simpson((t / df.sqrt()).atan(), half) / simpson(-half, half)
}

#[test]
fn t_tail_matches_quadrature() {
    for df in [1.0, 2.0, 3.0, 5.0, 10.0, 30.0, 120.0, 1200.0] {
        for t in [-3.0, -1.0, -0.2, 0.0, 0.4, 1.0, 1.684, 2.5, 4.442, 8.0] {
            let q = quadrature_sf(t, df);
            let s = student_t_sf(t, df);
            assert!((q - s).abs() <= 1e-8, "df {df} t {t}: {s} vs {q}");
        }
    }
    assert_eq!(student_t_sf(f64::INFINITY, 10.0), 0.0);
    assert_eq!(student_t_sf(f64::NEG_INFINITY, 10.0), 1.0);
}

#[test]
fn t_statistic_matches_hand_formula() {
    let a = [0.9, 0.95, 0.99, 0.7, 1.0, 0.85];
    let b = [0.6, 0.8, 0.75, 0.9, 0.5];
    let r = pooled_t_test(&a, &b).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ss = |v: &[f64]| v.iter().map(|x| (x - mean(v)).powi(2)).sum::<f64>();
    let sp = ((ss(&a) + ss(&b)) / 9.0).sqrt();
    let t = (mean(&a) - mean(&b)) / (sp * (1.0 / 6.0 + 1.0 / 5.0f64).sqrt());
    assert!((r.t - t).abs() < 1e-12);
    assert_eq!(r.df, 9);
    assert!((r.p - quadrature_sf(t, 9.0)).abs() < 1e-8);
}

#[test]
fn t_test_degenerate_cases() {
    let r = pooled_t_test(&[0.5, 0.5, 0.5], &[0.5, 0.5]).unwrap();
    assert_eq!((r.t, r.p), (0.0, 0.5));
    let r = pooled_t_test(&[0.9, 0.9], &[0.5, 0.5]).unwrap();
    assert_eq!(r.t, f64::INFINITY);
    assert_eq!(r.p, 0.0);
    assert!(pooled_t_test(&[0.9], &[0.5, 0.4]).is_err());
}

#[test]
fn ppv_reads_true_class_probability() {
    let probs = Tensor::from_vec(&[2, 3], vec![0.2f64, 0.5, 0.3, 0.1, 0.1, 0.8]).unwrap();
    assert_eq!(ppv_true_class(&probs, &[1, 0]).unwrap(), vec![0.5, 0.1]);
    let bad = Tensor::from_vec(&[1, 3], vec![0.2f64, 0.2, 0.2]).unwrap();
    assert!(ppv_true_class(&bad, &[0]).is_err());
}

fn report(model: &str, probs: &[f64], labels: Vec<usize>) -> EvalReport {
    let n = labels.len();
    let names: Vec<String> = ["normal", "pneumonia", "covid19"].iter().map(|s| s.to_string()).collect();
    let ids = (0..n).map(|i| format!("s/{i}")).collect();
    let probs = Tensor::from_vec(&[n, 3], probs.to_vec()).unwrap();
    EvalReport::from_probabilities(model, "test", &names, ids, labels, &probs).unwrap()
}

#[test]
fn report_round_trip_and_fold_aggregation() {
    let tmp = tempfile::tempdir().unwrap();
    let r1 = report("E_abc", &[0.7, 0.2, 0.1, 0.1, 0.8, 0.1, 0.3, 0.3, 0.4, 0.5, 0.4, 0.1], vec![0, 1, 2, 1]);
    let mut r2 = report("E_abc", &[0.6, 0.3, 0.1, 0.2, 0.7, 0.1, 0.1, 0.1, 0.8, 0.2, 0.6, 0.2], vec![0, 1, 2, 1]);
    r2.provenance.insert("fold".into(), "1".into());
    r2.write(tmp.path()).unwrap();
    assert_eq!(EvalReport::read(tmp.path()).unwrap(), r2);

    let agg = aggregate_folds(&[r1.clone(), r2.clone()]).unwrap();
    let acc = agg.get("accuracy").unwrap();
    assert!((acc.mean - 0.875).abs() < 1e-12);
    assert!((acc.std - ((0.125f64 * 0.125 * 2.0) / 1.0).sqrt()).abs() < 1e-12);
    assert_eq!(aggregate_folds(&[r1.clone()]).unwrap().get("accuracy").unwrap().std, 0.0);

    let ppv = mean_ppv(&[r1, r2]).unwrap();
    let expect = [0.65, 0.75, 0.6, 0.5];
    for (a, b) in ppv.iter().zip(expect) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mean_std_formatting() {
    assert_eq!(format_mean_std(0.939, 0.01), "0.939±.01");
    assert_eq!(format_mean_std(0.898, 0.18), "0.898±.18");
    assert_eq!(format_mean_std(1.0, 0.0), "1.000");
    assert_eq!(format_mean_std(0.5, 0.0049), "0.500±.005");
}

proptest! {
    #[test]
    fn t_test_is_antisymmetric(
        a in prop::collection::vec(0.0f64..1.0, 2..30),
        b in prop::collection::vec(0.0f64..1.0, 2..30),
    ) {
        let ab = pooled_t_test(&a, &b).unwrap();
        let ba = pooled_t_test(&b, &a).unwrap();
        prop_assert!((ab.t + ba.t).abs() < 1e-9);
        prop_assert!((ab.p + ba.p - 1.0).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&ab.p));
    }
}
