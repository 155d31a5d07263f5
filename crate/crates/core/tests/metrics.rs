use agcm_core::metrics::{
    adaptive_f_measure, e_measure, evaluate, f_measure, f_measure_with, mae, s_measure, CorpusReport,
};
use agcm_core::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn map(h: usize, w: usize, v: Vec<f64>) -> Tensor {
    Tensor::new(&[1, h, w], v).unwrap()
}

fn random_pair(h: usize, w: usize, seed: u64) -> (Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = (0..h * w).map(|_| rng.gen_range(0.0..=1.0)).collect();
    let mut gt: Vec<f64> = (0..h * w).map(|_| f64::from(u8::from(rng.gen_bool(0.4)))).collect();
    gt[rng.gen_range(0..h * w)] = 1.0;
    (map(h, w, pred), map(h, w, gt))
}

fn max_f_loops(pred: &[f64], gt: &[f64], n: usize) -> f64 {
    let positives: f64 = gt.iter().sum();
    let mut best = 0.0f64;
    for i in 1..=n {
        let t = i as f64 / n as f64;
        let (mut tp, mut fp) = (0.0, 0.0);
        for (&p, &g) in pred.iter().zip(gt) {
            if p >= t {
                if g == 1.0 {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let recall = tp / positives;
        let f = if precision + recall == 0.0 {
            0.0
        } else {
            1.3 * precision * recall / (0.3 * precision + recall)
        };
        best = best.max(f);
    }
    best
}

fn e_measure_loops(pred: &[f64], gt: &[f64]) -> f64 {
    let n = pred.len() as f64;
    let t = (2.0 * pred.iter().sum::<f64>() / n).min(1.0);
    let fm: Vec<f64> = pred.iter().map(|&p| if p >= t { 1.0 } else { 0.0 }).collect();
    let (mf, mg) = (fm.iter().sum::<f64>() / n, gt.iter().sum::<f64>() / n);
    let mut total = 0.0;
    for i in 0..pred.len() {
        let (a, b) = (fm[i] - mf, gt[i] - mg);
        let xi = 2.0 * a * b / (a * a + b * b + f64::EPSILON);
        total += (1.0 + xi).powi(2) / 4.0;
    }
    total / n
}

#[test]
fn max_f_and_e_measure_match_loops() {
    for seed in 0..40 {
        let (pred, gt) = random_pair(7, 9, seed);
        let f = f_measure(&pred, &gt).unwrap();
        assert!(!f.degenerate);
        assert!((f.value - max_f_loops(pred.data(), gt.data(), 255)).abs() < 1e-12);
        let e = e_measure(&pred, &gt).unwrap();
        assert!((e - e_measure_loops(pred.data(), gt.data())).abs() < 1e-12);
        let m: f64 = pred.data().iter().zip(gt.data()).map(|(p, g)| (p - g).abs()).sum::<f64>() / 63.0;
        assert!((mae(&pred, &gt).unwrap() - m).abs() < 1e-15);
    }
}

#[test]
fn exact_thresholds_count_as_foreground() {
    // 0.2 = 51/255 sits on a threshold; predicted foreground at that level
    let pred = map(1, 2, vec![51.0 / 255.0, 0.0]);
    let gt = map(1, 2, vec![1.0, 0.0]);
    assert_eq!(f_measure(&pred, &gt).unwrap().value, 1.0);
}

#[test]
fn perfect_prediction_identities() {
    for seed in 0..10 {
        let (_, gt) = random_pair(8, 8, seed);
        let r = evaluate(&gt, &gt).unwrap();
        assert!((r.f_beta - 1.0).abs() < 1e-6);
        assert!(r.mae.abs() < 1e-6);
        assert!((r.e_measure - 1.0).abs() < 1e-6);
        assert!((r.s_measure - 1.0).abs() < 1e-6);
    }
}

#[test]
fn frozen_arithmetic_cases() {
    let half = map(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
    let ones = Tensor::ones(&[1, 2, 2]);
    let f = f_measure(&ones, &half).unwrap().value;
    assert!((f - 0.565_217_391_304_347_8).abs() < 1e-6);
    assert!((f - 0.5652).abs() < 1e-4);
    let grey = Tensor::full(&[1, 2, 2], 0.5);
    assert_eq!(mae(&grey, &half).unwrap(), 0.5);
    // threshold min(2·0.5, 1) = 1 leaves nothing foreground, so every term is 1/4
    assert!((e_measure(&grey, &half).unwrap() - 0.25).abs() < 1e-12);
    // object term 2·0.5/(0.25 + 1) = 0.8, every region block scores 1
    assert!((s_measure(&grey, &half).unwrap() - 0.9).abs() < 1e-12);
    let a = adaptive_f_measure(&ones, &half).unwrap().value;
    assert!((a - f).abs() < 1e-12);
}

#[test]
fn empty_foreground_is_flagged() {
    let gt = Tensor::zeros(&[1, 3, 3]);
    let pred = Tensor::full(&[1, 3, 3], 0.25);
    let f = f_measure(&pred, &gt).unwrap();
    assert!(f.degenerate);
    assert_eq!(f.value, 0.0);
    assert!((s_measure(&pred, &gt).unwrap() - 0.75).abs() < 1e-12);
    assert!((s_measure(&Tensor::zeros(&[1, 3, 3]), &gt).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn invalid_inputs_are_rejected() {
    let gt = map(1, 2, vec![1.0, 0.0]);
    assert!(f_measure(&map(1, 2, vec![1.5, 0.0]), &gt).is_err());
    assert!(f_measure(&map(1, 2, vec![0.5, 0.0]), &map(1, 2, vec![0.5, 0.0])).is_err());
    assert!(mae(&Tensor::zeros(&[1, 2, 1]), &gt).is_err());
    assert!(f_measure_with(&gt, &gt, 0).is_err());
}

#[test]
fn corpus_mean_row_is_the_column_mean() {
    let pairs: Vec<_> = (0..6).map(|s| random_pair(5, 6, s)).collect();
    let report = CorpusReport::evaluate(pairs.iter().enumerate().map(|(i, (p, g))| (format!("{i:04}"), p, g))).unwrap();
    let csv = report.to_csv();
    let rows: Vec<Vec<String>> = csv.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    assert_eq!(rows.len(), 7);
    assert_eq!(rows[6][0], "mean");
    for col in 1..5 {
        let values: Vec<f64> = rows[..6].iter().map(|r| r[col].parse().unwrap()).collect();
        let mean = values.iter().sum::<f64>() / 6.0;
        let reported: f64 = rows[6][col].parse().unwrap();
        assert!((mean - reported).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn measures_lie_in_unit_interval(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let (pred, gt) = random_pair(h, w, seed);
        let r = evaluate(&pred, &gt).unwrap();
        for v in [r.f_beta, r.mae, r.e_measure, r.s_measure] {
            prop_assert!((0.0..=1.0).contains(&v), "{r:?}");
        }
    }

    #[test]
    fn refining_thresholds_never_lowers_max_f(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
        let (pred, gt) = random_pair(h, w, seed);
        let coarse = f_measure_with(&pred, &gt, 255).unwrap().value;
        let fine = f_measure_with(&pred, &gt, 510).unwrap().value;
        prop_assert!(fine >= coarse);
    }

    #[test]
    fn mae_obeys_triangle_inequality(n in 1usize..30, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || map(1, n, (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect());
        let (a, b, c) = (draw(), draw(), draw());
        let (ab, bc, ac) = (mae(&a, &b).unwrap(), mae(&b, &c).unwrap(), mae(&a, &c).unwrap());
        prop_assert!(ac <= ab + bc + 1e-15);
        prop_assert_eq!(ab, mae(&b, &a).unwrap());
    }
}
