use crossfuse::autodiff::Tape;
use crossfuse::objective::{consistency_loss, cross_entropy};
use crossfuse::{compute_metrics, ConfusionMatrix, Rng, Tensor};
use proptest::prelude::*;

fn consistency(f1: &Tensor, f2: &Tensor, ff: &Tensor) -> f64 {
    let tape = Tape::new();
    let l = consistency_loss(tape.constant(f1.clone()), tape.constant(f2.clone()), tape.constant(ff.clone()), None).unwrap();
    l.value().item()
}

fn rand_feats(seed: u64) -> (Tensor, Tensor, Tensor) {
    let r = Rng::new(seed);
    (r.uniform("f1", &[5, 4], 2.0), r.uniform("f2", &[5, 4], 2.0), r.uniform("ff", &[5, 4], 2.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn consistency_is_scale_invariant(seed in 0u64..10_000, a in 0.01f64..100.0, b in 0.01f64..100.0, g in 0.01f64..100.0) {
        let (f1, f2, ff) = rand_feats(seed);
        let base = consistency(&f1, &f2, &ff);
        let scaled = consistency(&f1.map(|v| a * v), &f2.map(|v| b * v), &ff.map(|v| g * v));
        prop_assert!((base - scaled).abs() <= 1e-12, "{base} vs {scaled}");
    }

    #[test]
    fn consistency_lies_in_range(seed in 0u64..10_000) {
        let (f1, f2, ff) = rand_feats(seed);
        let l = consistency(&f1, &f2, &ff);
        prop_assert!((0.0..=4.0).contains(&l), "{l}");
    }

    #[test]
    fn cross_entropy_is_nonnegative(seed in 0u64..10_000, m in 2usize..6) {
        let r = Rng::new(seed);
        let logits = r.uniform("z", &[7, m], 10.0);
        let labels: Vec<usize> = r.uniform("y", &[7], 1.0).data().iter().map(|u| ((u + 1.0) * 0.5 * m as f64) as usize % m).collect();
        let mask = vec![true; 7];
        let tape = Tape::new();
        let ce = cross_entropy(tape.constant(logits), &labels, &mask).unwrap().value().item();
        prop_assert!(ce >= 0.0);
    }
}

#[test]
fn consistency_extremes() {
    let f = Tensor::new([2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.0]).unwrap();
    assert_eq!(consistency(&f, &f, &f), 0.0);
    let e1 = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
    let e2 = Tensor::new([1, 2], vec![0.0, 1.0]).unwrap();
    assert_eq!(consistency(&e1, &e1, &e2), 2.0);
    assert_eq!(consistency(&e1, &e1, &e1.map(|v| -v)), 4.0);
}

/// Random (truth, prediction, mask) triple drawn from `seed`.
fn triple(seed: u64, m: usize, len: usize) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let r = Rng::new(seed);
    let pick = |name: &str| -> Vec<usize> {
        r.uniform(name, &[len], 1.0).data().iter().map(|u| (((u + 1.0) * 0.5 * m as f64) as usize).min(m - 1)).collect()
    };
    let mask = r.uniform("mask", &[len], 1.0).data().iter().map(|&u| u < 0.6).collect();
    (pick("truth"), pick("pred"), mask)
}

#[test]
fn metrics_agree_with_brute_force_tally() {
    for seed in 0..100u64 {
        let m = 2 + (seed % 5) as usize;
        let (truth, pred, mask) = triple(seed, m, 150);
        let mut cm = ConfusionMatrix::new(m);
        cm.accumulate(&truth, &pred, &mask).unwrap();

        let mut counts = vec![vec![0u64; m]; m];
        for i in 0..truth.len() {
            if mask[i] {
                counts[truth[i]][pred[i]] += 1;
            }
        }
        assert_eq!(cm.rows(), counts, "seed {seed}");

        let total: u64 = counts.iter().flatten().sum();
        let correct: u64 = (0..m).map(|c| counts[c][c]).sum();
        let recalls: Vec<Option<f64>> = (0..m)
            .map(|c| {
                let row: u64 = counts[c].iter().sum();
                (row > 0).then(|| counts[c][c] as f64 / row as f64)
            })
            .collect();
        let present: Vec<f64> = recalls.iter().flatten().copied().collect();
        let aa = present.iter().sum::<f64>() / present.len() as f64;
        let po = correct as f64 / total as f64;
        let pe: f64 = (0..m)
            .map(|c| {
                let row: u64 = counts[c].iter().sum();
                let col: u64 = (0..m).map(|r| counts[r][c]).sum();
                row as f64 * col as f64
            })
            .sum::<f64>()
            / (total as f64 * total as f64);
        let kappa = (po - pe) / (1.0 - pe);

        let got = compute_metrics(&cm).unwrap();
        assert!((got.oa - po).abs() <= 1e-12);
        assert!((got.aa - aa).abs() <= 1e-12);
        assert!((got.kappa - kappa).abs() <= 1e-12);
        for (a, b) in got.per_class_recall.iter().zip(&recalls) {
            match (a, b) {
                (Some(x), Some(y)) => assert!((x - y).abs() <= 1e-12),
                (None, None) => {}
                _ => panic!("presence differs for seed {seed}"),
            }
        }
    }
}

#[test]
fn hand_fixture_metrics() {
    let cm = ConfusionMatrix::from_rows(&[vec![50, 10], vec![5, 35]]).unwrap();
    let m = compute_metrics(&cm).unwrap();
    assert_eq!(m.oa, 0.85);
    assert!((m.aa - 0.854167).abs() <= 1e-6);
    assert!((m.kappa - 0.693878).abs() <= 1e-6);
}
