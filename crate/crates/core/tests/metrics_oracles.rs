use gridcascade::metrics::{balanced_accuracy, best_f1_threshold, f1, pr_auc, r2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean over positives of the precision among all items scored at least as high.
fn brute_ap(scores: &[f64], labels: &[bool]) -> f64 {
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    let mut total = 0.0;
    for &i in &positives {
        let above: Vec<usize> = (0..scores.len()).filter(|&j| scores[j] >= scores[i]).collect();
        let hits = above.iter().filter(|&&j| labels[j]).count();
        total += hits as f64 / above.len() as f64;
    }
    total / positives.len() as f64
}

fn brute_f1(scores: &[f64], labels: &[bool], t: f64) -> f64 {
    let pred: Vec<bool> = scores.iter().map(|&s| s >= t).collect();
    let tp = pred.iter().zip(labels).filter(|(p, y)| **p && **y).count() as f64;
    let pp = pred.iter().filter(|&&p| p).count() as f64;
    let ap = labels.iter().filter(|&&y| y).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let (precision, recall) = (tp / pp, tp / ap);
    2.0 * precision * recall / (precision + recall)
}

fn brute_balanced(scores: &[f64], labels: &[bool], t: f64) -> f64 {
    let rate = |class: bool| {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.is_empty() {
            return 1.0;
        }
        members.iter().filter(|&&i| (scores[i] >= t) == class).count() as f64 / members.len() as f64
    };
    (rate(true) + rate(false)) / 2.0
}

fn brute_r2(pred: &[f64], actual: &[f64]) -> f64 {
    let n = actual.len() as f64;
    let mean_sq = actual.iter().map(|y| y * y).sum::<f64>() / n;
    let mean = actual.iter().sum::<f64>() / n;
    let var = mean_sq - mean * mean;
    let mse = pred.iter().zip(actual).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n;
    1.0 - mse / var
}

fn instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(5..200);
    let prevalence: f64 = rng.gen_range(0.05..0.6);
    let coarse = rng.gen_bool(0.5);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(prevalence)).collect();
    labels[0] = true;
    let scores = labels
        .iter()
        .map(|&y| {
            let s = if y { rng.gen_range(0.2..1.0) } else { rng.gen_range(0.0..0.8) };
            // coarse scores force many ties
            if coarse {
                (s * 10.0f64).round() / 10.0
            } else {
                s
            }
        })
        .collect();
    (scores, labels)
}

#[test]
fn metrics_match_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let (s, y) = instance(&mut rng);
        assert!((pr_auc(&s, &y) - brute_ap(&s, &y)).abs() < 1e-9);
        for t in [0.1, 0.35, 0.5, 0.9] {
            assert!((f1(&s, &y, t) - brute_f1(&s, &y, t)).abs() < 1e-9);
            assert!((balanced_accuracy(&s, &y, t) - brute_balanced(&s, &y, t)).abs() < 1e-9);
        }
        let actual: Vec<f64> = s.iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
        assert!((r2(&s, &actual) - brute_r2(&s, &actual)).abs() < 1e-9);
    }
}

#[test]
fn ap_is_invariant_under_monotone_transforms() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let (s, y) = instance(&mut rng);
        let base = pr_auc(&s, &y);
        let squashed: Vec<f64> = s.iter().map(|v| 1.0 / (1.0 + (-3.0 * v).exp())).collect();
        let cubed: Vec<f64> = s.iter().map(|v| v.powi(3) + 7.0).collect();
        assert!((pr_auc(&squashed, &y) - base).abs() < 1e-12);
        assert!((pr_auc(&cubed, &y) - base).abs() < 1e-12);
    }
}

#[test]
fn random_scores_give_prevalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = 0.1;
    let labels: Vec<bool> = (0..100_000).map(|_| rng.gen_bool(p)).collect();
    let scores: Vec<f64> = (0..100_000).map(|_| rng.gen()).collect();
    assert!((pr_auc(&scores, &labels) - p).abs() < 0.02);
}

#[test]
fn best_threshold_beats_every_grid_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let (s, y) = instance(&mut rng);
        let (_, best) = best_f1_threshold(&s, &y);
        for t in 1..20 {
            assert!(best + 1e-12 >= f1(&s, &y, t as f64 * 0.05));
        }
    }
}
