use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spinterp::report::{aggregate_report, features_csv, parse_features_csv, report_from_features, SequenceFeatures, SequenceMetrics};
use spinterp::interp::Method;
use spinterp::stats::{nonlinearity, signed_ranks, smoothness, wilcoxon_exact, wilcoxon_normal, wilcoxon_one_sided};
use spinterp::timbre::{feature_names, NUM_FEATURES};

/// Fraction of the `2^n` sign assignments whose positive-rank sum does not
/// exceed the observed one.
fn brute_force_p(differences: &[f64]) -> f64 {
    let sr = signed_ranks(differences);
    let n = sr.n;
    let mut hits = 0u64;
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| sr.ranks[i]).sum();
        if w <= sr.w_plus + 1e-9 {
            hits += 1;
        }
    }
    hits as f64 / (1u64 << n) as f64
}

#[test]
fn exact_wilcoxon_matches_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..100 {
        let n = 1 + trial % 12;
        let shift = rng.random_range(-1.0..1.0);
        let ties = trial % 3 == 0;
        let d: Vec<f64> = (0..n)
            .map(|_| {
                let x: f64 = rng.random_range(-2.0..2.0) + shift;
                if ties {
                    (x * 2.0).round() / 2.0
                } else {
                    x
                }
            })
            .collect();
        if d.iter().all(|&x| x == 0.0) {
            continue;
        }
        let exact = wilcoxon_exact(&d).unwrap();
        let brute = brute_force_p(&d);
        assert!((exact - brute).abs() < 1e-12, "trial {trial}: {exact} vs {brute} for {d:?}");
    }
}

#[test]
fn symmetric_differences_give_no_evidence() {
    let d = [-1.0, 1.0, -1.0, 1.0, -1.0, 1.0];
    let p = wilcoxon_exact(&d).unwrap();
    assert!((p - brute_force_p(&d)).abs() < 1e-12);
    assert!(p > 0.4 && p < 0.7, "{p}");
}

#[test]
fn normal_approximation_is_close_at_twenty() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..20 {
        let shift = 0.1 * trial as f64 - 1.0;
        let d: Vec<f64> = (0..20).map(|_| rng.random_range(-1.5..1.5) + shift).collect();
        let (e, a) = (wilcoxon_exact(&d).unwrap(), wilcoxon_normal(&d).unwrap());
        assert!((e - a).abs() < 0.01, "trial {trial}: exact {e} normal {a}");
    }
    let d: Vec<f64> = (0..25).map(|i| -(i as f64) - 1.0).collect();
    assert!(wilcoxon_one_sided(&d).unwrap() < 1e-5);
}

#[test]
fn metric_oracles() {
    let alt: Vec<f64> = (0..9).map(|t| (t % 2) as f64).collect();
    let quad: Vec<f64> = (0..9).map(|t| (t * t) as f64).collect();
    assert!((smoothness(&alt).unwrap() - 2.0).abs() <= 1e-9);
    assert!((smoothness(&quad).unwrap() - 2.0).abs() <= 1e-9);
    assert!((nonlinearity(&quad).unwrap() - (1092.0f64 / 9.0).sqrt()).abs() <= 1e-9);
    let mut bump = vec![0.0; 9];
    bump[4] = 1.0;
    assert!((nonlinearity(&bump).unwrap() - (1.0f64 / 9.0).sqrt()).abs() <= 1e-9);
    let affine: Vec<f64> = (0..9).map(|t| 1.5 - 0.25 * t as f64).collect();
    assert_eq!(smoothness(&affine).unwrap(), 0.0);
    assert_eq!(nonlinearity(&affine).unwrap(), 0.0);
}

fn random_metrics(rng: &mut ChaCha8Rng, pairs: usize) -> Vec<SequenceMetrics> {
    (0..pairs)
        .map(|_| SequenceMetrics {
            smoothness: (0..NUM_FEATURES).map(|_| rng.random_range(0.1..2.0)).collect(),
            nonlinearity: (0..NUM_FEATURES).map(|_| rng.random_range(0.1..2.0)).collect(),
        })
        .collect()
}

#[test]
fn identical_methods_give_an_empty_report() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let reference = random_metrics(&mut rng, 30);
    let r = aggregate_report(&feature_names(), &reference, &reference).unwrap();
    assert_eq!(r.smoothness.len(), 24);
    assert_eq!(r.smoothness_summary.improved, 0);
    assert_eq!(r.nonlinearity_summary.improved, 0);
    assert_eq!(r.smoothness_summary.average_variation_pct, 0.0);
    assert_eq!(r.nonlinearity_summary.average_variation_pct, 0.0);
}

#[test]
fn halved_candidate_improves_everything() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let reference = random_metrics(&mut rng, 30);
    let half: Vec<SequenceMetrics> = reference
        .iter()
        .map(|m| SequenceMetrics {
            smoothness: m.smoothness.iter().map(|x| 0.5 * x).collect(),
            nonlinearity: m.nonlinearity.iter().map(|x| 0.5 * x).collect(),
        })
        .collect();
    let r = aggregate_report(&feature_names(), &half, &reference).unwrap();
    assert!((r.smoothness_summary.average_variation_pct + 50.0).abs() < 1e-9);
    assert!((r.nonlinearity_summary.average_variation_pct + 50.0).abs() < 1e-9);
    assert_eq!(r.smoothness_summary.improved, 24);
    assert_eq!(r.nonlinearity_summary.improved, 24);

    let swapped = aggregate_report(&feature_names(), &reference, &half).unwrap();
    assert!(swapped.smoothness_summary.average_variation_pct > 0.0);
    assert_eq!(swapped.smoothness_summary.improved, 0);
    assert!(aggregate_report(&feature_names(), &half[..3], &reference).is_err());
    let csv = r.to_csv();
    assert_eq!(csv.lines().count(), 1 + 48);
    assert!(r.to_table("latent").contains("24/24"));
}

#[test]
fn zero_reference_features_are_excluded() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut reference = random_metrics(&mut rng, 10);
    for m in reference.iter_mut() {
        m.smoothness[1] = 0.0;
    }
    let r = aggregate_report(&feature_names(), &reference, &reference).unwrap();
    assert_eq!(r.smoothness_summary.excluded, vec![feature_names()[1].clone()]);
    assert!(r.smoothness[1].variation_pct.is_none());
}

#[test]
fn features_csv_round_trips() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows: Vec<SequenceFeatures> = (0..4)
        .flat_map(|pair| [Method::Latent, Method::Reference].map(|method| (pair, method)))
        .map(|(pair_id, method)| SequenceFeatures {
            pair_id,
            method,
            values: (0..9).map(|_| (0..NUM_FEATURES).map(|_| rng.random_range(-3.0..3.0)).collect()).collect(),
        })
        .collect();
    let text = features_csv(&rows);
    let back = parse_features_csv(&text).unwrap();
    assert_eq!(back, rows);
    assert_eq!(report_from_features(&back, Method::Latent).unwrap(), report_from_features(&rows, Method::Latent).unwrap());
    assert!(report_from_features(&rows[..3], Method::Latent).is_err());
    let own = report_from_features(&rows, Method::Reference).unwrap();
    assert_eq!(own.smoothness_summary.improved + own.nonlinearity_summary.improved, 0);
}
