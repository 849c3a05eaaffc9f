//! Sequence metrics and the one-sided Wilcoxon signed-rank test.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// RMS of the unit-step second differences over the interior steps.
pub fn smoothness(values: &[f64]) -> Result<f64> {
    if values.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "smoothness needs at least 3 values, got {}",
            values.len()
        )));
    }
    let sq: f64 = values
        .windows(3)
        .map(|w| (w[2] - 2.0 * w[1] + w[0]).powi(2))
        .sum();
    Ok((sq / (values.len() - 2) as f64).sqrt())
}

/// RMS distance from the chord joining the first and last values.
pub fn nonlinearity(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "nonlinearity needs at least 2 values, got {n}"
        )));
    }
    let (first, last) = (values[0], values[n - 1]);
    let sq: f64 = values
        .iter()
        .enumerate()
        .map(|(t, v)| {
            let c = t as f64 / (n - 1) as f64;
            (v - ((1.0 - c) * first + c * last)).powi(2)
        })
        .sum();
    Ok((sq / n as f64).sqrt())
}

/// Largest sample for which the exact null distribution is enumerated.
pub const EXACT_MAX_N: usize = 20;

/// Signed-rank summary after dropping zero differences.
#[derive(Clone, Debug, PartialEq)]
pub struct SignedRanks {
    pub n: usize,
    /// Average ranks of `|d|`, in input order of the non-zero differences.
    pub ranks: Vec<f64>,
    pub positive: Vec<bool>,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Sizes of groups of tied absolute values.
    pub ties: Vec<usize>,
}

pub fn signed_ranks(differences: &[f64]) -> SignedRanks {
    let nz: Vec<f64> = differences.iter().cloned().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| nz[a].abs().total_cmp(&nz[b].abs()));
    let mut ranks = vec![0.0; n];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && nz[order[j + 1]].abs() == nz[order[i]].abs() {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    let positive: Vec<bool> = nz.iter().map(|&d| d > 0.0).collect();
    let w_plus = ranks.iter().zip(&positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    SignedRanks {
        n,
        ranks,
        positive,
        w_plus,
        ties,
    }
}

/// `P(W+ <= observed)` under the null, by dynamic programming over the
/// doubled (hence integer) ranks.
pub fn wilcoxon_exact(differences: &[f64]) -> Result<f64> {
    let sr = signed_ranks(differences);
    if sr.n == 0 {
        return Err(Error::InsufficientData("all differences are zero".into()));
    }
    if sr.n > EXACT_MAX_N {
        return Err(Error::Config(format!(
            "exact enumeration is limited to n <= {EXACT_MAX_N} (got {})",
            sr.n
        )));
    }
    let doubled: Vec<usize> = sr.ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let observed = (2.0 * sr.w_plus).round() as usize;
    let hits: u64 = counts[..=observed].iter().sum();
    Ok(hits as f64 / 2f64.powi(sr.n as i32))
}

/// Normal approximation with tie and continuity corrections.
pub fn wilcoxon_normal(differences: &[f64]) -> Result<f64> {
    let sr = signed_ranks(differences);
    if sr.n == 0 {
        return Err(Error::InsufficientData("all differences are zero".into()));
    }
    let n = sr.n as f64;
    let mean = n * (n + 1.0) / 4.0;
    let tie: f64 = sr.ties.iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie / 48.0;
    if var <= 0.0 {
        return Ok(1.0);
    }
    let z = (sr.w_plus - mean + 0.5) / var.sqrt();
    Ok(Normal::standard().cdf(z))
}

/// One-sided p-value for the alternative "candidate < reference", where
/// `differences = candidate - reference`. Exact for up to `EXACT_MAX_N`
/// non-zero differences, normal approximation above.
pub fn wilcoxon_one_sided(differences: &[f64]) -> Result<f64> {
    let n = differences.iter().filter(|&&d| d != 0.0).count();
    if n <= EXACT_MAX_N {
        wilcoxon_exact(differences)
    } else {
        wilcoxon_normal(differences)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest};

    #[test]
    fn smoothness_examples() {
        let alternating: Vec<f64> = (0..9).map(|t| (t % 2) as f64).collect();
        assert!((smoothness(&alternating).unwrap() - 2.0).abs() < 1e-9);
        let quad: Vec<f64> = (0..9).map(|t| (t * t) as f64).collect();
        assert!((smoothness(&quad).unwrap() - 2.0).abs() < 1e-9);
        assert_eq!(smoothness(&[0.25, 0.5, 0.75, 1.0]).unwrap(), 0.0);
        assert!(smoothness(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn nonlinearity_examples() {
        let quad: Vec<f64> = (0..9).map(|t| (t * t) as f64).collect();
        assert!((nonlinearity(&quad).unwrap() - (1092.0f64 / 9.0).sqrt()).abs() < 1e-9);
        let mut bump = vec![3.0; 9];
        bump[4] += 1.0;
        assert!((nonlinearity(&bump).unwrap() - 1.0 / 3.0).abs() < 1e-9);
        let affine: Vec<f64> = (0..9).map(|t| -2.0 + 0.5 * t as f64).collect();
        assert_eq!(nonlinearity(&affine).unwrap(), 0.0);
        assert!(nonlinearity(&[1.0]).is_err());
    }

    proptest! {
        #[test]
        fn metrics_are_translation_invariant_and_homogeneous(
            v in proptest::collection::vec(-100.0f64..100.0, 3..15),
            shift in -50.0f64..50.0,
            scale in -4.0f64..4.0,
        ) {
            let s = smoothness(&v).unwrap();
            let n = nonlinearity(&v).unwrap();
            prop_assert!(s >= 0.0 && n >= 0.0);
            let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
            prop_assert!((smoothness(&shifted).unwrap() - s).abs() < 1e-9 * (1.0 + s));
            prop_assert!((nonlinearity(&shifted).unwrap() - n).abs() < 1e-9 * (1.0 + n));
            let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
            prop_assert!((smoothness(&scaled).unwrap() - scale.abs() * s).abs() < 1e-9 * (1.0 + s));
            prop_assert!((nonlinearity(&scaled).unwrap() - scale.abs() * n).abs() < 1e-9 * (1.0 + n));
        }
    }

    #[test]
    fn wilcoxon_small_examples() {
        assert_eq!(wilcoxon_exact(&[-1.0, -2.0, -3.0]).unwrap(), 0.125);
        assert_eq!(wilcoxon_exact(&[1.0, 2.0, 3.0]).unwrap(), 1.0);
        let sr = signed_ranks(&[1.0, -1.0, 2.0, 0.0]);
        assert_eq!(sr.ranks, vec![1.5, 1.5, 3.0]);
        assert_eq!(sr.ties, vec![2]);
        assert_eq!(sr.w_plus, 4.5);
        assert!(wilcoxon_exact(&[0.0, 0.0]).is_err());
    }
}
