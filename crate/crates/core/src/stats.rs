//! Goodness-of-fit helpers used by the blinding and uniformity audits.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChiSquareTest {
    pub statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
}

impl ChiSquareTest {
    pub fn passes(&self, significance: f64) -> bool {
        self.p_value > significance
    }
}

/// Pearson chi-square against the uniform distribution over the buckets.
pub fn chi_square_uniform(counts: &[u64]) -> ChiSquareTest {
    let n = counts.len() as f64;
    let probs = vec![1.0 / n; counts.len()];
    chi_square(counts, &probs)
}

/// Pearson chi-square against explicit bucket probabilities (summing to 1).
pub fn chi_square(counts: &[u64], probs: &[f64]) -> ChiSquareTest {
    assert_eq!(counts.len(), probs.len());
    assert!(counts.len() >= 2, "need at least two buckets");
    let total: u64 = counts.iter().sum();
    let total = total as f64;
    let statistic = counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = total * p;
            let d = c as f64 - e;
            d * d / e
        })
        .sum::<f64>();
    let dof = counts.len() - 1;
    let dist = ChiSquared::new(dof as f64).expect("positive degrees of freedom");
    ChiSquareTest { statistic, degrees_of_freedom: dof, p_value: 1.0 - dist.cdf(statistic) }
}

/// Buckets residues of `Z_p` into `buckets` contiguous ranges and returns
/// (counts, exact bucket probabilities under uniformity).
pub fn bucket_residues(values: impl IntoIterator<Item = u64>, p: u64, buckets: usize) -> (Vec<u64>, Vec<f64>) {
    let b = buckets as u64;
    let bucket_of = |v: u64| ((v as u128 * b as u128) / p as u128) as usize;
    let mut counts = vec![0u64; buckets];
    for v in values {
        counts[bucket_of(v)] += 1;
    }
    let mut sizes = vec![0u64; buckets];
    // bucket i covers residues v with floor(v*b/p) == i: v in [ceil(i*p/b), ceil((i+1)*p/b))
    for (i, size) in sizes.iter_mut().enumerate() {
        let lo = ((i as u128 * p as u128).div_ceil(b as u128)) as u64;
        let hi = (((i as u128 + 1) * p as u128).div_ceil(b as u128)) as u64;
        *size = hi - lo;
    }
    let probs = sizes.iter().map(|&s| s as f64 / p as f64).collect();
    (counts, probs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfectly_flat_counts_have_zero_statistic() {
        let t = chi_square_uniform(&[100, 100, 100, 100]);
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.degrees_of_freedom, 3);
        assert!((t.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn skewed_counts_fail() {
        let t = chi_square_uniform(&[1000, 10, 10, 10]);
        assert!(!t.passes(0.01));
    }

    #[test]
    fn known_statistic() {
        // (60-50)^2/50 + (40-50)^2/50 = 4, dof 1, P(chi2_1 > 4) = 0.0455
        let t = chi_square_uniform(&[60, 40]);
        assert!((t.statistic - 4.0).abs() < 1e-12);
        assert!((t.p_value - 0.0455).abs() < 1e-3);
    }

    #[test]
    fn bucket_sizes_cover_field() {
        let (counts, probs) = bucket_residues(0..8191, 8191, 32);
        assert_eq!(counts.iter().sum::<u64>(), 8191);
        for (c, p) in counts.iter().zip(&probs) {
            assert!((*c as f64 / 8191.0 - p).abs() < 1e-12);
        }
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
