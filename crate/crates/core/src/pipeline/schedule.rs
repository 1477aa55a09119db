//! How many tokens each decoding step reveals.

use crate::numerics::NumericsError;

/// Cosine reveal counts for `m` tokens over `steps` steps.
///
/// Step `s` is owed `m·(cos(π(s−1)/2S) − cos(πs/2S))` tokens; the integer
/// counts are a largest-remainder apportionment of those quotas (ties to
/// the earlier step). Any step left at zero is raised to one, taking the
/// token from the first step holding the current maximum, which keeps the
/// counts non-decreasing.
pub fn reveal_counts(m: usize, steps: usize) -> Result<Vec<usize>, NumericsError> {
    if steps == 0 || steps > m {
        return Err(NumericsError::InvalidArgument(format!(
            "AR steps must satisfy 1 <= S <= M, got S={steps}, M={m}"
        )));
    }
    let half_pi = std::f64::consts::FRAC_PI_2;
    let cum = |s: usize| 1.0 - (half_pi * s as f64 / steps as f64).cos();
    let quotas: Vec<f64> = (1..=steps).map(|s| m as f64 * (cum(s) - cum(s - 1))).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut by_remainder: Vec<usize> = (0..steps).collect();
    by_remainder.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.partial_cmp(&ra).expect("finite quotas").then(a.cmp(&b))
    });
    for &i in by_remainder.iter().take(m.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    while let Some(zero) = counts.iter().position(|&c| c == 0) {
        let max = *counts.iter().max().expect("non-empty");
        let donor = counts.iter().position(|&c| c == max).expect("max exists");
        counts[donor] -= 1;
        counts[zero] += 1;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn boundaries() {
        assert_eq!(reveal_counts(16, 1).unwrap(), vec![16]);
        assert_eq!(reveal_counts(16, 16).unwrap(), vec![1; 16]);
        assert!(reveal_counts(16, 17).is_err());
        assert!(reveal_counts(16, 0).is_err());
    }

    #[test]
    fn sixteen_tokens_in_four_steps() {
        // Quotas by direct evaluation: 16·(cos((s−1)π/8) − cos(sπ/8)).
        let q: Vec<f64> = (1..=4)
            .map(|s| 16.0 * (((s - 1) as f64 * std::f64::consts::PI / 8.0).cos() - (s as f64 * std::f64::consts::PI / 8.0).cos()))
            .collect();
        assert!((q[0] - 1.2179).abs() < 1e-3 && (q[1] - 3.4683).abs() < 1e-3);
        assert!((q[2] - 5.1908).abs() < 1e-3 && (q[3] - 6.1229).abs() < 1e-3);
        assert_eq!(reveal_counts(16, 4).unwrap(), vec![1, 4, 5, 6]);
    }

    proptest! {
        #[test]
        fn counts_are_positive_monotone_and_complete(m in 1usize..200, frac in 0.0f64..1.0) {
            let s = 1 + ((m - 1) as f64 * frac) as usize;
            let c = reveal_counts(m, s).unwrap();
            prop_assert_eq!(c.len(), s);
            prop_assert_eq!(c.iter().sum::<usize>(), m);
            prop_assert!(c.iter().all(|&x| x >= 1));
            prop_assert!(c.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
