//! Success-rate statistics: sample moments and the binomial-proportion
//! confidence interval used for every sweep cell.

/// Aggregate of one cell's repetition outcomes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n-1 denominator); 0 for a single value.
    pub std: f64,
    /// 95% half-width under the normal approximation of the binomial.
    pub ci_half: f64,
}

/// 95% confidence half-width for a proportion `p` estimated from `r`
/// repetitions: `1.96 * sqrt(p (1-p) / r)`.
pub fn ci_half_width(p: f64, r: usize) -> f64 {
    assert!(r >= 1, "need at least one repetition");
    let p = p.clamp(0.0, 1.0);
    1.96 * (p * (1.0 - p) / r as f64).sqrt()
}

pub fn summarize(xs: &[f64]) -> Summary {
    assert!(!xs.is_empty(), "cannot summarize an empty sample");
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Summary { mean, std, ci_half: ci_half_width(mean, n) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn ci_matches_formula() {
        assert_relative_eq!(ci_half_width(0.5, 100), 1.96 * 0.05);
        assert_eq!(ci_half_width(0.0, 50), 0.0);
        assert_eq!(ci_half_width(1.0, 50), 0.0);
    }

    /// At the reference scale (R=1000, SR around 0.96) the half-width stays
    /// under 0.0125 — the 95%-within-1%-error regime.
    #[test]
    fn ci_at_full_scale_within_pct() {
        assert!(ci_half_width(0.96, 1000) <= 0.0125);
        assert!(ci_half_width(0.96, 1000) >= 0.012);
    }

    #[test]
    fn summary_moments() {
        let s = summarize(&[0.0, 0.5, 1.0]);
        assert_relative_eq!(s.mean, 0.5);
        assert_relative_eq!(s.std, 0.5);
        assert_relative_eq!(s.ci_half, ci_half_width(0.5, 3));

        let one = summarize(&[0.7]);
        assert_eq!(one.std, 0.0);
        assert_relative_eq!(one.mean, 0.7);
    }
}
