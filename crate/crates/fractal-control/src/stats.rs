//! Small statistics toolkit shared by the estimators.
//!
//! Monte-Carlo accumulation uses Welford's online algorithm together with
//! Chan's pairwise merge, so per-block accumulators can be combined in a
//! fixed order and the final result does not depend on the worker count.

/// A point estimate with its standard error and sample size.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n: u64,
}

impl Estimate {
    /// Half-width of the two-sided 99% confidence interval.
    pub fn ci99_half_width(&self) -> f64 {
        crate::tol::Z_99 * self.stderr
    }
}

/// Online mean/variance accumulator (Welford), mergeable across blocks.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningMoments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl RunningMoments {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    /// Chan's parallel combination; exact bookkeeping of counts and means.
    pub fn merge(mut self, other: Self) -> Self {
        if other.n == 0 {
            return self;
        }
        if self.n == 0 {
            return other;
        }
        let n1 = self.n as f64;
        let n2 = other.n as f64;
        let delta = other.mean - self.mean;
        let n = n1 + n2;
        self.mean += delta * n2 / n;
        self.m2 += other.m2 + delta * delta * n1 * n2 / n;
        self.n += other.n;
        self
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n as f64 - 1.0)
        }
    }

    pub fn stderr(&self) -> f64 {
        (self.variance() / self.n as f64).sqrt()
    }

    pub fn estimate(&self) -> Estimate {
        Estimate {
            value: self.mean(),
            stderr: self.stderr(),
            n: self.n,
        }
    }
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need at least two points for a slope");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Slope of `log y` against `log x`; points with non-positive `y` are
/// rejected by assertion since they signal an upstream estimator failure.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys
        .iter()
        .map(|&y| {
            assert!(y > 0.0, "log-log fit requires positive ordinates, got {y}");
            y.ln()
        })
        .collect();
    linear_fit(&lx, &ly).0
}

/// Share of the total carried by the largest `fraction` of entries,
/// with linear interpolation at fractional rank (a Lorenz-curve read-out).
///
/// `weights` need not be sorted or normalised; they must be non-negative
/// with a positive sum.
pub fn top_share(weights: &[f64], fraction: f64) -> f64 {
    assert!(!weights.is_empty());
    assert!((0.0..=1.0).contains(&fraction));
    let mut sorted = weights.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("weights must be finite"));
    let total: f64 = sorted.iter().sum();
    assert!(total > 0.0, "top_share needs a positive total");
    let rank = fraction * sorted.len() as f64;
    let whole = rank.floor() as usize;
    let frac = rank - whole as f64;
    let mut acc: f64 = sorted[..whole].iter().sum();
    if frac > 0.0 && whole < sorted.len() {
        acc += frac * sorted[whole];
    }
    acc / total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_direct_formulas() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let mut acc = RunningMoments::new();
        for &x in &xs {
            acc.push(x);
        }
        assert!((acc.mean() - 3.75).abs() < 1e-14);
        // Sample variance of {1,2,4,8} is 9.583333...
        assert!((acc.variance() - 115.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn merge_is_order_independent_and_matches_single_pass() {
        let xs: Vec<f64> = (0..100).map(|i| (i as f64).sin() + 2.0).collect();
        let mut whole = RunningMoments::new();
        for &x in &xs {
            whole.push(x);
        }
        let mut left = RunningMoments::new();
        let mut right = RunningMoments::new();
        for &x in &xs[..37] {
            left.push(x);
        }
        for &x in &xs[37..] {
            right.push(x);
        }
        let merged = left.merge(right);
        assert!((merged.mean() - whole.mean()).abs() < 1e-13);
        assert!((merged.variance() - whole.variance()).abs() < 1e-12);
        assert_eq!(merged.count(), whole.count());
    }

    #[test]
    fn linear_fit_recovers_exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.5 * x - 1.0).collect();
        let (slope, intercept) = linear_fit(&xs, &ys);
        assert!((slope - 2.5).abs() < 1e-12);
        assert!((intercept + 1.0).abs() < 1e-12);
    }

    #[test]
    fn loglog_slope_recovers_power_law() {
        let xs = [0.5, 0.25, 0.125, 0.0625];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(0.75)).collect();
        assert!((loglog_slope(&xs, &ys) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn top_share_interpolates_fractional_ranks() {
        // Four equal weights: the top 10% is 0.4 of one entry's share.
        let w = [1.0, 1.0, 1.0, 1.0];
        assert!((top_share(&w, 0.1) - 0.1).abs() < 1e-14);
        // All mass in one of ten entries: any positive fraction captures it.
        let mut spiky = vec![0.0; 10];
        spiky[3] = 5.0;
        assert!((top_share(&spiky, 0.1) - 1.0).abs() < 1e-14);
        // Linear interpolation inside the second-largest entry.
        let w = [4.0, 2.0, 1.0, 1.0];
        // rank = 0.5 * 4 = 2 entries exactly: (4 + 2) / 8.
        assert!((top_share(&w, 0.5) - 0.75).abs() < 1e-14);
    }
}
