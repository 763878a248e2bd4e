//! Sample statistics with a fixed summation order, so results do not depend
//! on how the per-path work was scheduled.

/// Sample mean and standard error (`sample std / sqrt(n)`).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    let var = ss / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub fn mean(xs: &[f64]) -> f64 {
    mean_stderr(xs).0
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let (_, se) = mean_stderr(xs);
    se * se * xs.len() as f64
}
