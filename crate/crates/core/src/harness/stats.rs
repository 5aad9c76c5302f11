use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

/// Normal-approximation confidence multiplier.
pub const Z95: f64 = 1.96;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Sample standard deviation; zero for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Half-width of the 95% interval, `1.96 · sd / √n`.
pub fn ci95(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    Z95 * sample_sd(xs) / (xs.len() as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTest {
    pub n: usize,
    pub mean_diff: f64,
    pub t: f64,
    pub p: f64,
    /// The differences have zero variance, so `t` is 0 or infinite.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a − b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::InvalidConfig("paired t-test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("paired differences"));
    }
    let n = diffs.len();
    let m = mean(&diffs);
    let sd = sample_sd(&diffs);
    if sd == 0.0 {
        let (t, p) = if m == 0.0 { (0.0, 1.0) } else { (m.signum() * f64::INFINITY, 0.0) };
        return Ok(TTest {
            n,
            mean_diff: m,
            t,
            p,
            degenerate: true,
        });
    }
    let t = m / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom");
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTest {
        n,
        mean_diff: m,
        t,
        p,
        degenerate: false,
    })
}

/// First 1-based step `t ≥ W` whose trailing `W`-mean is at most the
/// threshold `best + (α − 1)·|best|`, which is `α·best` for positive losses.
pub fn adaptation_speed(losses: &[f64], window: usize, alpha: f64, best_loss: f64) -> Option<usize> {
    if window == 0 || window > losses.len() {
        return None;
    }
    let threshold = best_loss + (alpha - 1.0) * best_loss.abs();
    let mut sum: f64 = losses[..window].iter().sum();
    // a small relative slack so a window equal to the best is not lost to rounding
    let tol = 1e-12 * threshold.abs().max(1e-300);
    if sum / window as f64 <= threshold + tol {
        return Some(window);
    }
    for t in window..losses.len() {
        sum += losses[t] - losses[t - window];
        if sum / window as f64 <= threshold + tol {
            return Some(t + 1);
        }
    }
    None
}

/// Smallest trailing `W`-mean of a series; infinite if it is shorter than `W`.
pub fn best_rolling_mean(losses: &[f64], window: usize) -> f64 {
    if window == 0 || window > losses.len() {
        return f64::INFINITY;
    }
    losses
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .fold(f64::INFINITY, f64::min)
}
