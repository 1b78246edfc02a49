use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use super::StatsError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerSpec {
    /// Expected mean improvement, in quality points.
    pub delta: f64,
    pub sd: f64,
    pub alpha: f64,
    pub power: f64,
    /// Fraction of enrolled samples expected to be affected (poor quality).
    pub prevalence: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleSize {
    /// Normal-approximation stage, before rounding.
    pub n_normal: f64,
    pub n_affected: u64,
    pub n_total: u64,
}

/// Total enrolment needed so that `n_affected` samples are expected to be affected.
pub fn total_from_affected(n_affected: u64, prevalence: f64) -> Result<u64, StatsError> {
    if !(prevalence > 0.0 && prevalence < 1.0) {
        return Err(StatsError::InvalidSpec(format!("prevalence {prevalence} outside (0,1)")));
    }
    // guard the ceil against representation error such as 0.3765 * 30
    let raw = n_affected as f64 / prevalence;
    let rounded = raw.round();
    Ok(if (raw - rounded).abs() < 1e-9 { rounded as u64 } else { raw.ceil() as u64 })
}

fn validate(spec: &PowerSpec) -> Result<(), StatsError> {
    let unit = |v: f64| v > 0.0 && v < 1.0;
    if !(spec.delta > 0.0 && spec.sd > 0.0) {
        return Err(StatsError::InvalidSpec("delta and sd must be positive".into()));
    }
    if !(unit(spec.alpha) && unit(spec.power) && unit(spec.prevalence)) {
        return Err(StatsError::InvalidSpec("alpha, power and prevalence must lie in (0,1)".into()));
    }
    Ok(())
}

/// Normal-approximation sample size `((z_{1-α/2} + z_{power}) · sd / delta)²`.
pub fn normal_approx_n(spec: &PowerSpec) -> Result<f64, StatsError> {
    validate(spec)?;
    let z = Normal::new(0.0, 1.0).expect("standard normal");
    let k = (z.inverse_cdf(1.0 - spec.alpha / 2.0) + z.inverse_cdf(spec.power)) * spec.sd / spec.delta;
    Ok(k * k)
}

/// One-sample (paired) two-sided t-test sample size: normal approximation
/// refined with t quantiles at `df = n - 1` until the rounded `n` repeats.
pub fn sample_size(spec: &PowerSpec) -> Result<SampleSize, StatsError> {
    let n_normal = normal_approx_n(spec)?;
    let mut n = (n_normal.ceil() as u64).max(2);
    let mut seen = vec![n];
    loop {
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("df >= 1");
        let k = (t.inverse_cdf(1.0 - spec.alpha / 2.0) + t.inverse_cdf(spec.power)) * spec.sd / spec.delta;
        let next = ((k * k).ceil() as u64).max(2);
        if next == n {
            break;
        }
        if let Some(pos) = seen.iter().position(|&s| s == next) {
            // oscillation: take the largest value in the cycle
            n = *seen[pos..].iter().max().expect("non-empty cycle");
            break;
        }
        seen.push(next);
        n = next;
    }
    Ok(SampleSize { n_normal, n_affected: n, n_total: total_from_affected(n, spec.prevalence)? })
}
