//! Scaling efficiency.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("baseline throughput must be positive, got {0}")]
    Baseline(f64),
    #[error("thread count must be at least 1")]
    Threads,
}

/// `p_n / (p_1 * n) * 100`: throughput at `n` threads against `n` times the
/// same configuration's single-thread throughput.
pub fn efficiency(p_n: f64, p_1: f64, n: usize) -> Result<f64, MetricsError> {
    if !(p_1 > 0.0 && p_1.is_finite()) {
        return Err(MetricsError::Baseline(p_1));
    }
    if n == 0 {
        return Err(MetricsError::Threads);
    }
    Ok(p_n / (p_1 * n as f64) * 100.0)
}

/// `p_n / (pd_1 * n) * 100` with `pd_1` the default policy's single-thread
/// throughput.
pub fn relative_efficiency(p_n: f64, pd_1: f64, n: usize) -> Result<f64, MetricsError> {
    efficiency(p_n, pd_1, n)
}
