//! Variance-stabilizing transform for Poisson counts.

use crate::error::{Result, ThinError};

/// `2 √(y + 3/8)`.
pub fn anscombe_value(y: u64) -> f64 {
    2.0 * (y as f64 + 0.375).sqrt()
}

/// Elementwise transform of a count vector.
pub fn anscombe(y: &[i64]) -> Result<Vec<f64>> {
    y.iter()
        .map(|&v| {
            u64::try_from(v)
                .map(anscombe_value)
                .map_err(|_| ThinError::InvalidArgument(format!("negative count {v}")))
        })
        .collect()
}
