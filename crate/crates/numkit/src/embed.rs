use crate::{NumError, Result};

/// Sinusoidal embedding of an integer position.
///
/// The first half holds `sin(index · f_k)`, the second half `cos(index · f_k)`,
/// with `f_k = max_period^(-k / half)` for `k = 0..half`.
pub fn sinusoidal_embed(index: usize, dim: usize, max_period: f64) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(NumError::Config(format!("embedding dim must be even and positive, got {dim}")));
    }
    if !(max_period > 1.0) {
        return Err(NumError::Config(format!("max_period must exceed 1, got {max_period}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    let log_period = max_period.ln();
    for k in 0..half {
        let freq = (-log_period * k as f64 / half as f64).exp();
        let arg = index as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    Ok(out)
}
