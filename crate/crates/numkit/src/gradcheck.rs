use crate::{ParamStore, Result};

/// Central-difference step used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Compare analytic gradients with central finite differences over every
/// scalar parameter in `store`.
///
/// `loss` must compute the scalar loss at the current parameter values and,
/// when its flag argument is `true`, accumulate analytic gradients into the
/// store. Returns `max |analytic − fd| / max(1e-8, |fd|)`; any non-finite loss
/// or error yields `f64::INFINITY`. An empty store returns 0.
pub fn grad_check<F>(store: &mut ParamStore, mut loss: F) -> f64
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    let n = store.num_scalars();
    if n == 0 {
        return 0.0;
    }
    store.zero_grads();
    match loss(store, true) {
        Ok(v) if v.is_finite() => {}
        _ => return f64::INFINITY,
    }
    let analytic = store.flat_grads();
    store.zero_grads();
    let mut worst = 0.0f64;
    for i in 0..n {
        let orig = *store.scalar_mut(i);
        *store.scalar_mut(i) = orig + GRAD_CHECK_STEP;
        let plus = loss(store, false);
        *store.scalar_mut(i) = orig - GRAD_CHECK_STEP;
        let minus = loss(store, false);
        *store.scalar_mut(i) = orig;
        let (plus, minus) = match (plus, minus) {
            (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
            _ => return f64::INFINITY,
        };
        let fd = (plus - minus) / (2.0 * GRAD_CHECK_STEP);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1e-8);
        worst = worst.max(err);
    }
    store.zero_grads();
    worst
}
