use super::{Grads, NumericsError, ParamStore, Result};

/// Compares analytic gradients against central differences.
///
/// `loss_fn` returns the loss and its analytic gradients at the given store.
/// Returns the maximum of `|g_analytic − g_fd| / max(1, |g_fd|)` over every
/// scalar parameter entry.
pub fn finite_diff_check<F>(loss_fn: F, store: &ParamStore, eps: f64) -> Result<f64>
where
    F: Fn(&ParamStore) -> Result<(f64, Grads)>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(NumericsError::BadStep(eps));
    }
    let (first, analytic) = loss_fn(store)?;
    let (second, _) = loss_fn(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(NumericsError::NonDeterministic { first, second });
    }
    let mut worst = 0.0_f64;
    let mut probe = store.clone();
    for (name, param) in store.iter() {
        let g = analytic.get(name).ok_or_else(|| NumericsError::MissingGradient(name.to_string()))?;
        for i in 0..param.value.len() {
            let base = param.value.data()[i];
            probe.get_mut(name)?.data_mut()[i] = base + eps;
            let (plus, _) = loss_fn(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = base - eps;
            let (minus, _) = loss_fn(&probe)?;
            probe.get_mut(name)?.data_mut()[i] = base;
            let fd = (plus - minus) / (2.0 * eps);
            let err = (g.data()[i] - fd).abs() / fd.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
