//! Central-difference verification of backpropagated gradients.

use crate::nn::{ParamId, ParamStore};

/// Result of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (param name, coordinate, backprop grad, finite-diff grad) of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub coords_checked: usize,
}

/// Compares backprop gradients against central finite differences.
///
/// `eval(store, with_grad)` must return the loss; when `with_grad` is
/// true it must also populate `store` gradients (zeroing them first is
/// the caller's job inside the closure, or they can rely on the store
/// being zeroed here before the call). The loss must be a deterministic
/// function of the parameter values.
///
/// Relative error per coordinate is |g_bp - g_fd| / max(|g_bp|, |g_fd|, 1e-8).
pub fn grad_check(
    store: &mut ParamStore,
    ids: &[ParamId],
    mut eval: impl FnMut(&mut ParamStore, bool) -> f64,
    h: f64,
) -> GradCheckReport {
    store.zero_grads();
    let _ = eval(store, true);
    let bp: Vec<(ParamId, Vec<f64>)> = ids
        .iter()
        .map(|&id| (id, store.get(id).grad.data().to_vec()))
        .collect();

    let mut max_rel_err = 0.0;
    let mut worst = None;
    let mut coords = 0;
    for (id, g_bp) in &bp {
        for i in 0..g_bp.len() {
            let orig = store.get(*id).value.data()[i];
            store.get_mut(*id).value.data_mut()[i] = orig + h;
            let lp = eval(store, false);
            store.get_mut(*id).value.data_mut()[i] = orig - h;
            let lm = eval(store, false);
            store.get_mut(*id).value.data_mut()[i] = orig;
            let g_fd = (lp - lm) / (2.0 * h);
            let rel = (g_bp[i] - g_fd).abs() / g_bp[i].abs().max(g_fd.abs()).max(1e-8);
            coords += 1;
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((store.get(*id).name.clone(), i, g_bp[i], g_fd));
            }
        }
    }
    GradCheckReport {
        max_rel_err,
        worst,
        coords_checked: coords,
    }
}
