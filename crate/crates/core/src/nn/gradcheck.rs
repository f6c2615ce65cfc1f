//! Central finite-difference gradient oracle.

use super::{Gradients, ParameterSet};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Largest relative disagreement between the analytic gradients returned by
/// `f` and central differences of its scalar output, over every parameter
/// entry. The denominator is floored at `1e-6`.
pub fn max_relative_error(params: &ParameterSet, f: &dyn Fn(&ParameterSet) -> (f64, Gradients)) -> f64 {
    let (_, grads) = f(params);
    let h = FD_STEP;
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for id in params.ids() {
        for j in 0..params.value(id).len() {
            let orig = params.value(id).data()[j];
            probe.value_mut(id).data_mut()[j] = orig + h;
            let up = f(&probe).0;
            probe.value_mut(id).data_mut()[j] = orig - h;
            let down = f(&probe).0;
            probe.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[j]);
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    worst
}
