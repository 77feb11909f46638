//! Central finite-difference gradient checking.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// How often the step may shrink around a suspected kink.
pub const MAX_SHRINKS: usize = 3;

/// Relative error between an analytic and numeric derivative, with a floor
/// of `1e-8` on the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares backward-pass gradients of the scalar built by `f` against
/// central differences with step `eps`, over every entry of every parameter.
/// Returns the maximum relative error. A disagreement smaller than the
/// rounding error of the difference quotient itself counts as zero, so
/// gradients that are exactly zero do not report noise divided by the floor.
///
/// Piecewise functions (ReLU, top-k selection) can have a kink within `eps`
/// of the probe point, where a central difference averages two different
/// slopes. Each entry is therefore also differenced at `eps / 10`; if the
/// two quotients disagree beyond truncation and rounding error the step
/// keeps shrinking tenfold, at most [`MAX_SHRINKS`] times, and the last
/// quotient is the one compared.
pub fn finite_diff_check<F>(store: &ParamStore, f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    finite_diff_check_params(store, &ids, f, eps)
}

/// Same as [`finite_diff_check`], restricted to `ids`.
pub fn finite_diff_check_params<F>(store: &ParamStore, ids: &[ParamId], f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut graph = Graph::new();
    let out = f(&mut graph, store)?;
    let grads = graph.backward(out)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g, s)?;
        g.scalar(v)
    };

    let mut probe = store.clone();
    let mut worst: f64 = 0.0;
    for &id in ids {
        let analytic = grads.param_or_zeros(store, id);
        for k in 0..store.get(id).numel() {
            let original = store.get(id).data()[k];
            // Central quotient at step `h` and its rounding error.
            let mut central = |h: f64| -> Result<(f64, f64)> {
                probe.get_mut(id).data_mut()[k] = original + h;
                let plus = eval(&probe)?;
                probe.get_mut(id).data_mut()[k] = original - h;
                let minus = eval(&probe)?;
                probe.get_mut(id).data_mut()[k] = original;
                Ok(((plus - minus) / (2.0 * h), 4.0 * f64::EPSILON * (plus.abs() + minus.abs()) / (2.0 * h)))
            };
            let (mut numeric, mut rounding) = central(eps)?;
            let mut h = eps;
            for _ in 0..MAX_SHRINKS {
                h /= 10.0;
                let (next, next_rounding) = central(h)?;
                let settled = (next - numeric).abs() <= rounding + next_rounding + 1e-5 * next.abs().max(numeric.abs());
                (numeric, rounding) = (next, next_rounding);
                if settled {
                    break;
                }
            }
            let a = analytic.data()[k];
            if (a - numeric).abs() > rounding {
                worst = worst.max(relative_error(a, numeric));
            }
        }
    }
    Ok(worst)
}
