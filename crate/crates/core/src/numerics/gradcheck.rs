//! Central finite-difference checks against the tape's gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Normwise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares analytic gradients of a scalar loss with central differences
/// for every array in `store`, returning `(name, relative error)` pairs.
pub fn check_params<F>(store: &ParamStore, step: f64, loss: F) -> Result<Vec<(String, f64)>>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(s);
        let root = loss(&mut tape)?;
        Ok(tape.value(root).item())
    };
    let analytic = {
        let mut tape = Tape::new(store);
        let root = loss(&mut tape)?;
        tape.backward(root)?.params
    };
    let mut probe = store.clone();
    let mut report = Vec::new();
    for (id, name, value) in store.iter() {
        let mut numeric = vec![0.0; value.len()];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = value.data()[i];
            probe.get_mut(id).data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let zeros = vec![0.0; value.len()];
        let exact = analytic.get(id).map_or(&zeros[..], |g| g.grad.data());
        let err = relative_error(exact, &numeric);
        if !err.is_finite() {
            return Err(Error::NonFinite {
                batch: 0,
                spec: format!("gradient check of {name}"),
            });
        }
        report.push((name.to_string(), err));
    }
    Ok(report)
}
