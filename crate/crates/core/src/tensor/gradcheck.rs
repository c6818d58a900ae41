//! Central finite-difference gradient checking.

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Step used by the central difference quotient.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Norm-wise relative error for each input, in input order.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Vec<f64>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }

    /// Relative error of the concatenated gradient over all inputs. Unlike
    /// [`max_rel_error`](Self::max_rel_error) this stays meaningful when one
    /// input's true gradient is exactly zero.
    pub fn global_rel_error(&self) -> f64 {
        relative_error(&self.analytic.concat(), &self.numeric.concat())
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖, 1e-8)`
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-8)
}

/// Compares backward gradients of a scalar function with central differences.
///
/// `f` receives a fresh tape and one leaf per input and must return a scalar.
pub fn check<F>(inputs: &[Tensor], f: F, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::InvalidArgument("gradient check needs a scalar output".into()));
    }
    let grads = tape.backward(out)?;

    let mut work = inputs.to_vec();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut all_analytic = Vec::with_capacity(inputs.len());
    let mut all_numeric = Vec::with_capacity(inputs.len());
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(|g| g.data().to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (plus - minus) / (2.0 * step);
        }
        rel_errors.push(relative_error(&analytic, &numeric));
        all_analytic.push(analytic);
        all_numeric.push(numeric);
    }
    Ok(GradCheck {
        rel_errors,
        analytic: all_analytic,
        numeric: all_numeric,
    })
}
