//! Central finite-difference comparison against tape gradients.

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tape::{Tape, Var};

/// Coordinates whose analytic and numeric magnitudes sum below this are skipped.
pub const SIGNIFICANCE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    pub worst_index: usize,
    pub checked: usize,
    pub skipped: usize,
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(store, &mut tape)?;
    tape.value(loss)
        .item()
        .ok_or_else(|| TensorError::Usage("loss closure must return a scalar".into()))
}

/// Compares tape gradients of `loss_fn` with central differences of width
/// `2 * step` on every coordinate of every parameter in `params`.
///
/// Relative error per coordinate is `|a − n| / max(|a|, |n|)`.
pub fn finite_diff_check<F>(loss_fn: F, params: &ParamStore, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let first = eval(params, &loss_fn)?;
    let second = eval(params, &loss_fn)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let mut tape = Tape::new();
    let loss = loss_fn(params, &mut tape)?;
    let grads = tape.backward(loss)?.complete_for(params);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_index: 0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let base = params.value(&name).expect("name from store").clone();
        let analytic = grads.get(&name).expect("completed gradients").data().to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = base.data().to_vec();
            plus[i] += step;
            probe.set_value(&name, crate::Tensor::new(base.shape().to_vec(), plus)?)?;
            let up = eval(&probe, &loss_fn)?;
            let mut minus = base.data().to_vec();
            minus[i] -= step;
            probe.set_value(&name, crate::Tensor::new(base.shape().to_vec(), minus)?)?;
            let down = eval(&probe, &loss_fn)?;
            let numeric = (up - down) / (2.0 * step);
            if a.abs() + numeric.abs() <= SIGNIFICANCE_FLOOR {
                report.skipped += 1;
                continue;
            }
            report.checked += 1;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = Some(name.clone());
                report.worst_index = i;
            }
        }
        probe.set_value(&name, base)?;
    }
    Ok(report)
}
