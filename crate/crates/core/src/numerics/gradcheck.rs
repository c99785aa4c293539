use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error, so exact zeros compare by
    /// absolute error.
    pub floor: f64,
    /// Use the corrupted matmul backward (negative control).
    pub corrupt_backward: bool,
    /// Combine steps `h` and `h/2` so the leading truncation term cancels.
    pub richardson: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            floor: 1e-6,
            corrupt_backward: false,
            richardson: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares backward() against central finite differences for every element
/// of every trainable parameter.
///
/// `f` must build a scalar loss deterministically from the store (dropout
/// off).
pub fn grad_check<F>(params: &mut ParamStore, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::new(params);
        g.set_corrupt_backward(opts.corrupt_backward);
        let loss = f(&mut g)?;
        g.backward(loss)?
    };
    let eval = |params: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(params);
        let loss = f(&mut g)?;
        Ok(g.scalar(loss))
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
    };
    let ids: Vec<_> = params
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let n = params.value(id).len();
        for k in 0..n {
            let mut central = |h: f64| -> Result<f64> {
                let orig = params.value(id).data()[k];
                params.get_mut(id).value.data_mut()[k] = orig + h;
                let plus = eval(params)?;
                params.get_mut(id).value.data_mut()[k] = orig - h;
                let minus = eval(params)?;
                params.get_mut(id).value.data_mut()[k] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let numeric = if opts.richardson {
                let (d1, d2) = (central(opts.step)?, central(opts.step / 2.0)?);
                (4.0 * d2 - d1) / 3.0
            } else {
                central(opts.step)?
            };
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(analytic, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_param = params.get(id).name.clone();
                report.worst_index = k;
            }
        }
    }
    Ok(report)
}
