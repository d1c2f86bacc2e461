//! Central finite-difference checks for tape gradients.

use crate::params::{BoundParams, ParamStore};
use crate::tensor::{Tape, TensorError, Var};

/// Worst disagreement found by [`check_params`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

/// Relative error with an absolute floor, so near-zero pairs compare
/// absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of `loss` with central differences for every
/// scalar of every parameter in `params` (or the first `limit` per tensor).
pub fn check_params<F, E>(
    params: &ParamStore,
    h: f64,
    limit: Option<usize>,
    loss: F,
) -> Result<GradCheckReport, E>
where
    F: for<'t> Fn(&'t Tape, &BoundParams<'t>) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let out = loss(&tape, &bound)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<_> = bound.vars().iter().map(|&v| grads.get_or_zeros(v)).collect();

    let eval = |p: &ParamStore| -> Result<f64, E> {
        let tape = Tape::new();
        let bound = p.bind(&tape, false);
        Ok(loss(&tape, &bound)?.item())
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    let mut probe = params.clone();
    for (pi, name) in params.names().iter().enumerate() {
        let n = params.tensors()[pi].value.len();
        for k in 0..limit.map_or(n, |l| l.min(n)) {
            let original = probe.tensors()[pi].value.as_slice().expect("contiguous")[k];
            probe.tensors_mut()[pi].value.as_slice_mut().expect("contiguous")[k] = original + h;
            let up = eval(&probe)?;
            probe.tensors_mut()[pi].value.as_slice_mut().expect("contiguous")[k] = original - h;
            let down = eval(&probe)?;
            probe.tensors_mut()[pi].value.as_slice_mut().expect("contiguous")[k] = original;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].as_slice().expect("contiguous")[k];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.clone(), k, a, numeric));
            }
        }
    }
    Ok(report)
}
