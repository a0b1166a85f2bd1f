//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::kernels::params::{ParamId, ParamStore};
use crate::kernels::tape::{Tape, Var};
use crate::kernels::tensor::Tensor;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error, so entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    pub checked: usize,
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compares analytic gradients of the scalar `f` at the point `params`
/// against central differences. At most `max_per_param` entries per tensor
/// are probed (evenly strided); `None` probes everything.
pub fn check_gradients<G>(
    params: &ParamStore<f64>,
    f: G,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape<'_, f64>) -> Result<Var>,
{
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new(store);
        let out = f(&mut tape)?;
        Ok(tape.value(out).item())
    };
    let grads = {
        let mut tape = Tape::new(params);
        let out = f(&mut tape)?;
        tape.backward(out)?
    };

    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_analytic: 0.0,
        checked: 0,
        worst: None,
    };
    for id in params.ids() {
        let n = params.get(id).len();
        let stride = match max_per_param {
            Some(k) if k > 0 && n > k => n.div_ceil(k),
            _ => 1,
        };
        for e in (0..n).step_by(stride) {
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[e]);
            let numeric = central_difference(&mut probe, id, e, &eval)?;
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            report.max_abs_analytic = report.max_abs_analytic.max(analytic.abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((params.name(id).to_string(), e, analytic, numeric));
            }
        }
    }
    Ok(report)
}

fn central_difference<E>(
    probe: &mut ParamStore<f64>,
    id: ParamId,
    e: usize,
    eval: &E,
) -> Result<f64>
where
    E: Fn(&ParamStore<f64>) -> Result<f64>,
{
    let orig = probe.get(id).data()[e];
    probe.get_mut(id).data_mut()[e] = orig + FD_STEP;
    let plus = eval(probe)?;
    probe.get_mut(id).data_mut()[e] = orig - FD_STEP;
    let minus = eval(probe)?;
    probe.get_mut(id).data_mut()[e] = orig;
    Ok((plus - minus) / (2.0 * FD_STEP))
}

/// Convenience for single-input functions: registers `x` as the only parameter.
pub fn check_gradients_at<G>(x: Tensor<f64>, f: G) -> Result<GradCheckReport>
where
    G: Fn(&mut Tape<'_, f64>, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.add("x", x);
    check_gradients(
        &store,
        |tape| {
            let x = tape.param(id);
            f(tape, x)
        },
        None,
    )
}
