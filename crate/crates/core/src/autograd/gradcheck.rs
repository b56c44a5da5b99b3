use super::tape::{Tape, Var};
use super::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Step for whole-model checks. Deep stacks produce gradient entries near
/// 1e-7, where the roundoff of a 1e-5 step is already ~1e-4 relative; the
/// larger step keeps truncation error below 1e-8 while cutting roundoff.
pub const MODEL_EPS: f64 = 1e-4;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and element index of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Elements re-measured at other steps.
    pub refined: usize,
}

/// Elements whose error exceeds this are re-measured at other steps.
const REFINE_ABOVE: f64 = 1e-6;
const REFINE_FACTORS: [f64; 3] = [0.1, 0.01, 10.0];

fn eval<F>(f: &mut F, params: &ParamStore<f64>) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    if !tape.value(loss).is_scalar() {
        return Err(Error::shape("grad_check", tape.shape(loss), &[1]));
    }
    Ok(tape.data(loss)[0])
}

fn rel_err<F>(f: &mut F, params: &mut ParamStore<f64>, id: ParamId, i: usize, g_tape: f64, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let orig = params.tensor(id).data()[i];
    params.get_mut(id).tensor.data_mut()[i] = orig + eps;
    let plus = eval(f, params)?;
    params.get_mut(id).tensor.data_mut()[i] = orig - eps;
    let minus = eval(f, params)?;
    params.get_mut(id).tensor.data_mut()[i] = orig;
    let g_fd = (plus - minus) / (2.0 * eps);
    let denom = g_tape.abs().max(g_fd.abs()).max(1e-8);
    Ok((g_tape - g_fd).abs() / denom)
}

/// Compares tape gradients of `f` against central differences for every
/// element of every parameter in `params`.
///
/// Relative error per element is `|g_tape - g_fd| / max(|g_tape|, |g_fd|, 1e-8)`.
/// `f` must be a pure function of the parameters.
///
/// A central difference is only valid when `f` is smooth on
/// `[x - eps, x + eps]`; a ReLU pre-activation within `eps` of zero breaks
/// that. Near-zero gradient entries have the opposite problem, where
/// roundoff of a small step swamps the difference. Elements above a small
/// error are re-measured at `eps / 10`, `eps / 100` and `eps * 10` and keep
/// the smallest error. A wrong gradient disagrees at every step.
pub fn grad_check<F>(mut f: F, params: &mut ParamStore<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let first = eval(&mut f, params)?;
    let second = eval(&mut f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    params.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.backward(loss, params)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        refined: 0,
    };
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = params.tensor(id).numel();
        let analytic: Vec<f64> = params
            .tensor(id)
            .grad()
            .map_or_else(|| vec![0.0; n], |g| g.to_vec());
        for (i, &g_tape) in analytic.iter().enumerate() {
            let mut rel = rel_err(&mut f, params, id, i, g_tape, eps)?;
            if rel > REFINE_ABOVE {
                report.refined += 1;
                for factor in REFINE_FACTORS {
                    rel = rel.min(rel_err(&mut f, params, id, i, g_tape, eps * factor)?);
                }
            }
            report.checked += 1;
            if rel > report.max_rel_err || rel.is_nan() {
                report.max_rel_err = rel;
                report.worst = Some((params.get(id).name.clone(), i));
            }
        }
    }
    params.zero_grads();
    Ok(report)
}
