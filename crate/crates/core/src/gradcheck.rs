//! Central finite-difference gradient checks.
//!
//! The numeric side only ever calls the forward function, so it is
//! independent of the backward rules it validates.
//!
//! A central difference is only an oracle if `x ± h` stay on the same smooth
//! piece as `x`. Forward passes run on traced tapes; when a perturbation
//! flips any relu/abs/clamp/select branch, the entry is re-measured with
//! smaller steps until both sides stay on the piece of `x`.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Denominator floor for relative errors: gradients below this magnitude
/// are compared in absolute terms, since central differences cannot resolve
/// them much better than that anyway.
pub const REL_FLOOR: f64 = 1e-6;

/// Step reductions tried on a stencil that straddles a kink (factor 10 each).
pub const MAX_REFINEMENTS: usize = 5;

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    /// Worst relative error over all checked entries.
    pub max_rel_error: f64,
    /// `(param index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    /// Entries whose step-`h` stencil crossed a kink and were re-measured.
    pub straddled: usize,
    /// Straddling entries for which no smaller step avoided the kink; these
    /// keep their step-`h` difference.
    pub unresolved: usize,
    /// Worst relative error the straddling entries had at step `h`.
    pub straddled_raw_error: f64,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Evaluate `f` on a no-grad tape and return the scalar loss.
pub fn eval_loss<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::no_grad();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
    Ok(f(&tape, &vars)?.value().item())
}

/// Loss and branch signature of one traced forward pass.
pub fn eval_traced<F>(params: &[Tensor], f: &F) -> Result<(f64, u64)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::traced();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = f(&tape, &vars)?.value().item();
    Ok((loss, tape.branch_signature().unwrap_or(0)))
}

/// Analytic gradients of `f` at `params`.
pub fn analytic_gradients<F>(params: &[Tensor], f: &F) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(&loss)?;
    Ok(vars.iter().map(|v| grads.get_or_zeros(v)).collect())
}

/// Compare analytic gradients against central differences with step `h`.
///
/// `select(param, element)` chooses which entries to perturb; pass
/// `|_, _| true` to check everything.
pub fn check<F>(
    params: &[Tensor],
    f: F,
    h: f64,
    select: impl Fn(usize, usize) -> bool,
) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic = analytic_gradients(params, &f)?;
    let (_, base) = eval_traced(params, &f)?;
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        straddled: 0,
        unresolved: 0,
        straddled_raw_error: 0.0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..params[pi].len() {
            if !select(pi, ei) {
                continue;
            }
            let orig = params[pi].data()[ei];
            let mut central = |step: f64| -> Result<(f64, bool)> {
                work[pi].data_mut()[ei] = orig + step;
                let (plus, sp) = eval_traced(&work, &f)?;
                work[pi].data_mut()[ei] = orig - step;
                let (minus, sm) = eval_traced(&work, &f)?;
                work[pi].data_mut()[ei] = orig;
                Ok(((plus - minus) / (2.0 * step), sp == base && sm == base))
            };
            let a = grad.data()[ei];
            let (mut numeric, smooth) = central(h)?;
            if !smooth {
                report.straddled += 1;
                report.straddled_raw_error =
                    report.straddled_raw_error.max(relative_error(a, numeric));
                let mut step = h;
                let mut resolved = false;
                for _ in 0..MAX_REFINEMENTS {
                    step /= 10.0;
                    let (n, ok) = central(step)?;
                    if ok {
                        numeric = n;
                        resolved = true;
                        break;
                    }
                }
                report.unresolved += usize::from(!resolved);
            }
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((pi, ei, a, numeric));
            }
        }
    }
    Ok(report)
}
