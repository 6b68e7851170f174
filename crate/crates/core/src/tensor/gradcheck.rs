//! Finite-difference verification of tape gradients.

use super::{BoundParams, Parameters, Tape, Var};
use crate::error::Result;

/// Gradients smaller than this (in both estimates) are compared absolutely.
const ABS_FLOOR: f64 = 1e-6;
/// How often the step may be halved when a perturbation crosses a kink.
const MAX_REFINE: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct GradMismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Elements whose step had to shrink below `h` to stay on one smooth piece.
    pub refined: usize,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn eval<F>(f: &F, params: &Parameters) -> Result<(f64, u64)>
where
    F: Fn(&Tape, &BoundParams) -> Result<Var>,
{
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let out = f(&tape, &bound)?;
    let v = out.item().unwrap_or(f64::NAN);
    Ok((v, tape.nonsmooth_signature()))
}

/// Compares the tape gradient of scalar `f` to central differences
/// `(f(p+h) - f(p-h)) / 2h` for every parameter element.
///
/// Relative error is `|a - n| / max(|a|, |n|, 1e-6)`. When a perturbation
/// flips the branch of a non-smooth primitive, the step is halved until both
/// sides evaluate the same smooth piece.
pub fn grad_check<F>(f: F, params: &Parameters, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &BoundParams) -> Result<Var>,
{
    assert!(h > 0.0, "grad_check step must be positive");
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let loss = f(&tape, &bound)?;
    let base_sig = tape.nonsmooth_signature();
    loss.backward()?;

    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let analytic = bound
            .get(&name)?
            .grad()
            .unwrap_or_else(|| vec![0.0; params.get(&name).map_or(0, |t| t.numel())]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = params.get(&name).expect("bound name").data()[i];
            let mut step = h;
            let mut numeric = f64::NAN;
            for attempt in 0..=MAX_REFINE {
                probe.get_mut(&name).expect("name").data_mut()[i] = orig + step;
                let (fp, sp) = eval(&f, &probe)?;
                probe.get_mut(&name).expect("name").data_mut()[i] = orig - step;
                let (fm, sm) = eval(&f, &probe)?;
                numeric = (fp - fm) / (2.0 * step);
                if (sp == base_sig && sm == base_sig) || attempt == MAX_REFINE {
                    if attempt > 0 {
                        report.refined += 1;
                    }
                    break;
                }
                step *= 0.5;
            }
            probe.get_mut(&name).expect("name").data_mut()[i] = orig;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
            }
            if !(rel <= tol) {
                report.failures.push(GradMismatch {
                    name: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
