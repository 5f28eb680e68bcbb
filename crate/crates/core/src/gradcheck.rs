//! Finite-difference gradient verification.
//!
//! The oracle is central differences over every parameter element, evaluated
//! on fresh tapes; it shares nothing with the backward pass it checks.

use crate::error::{Error, Result};
use crate::params::{ParamStore, Run};
use crate::tape::{Tape, TensorId};

/// Verdict of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    /// "param_index/element_index" of the worst element.
    pub worst: String,
    pub checked_elements: usize,
}

/// Maximum total parameter count accepted for element-wise perturbation.
pub const MAX_GRADCHECK_PARAMS: usize = 10_000;

/// Check analytic gradients of `build` against central finite differences
/// with the default step 2e-3 (relative to each element's magnitude).
///
/// `build` receives a tape plus one bound tensor per entry of `params` and
/// must return a scalar loss. The relative error uses a floored denominator
/// so f32 evaluation noise on near-zero gradients does not dominate.
pub fn grad_check<F>(params: &[(Vec<f32>, Vec<usize>)], build: F, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    grad_check_with_step(params, build, tol, 2e-3)
}

/// As `grad_check` with an explicit finite-difference step. Larger steps
/// suit piecewise-linear fragments (pooling, relu away from corners) where
/// curvature is zero and f32 evaluation noise dominates.
pub fn grad_check_with_step<F>(params: &[(Vec<f32>, Vec<usize>)], build: F, tol: f64, step: f32) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    let total: usize = params.iter().map(|(d, _)| d.len()).sum();
    if total > MAX_GRADCHECK_PARAMS {
        return Err(Error::invalid(
            "grad_check",
            format!("{total} parameters exceed the {MAX_GRADCHECK_PARAMS} perturbation limit"),
        ));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|(d, s)| tape.param(d.clone(), s.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &ids)?;
    if tape.numel(loss) != 1 {
        return Err(Error::invalid("grad_check", format!("fragment output must be scalar, got shape {:?}", tape.shape(loss))));
    }
    tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = ids
        .iter()
        .zip(params)
        .map(|(id, (d, _))| tape.grad(*id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; d.len()]))
        .collect();

    let eval = |theta: &[Vec<f32>]| -> Result<f64> {
        let mut t = Tape::inference();
        let ids: Vec<TensorId> = theta
            .iter()
            .zip(params)
            .map(|(d, (_, s))| t.leaf(d.clone(), s.clone()))
            .collect::<Result<_>>()?;
        let l = build(&mut t, &ids)?;
        Ok(t.data(l)[0] as f64)
    };

    let mut theta: Vec<Vec<f32>> = params.iter().map(|(d, _)| d.clone()).collect();
    let mut max_rel = 0.0f64;
    let mut worst = String::from("-");
    for pi in 0..theta.len() {
        for ei in 0..theta[pi].len() {
            let orig = theta[pi][ei];
            let h = step * orig.abs().max(1.0);
            theta[pi][ei] = orig + h;
            let lp = eval(&theta)?;
            theta[pi][ei] = orig - h;
            let lm = eval(&theta)?;
            theta[pi][ei] = orig;
            let numeric = (lp - lm) / (2.0 * h as f64);
            let a = analytic[pi][ei] as f64;
            // the 0.25 floor absorbs f32 evaluation noise (~1e-4 absolute)
            // on near-zero gradients; real backward-rule defects scale with
            // the gradient itself and stay visible
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(0.25);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{pi}/{ei}");
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        pass: max_rel < tol,
        worst,
        checked_elements: total,
    })
}

/// Finite-difference check of a model fragment built over a [`ParamStore`].
///
/// `build` constructs the scalar loss through a [`Run`], so layer structs
/// (convs, batch norm, SE, whole blocks) are checked as wired, parameters
/// bound by name. Every element of every trainable entry is perturbed; the
/// total trainable count must stay within the perturbation limit.
pub fn grad_check_store<F>(store: &mut ParamStore, build: F, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Run) -> Result<TensorId>,
{
    let ids = store.trainable_ids();
    let total: usize = ids.iter().map(|&id| store.get(id).numel()).sum();
    if total > MAX_GRADCHECK_PARAMS {
        return Err(Error::invalid(
            "grad_check",
            format!("{total} parameters exceed the {MAX_GRADCHECK_PARAMS} perturbation limit"),
        ));
    }

    // analytic pass
    let analytic: Vec<Vec<f32>> = {
        let mut tape = Tape::new();
        let mut run = Run::new(&mut tape, store, false, false);
        let loss = build(&mut run)?;
        if run.tape.numel(loss) != 1 {
            return Err(Error::invalid("grad_check", format!("fragment output must be scalar, got shape {:?}", run.tape.shape(loss))));
        }
        run.tape.backward(loss)?;
        ids.iter().map(|&id| run.grad_of(id)).collect()
    };

    let eval = |store: &mut ParamStore| -> Result<f64> {
        let mut tape = Tape::inference();
        let mut run = Run::new(&mut tape, store, false, false);
        let loss = build(&mut run)?;
        Ok(run.tape.data(loss)[0] as f64)
    };

    let mut max_rel = 0.0f64;
    let mut worst = String::from("-");
    for (pi, &id) in ids.iter().enumerate() {
        for ei in 0..store.get(id).numel() {
            let orig = store.get(id).data[ei];
            let h = 2e-3f32 * orig.abs().max(1.0);
            store.data_mut(id)[ei] = orig + h;
            let lp = eval(store)?;
            store.data_mut(id)[ei] = orig - h;
            let lm = eval(store)?;
            store.data_mut(id)[ei] = orig;
            let numeric = (lp - lm) / (2.0 * h as f64);
            let a = analytic[pi][ei] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(0.25);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{}/{ei}", store.get(id).name);
            }
        }
    }
    Ok(GradCheckReport { max_rel_err: max_rel, pass: max_rel < tol, worst, checked_elements: total })
}
