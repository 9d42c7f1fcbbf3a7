//! Central finite-difference gradient checking at 64-bit.
//!
//! Independent of the tape's backward pass: the numeric side only ever calls
//! the forward evaluation, so a sign error in any backward rule shows up as a
//! mismatch here.

use crate::error::TensorError;
use crate::params::{Ctx, ParamStore};
use crate::tensor::{Tape, TensorId};

/// A differentiable scalar function of a set of named leaf arrays.
pub type LossFn<'a> = &'a dyn Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId, TensorError>;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error over all checked elements.
    pub max_rel_err: f64,
    /// (leaf index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    // floor keeps quotient roundoff on near-zero gradients out of the ratio
    let scale = a.abs().max(n.abs()).max(1e-5);
    (a - n).abs() / scale
}

/// Difference quotients at eps and eps/2 agree only where the loss is smooth;
/// a kink (relu, max pool) inside the stencil makes them disagree, and those
/// isolated elements carry no gradient information. A wrong backward rule is
/// still caught: there the two quotients agree with each other, not analytic.
fn stencil_is_smooth(full: f64, half: f64) -> bool {
    rel_err(full, half) < 1e-3
}

/// Compare tape gradients against central differences with step `eps`.
///
/// `leaves` are (shape, values) pairs lifted as requires-grad leaves in order;
/// `f` builds the scalar loss from them on a fresh tape each evaluation.
pub fn check_gradients(
    leaves: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
    f: LossFn,
) -> Result<GradCheckReport, TensorError> {
    // Analytic pass.
    let mut tape = Tape::<f64>::new();
    let ids: Vec<TensorId> = leaves
        .iter()
        .map(|(shape, data)| tape.leaf(shape, data.clone(), true))
        .collect::<Result<_, _>>()?;
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.data(id).len()])
        })
        .collect();

    let eval = |leaves: &[(Vec<usize>, Vec<f64>)]| -> Result<f64, TensorError> {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<TensorId> = leaves
            .iter()
            .map(|(shape, data)| tape.leaf(shape, data.clone(), false))
            .collect::<Result<_, _>>()?;
        let loss = f(&mut tape, &ids)?;
        Ok(tape.scalar_value(loss))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    let mut perturbed = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for ei in 0..leaf.1.len() {
            let orig = leaf.1[ei];
            let mut quotient = |eps: f64| -> Result<f64, TensorError> {
                perturbed[li].1[ei] = orig + eps;
                let up = eval(&perturbed)?;
                perturbed[li].1[ei] = orig - eps;
                let down = eval(&perturbed)?;
                perturbed[li].1[ei] = orig;
                Ok((up - down) / (2.0 * eps))
            };
            let numeric = quotient(eps)?;
            let half = quotient(eps / 2.0)?;
            if !stencil_is_smooth(numeric, half) {
                continue;
            }
            let a = analytic[li][ei];
            let mut err = rel_err(a, numeric);
            let mut at = numeric;
            if err > 1e-5 {
                // a kink close to the point contaminates every wide stencil
                // equally; a much smaller step lands clear of it, while a
                // wrong backward rule disagrees at every step
                let fine = quotient(eps / 16.0)?;
                if rel_err(a, fine) < err {
                    err = rel_err(a, fine);
                    at = fine;
                }
            }
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((li, ei));
                report.analytic_at_worst = a;
                report.numeric_at_worst = at;
            }
        }
    }
    Ok(report)
}

/// A differentiable scalar function built from store-backed parameters.
pub type ParamLossFn<'a> = &'a dyn Fn(&mut Ctx<f64>) -> Result<TensorId, TensorError>;

/// Finite-difference check over every scalar in a parameter store, for ops
/// whose weights are created internally through `Ctx::param`.
///
/// The builder runs once with gradients on to populate the store and record
/// analytic gradients, then once per perturbed element with gradients off.
pub fn check_param_gradients(
    store: &mut ParamStore<f64>,
    eps: f64,
    f: ParamLossFn,
) -> Result<GradCheckReport, TensorError> {
    let mut tape = Tape::<f64>::new();
    let mut ctx = Ctx::new(&mut tape, store, true);
    let loss = f(&mut ctx)?;
    let lifted = ctx.lifted.clone();
    ctx.tape.backward(loss)?;
    let analytic = ctx.grads();

    let eval = |store: &mut ParamStore<f64>| -> Result<f64, TensorError> {
        let mut tape = Tape::<f64>::new();
        let mut ctx = Ctx::new(&mut tape, store, false);
        let loss = f(&mut ctx)?;
        Ok(ctx.tape.scalar_value(loss))
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    let names: Vec<String> = lifted.keys().cloned().collect();
    for (li, name) in names.iter().enumerate() {
        let len = store.get(name).unwrap().data.len();
        for ei in 0..len {
            let orig = store.get(name).unwrap().data[ei];
            let quotient = |store: &mut ParamStore<f64>, eps: f64| -> Result<f64, TensorError> {
                store.get_mut(name).unwrap().data[ei] = orig + eps;
                let up = eval(store)?;
                store.get_mut(name).unwrap().data[ei] = orig - eps;
                let down = eval(store)?;
                store.get_mut(name).unwrap().data[ei] = orig;
                Ok((up - down) / (2.0 * eps))
            };
            let numeric = quotient(store, eps)?;
            let half = quotient(store, eps / 2.0)?;
            if !stencil_is_smooth(numeric, half) {
                continue;
            }
            let a = analytic.get(name).map(|g| g[ei]).unwrap_or(0.0);
            let mut err = rel_err(a, numeric);
            let mut at = numeric;
            if err > 1e-5 {
                // a kink close to the point contaminates every wide stencil
                // equally; a much smaller step lands clear of it, while a
                // wrong backward rule disagrees at every step
                let fine = quotient(store, eps / 16.0)?;
                if rel_err(a, fine) < err {
                    err = rel_err(a, fine);
                    at = fine;
                }
            }
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((li, ei));
                report.analytic_at_worst = a;
                report.numeric_at_worst = at;
            }
        }
    }
    Ok(report)
}
