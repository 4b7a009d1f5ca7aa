//! Central finite-difference checks for tape gradients.
//!
//! Errors are reported per input tensor as
//! `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, SCALE_FLOOR)`,
//! which stays meaningful when individual entries are near zero. The floor
//! keeps structurally zero gradients (e.g. a bias shared by every softmax
//! logit) from dividing round-off by round-off.

use alloc::vec::Vec;

use crate::{ParamStore, Result, Tape, Tensor, Var};

pub const SCALE_FLOOR: f64 = 1e-6;

fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| crate::math::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(SCALE_FLOOR)
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

/// Check the gradient of a scalar built from `inputs`, each entering the
/// tape as a variable. Returns one relative error per input.
pub fn check_inputs<F>(inputs: &[Tensor], h: f64, build: F) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.variable(x.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(scalar(&tape, out))
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.variable(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut errors = Vec::with_capacity(inputs.len());
    let mut probe = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads
            .var(v)
            .map_or_else(|| alloc::vec![0.0; inputs[i].numel()], |g| g.data().to_vec());
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = x0 - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = x0;
            numeric.push((up - down) / (2.0 * h));
        }
        errors.push(relative_error(&analytic, &numeric));
    }
    Ok(errors)
}

/// Check the gradient with respect to every trainable parameter of `store`.
/// Returns `(parameter name, relative error)` pairs.
pub fn check_params<F>(store: &ParamStore, h: f64, build: F) -> Result<Vec<(alloc::string::String, f64)>>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = build(&mut tape, store)?;
    let grads = tape.backward(out)?;
    let mut probe = store.clone();
    let mut errors = Vec::new();
    for (id, p) in store.iter().filter(|(_, p)| p.trainable) {
        let analytic = grads
            .param(id)
            .map_or_else(|| alloc::vec![0.0; p.tensor.numel()], |g| g.data().to_vec());
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..p.tensor.numel() {
            let x0 = p.tensor.data()[j];
            let mut at = |x: f64| -> Result<f64> {
                probe.get_mut(id).tensor.data_mut()[j] = x;
                let mut t = Tape::new();
                let out = build(&mut t, &probe)?;
                Ok(scalar(&t, out))
            };
            let up = at(x0 + h)?;
            let down = at(x0 - h)?;
            at(x0)?;
            numeric.push((up - down) / (2.0 * h));
        }
        errors.push((p.name.clone(), relative_error(&analytic, &numeric)));
    }
    Ok(errors)
}
