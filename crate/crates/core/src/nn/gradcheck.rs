//! Central finite-difference verification of recorded gradients.

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn eval_scalar(tape: &Tape, loss: Var) -> Result<f64> {
    let v = tape.value(loss);
    if v.numel() != 1 {
        return Err(Error::Shape(format!(
            "gradient check needs a scalar function, got shape {:?}",
            v.shape()
        )));
    }
    let x = v.data()[0];
    if !x.is_finite() {
        return Err(Error::NumericHealth(format!("function value is {x}")));
    }
    Ok(x)
}

/// Max relative error between the recorded gradient of `f` with respect to
/// `inputs` and central differences with the given step.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let run = |values: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.input(t.clone())).collect();
        let loss = f(&tape, &vars)?;
        Ok((tape, vars, loss))
    };
    let (tape, vars, loss) = run(inputs)?;
    eval_scalar(&tape, loss)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    let mut probe = inputs.to_vec();
    for (slot, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; inputs[slot].numel()]);
        for i in 0..inputs[slot].numel() {
            let orig = inputs[slot].data()[i];
            probe[slot].data_mut()[i] = orig + step;
            let (t, _, l) = run(&probe)?;
            let up = eval_scalar(&t, l)?;
            probe[slot].data_mut()[i] = orig - step;
            let (t, _, l) = run(&probe)?;
            let down = eval_scalar(&t, l)?;
            probe[slot].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            if !analytic[i].is_finite() {
                return Err(Error::NumericHealth(format!(
                    "non-finite gradient at input {slot}[{i}]"
                )));
            }
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    }
    Ok(worst)
}

/// Report from checking a loss against every trainable parameter.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub elements_checked: usize,
}

/// Like [`grad_check`] but perturbs the trainable parameters of `store`.
/// `stride` checks every n-th element of each parameter (1 = all).
pub fn grad_check_params<F>(store: &ParamStore, f: F, step: f64, stride: usize) -> Result<ParamCheck>
where
    F: Fn(&Tape, &ParamStore) -> Result<Var>,
{
    let tape = Tape::new();
    let loss = f(&tape, store)?;
    eval_scalar(&tape, loss)?;
    let grads = tape.backward(loss)?;
    let mut analytic: Vec<Option<Vec<f64>>> = vec![None; store.len()];
    for (id, g) in grads.params() {
        analytic[id.0] = Some(g.to_vec());
    }

    let mut probe = store.clone();
    let mut report = ParamCheck {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        elements_checked: 0,
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let t = Tape::new();
        let l = f(&t, s)?;
        eval_scalar(&t, l)
    };
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        for i in (0..p.value.numel()).step_by(stride.max(1)) {
            let orig = p.value.data()[i];
            probe.get_mut(id).value.data_mut()[i] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[id.0].as_ref().map_or(0.0, |g| g[i]);
            if !a.is_finite() {
                return Err(Error::NumericHealth(format!("non-finite gradient in `{}`", p.name)));
            }
            let err = relative_error(a, numeric);
            if err > report.max_relative_error {
                report.max_relative_error = err;
                report.worst_parameter = format!("{}[{i}]", p.name);
            }
            report.elements_checked += 1;
        }
    }
    Ok(report)
}
