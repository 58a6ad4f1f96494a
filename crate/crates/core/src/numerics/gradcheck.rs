//! Central finite-difference checks of tape gradients.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// Where the largest error occurred.
    pub worst: String,
    pub checked: usize,
}

impl GradReport {
    fn new() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: String::new(),
            checked: 0,
        }
    }

    fn record(&mut self, analytic: f64, numeric: f64, at: impl FnOnce() -> String) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel_error || e.is_nan() {
            self.max_rel_error = e;
            self.worst = at();
        }
    }
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

/// Checks the gradient of a scalar function of leaf tensors. `f` builds the
/// function on a fresh tape from leaves holding `inputs`.
pub fn check_inputs(inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<GradReport> {
    let eval = |xs: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &leaves)?;
        Ok((tape, leaves, out))
    };
    let (tape, leaves, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let mut report = GradReport::new();
    let mut xs = inputs.to_vec();
    for (i, leaf) in leaves.iter().enumerate() {
        let n = xs[i].numel();
        let analytic = grads.wrt(*leaf).map_or_else(|| alloc::vec![0.0; n], |g| g.to_vec());
        for k in 0..n {
            let orig = xs[i].data()[k];
            xs[i].data_mut()[k] = orig + FD_STEP;
            let (t, _, o) = eval(&xs)?;
            let plus = scalar(&t, o);
            xs[i].data_mut()[k] = orig - FD_STEP;
            let (t, _, o) = eval(&xs)?;
            let minus = scalar(&t, o);
            xs[i].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            report.record(analytic[k], numeric, || format!("input {i}[{k}]"));
        }
    }
    Ok(report)
}

/// Checks the gradient of a loss with respect to every scalar of a parameter
/// store. `params` reaches the store inside `owner`; `loss` runs a forward
/// pass and returns its tape and scalar output.
pub fn check_params<T>(
    owner: &mut T,
    params: impl Fn(&mut T) -> &mut ParamStore,
    loss: impl Fn(&T) -> Result<(Tape, Var)>,
) -> Result<GradReport> {
    let (tape, out) = loss(owner)?;
    let grads = tape.backward(out)?;
    params(owner).zero_grad();
    grads.accumulate_into(&tape, params(owner));
    let store = params(owner);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let analytic: Vec<Tensor> = store.iter().map(|(_, p)| p.grad.clone()).collect();
    let mut report = GradReport::new();
    for (id, g) in ids.into_iter().zip(analytic) {
        for k in 0..g.numel() {
            let orig = params(owner).get(id).value.data()[k];
            params(owner).get_mut(id).value.data_mut()[k] = orig + FD_STEP;
            let (t, o) = loss(owner)?;
            let plus = scalar(&t, o);
            params(owner).get_mut(id).value.data_mut()[k] = orig - FD_STEP;
            let (t, o) = loss(owner)?;
            let minus = scalar(&t, o);
            params(owner).get_mut(id).value.data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            report.record(g.data()[k], numeric, || {
                format!("{}[{k}]", params(owner).get(id).name)
            });
        }
    }
    params(owner).zero_grad();
    Ok(report)
}
