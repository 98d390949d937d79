//! Central finite-difference gradient checking.

use super::{EngineError, Tape, Tensor, Var};
use crate::exec::{self, Execution};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-4;

/// Denominator floor of [`relative_error`]. Below it the comparison is
/// effectively absolute, which keeps structurally zero gradients (say, a
/// key bias under softmax) from turning rounding noise into large ratios.
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Which coordinates of each input to probe.
#[derive(Clone, Debug)]
pub enum Coordinates {
    All,
    /// Explicit flat indices per input.
    Subset(Vec<Vec<usize>>),
}

/// Maximum relative error between the tape gradient of a scalar function and
/// central finite differences with step [`FD_STEP`], over every coordinate of
/// every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<f64, EngineError>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var, EngineError> + Sync,
{
    grad_check_with(f, inputs, &Coordinates::All, Execution::default())
}

pub fn grad_check_with<F>(
    f: F,
    inputs: &[Tensor],
    coords: &Coordinates,
    exec: Execution,
) -> Result<f64, EngineError>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var, EngineError> + Sync,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.wrt(*v).expect("inputs are tracked"))
        .collect();

    let probes: Vec<(usize, usize)> = match coords {
        Coordinates::All => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
            .collect(),
        Coordinates::Subset(per_input) => per_input
            .iter()
            .enumerate()
            .flat_map(|(i, idx)| idx.iter().map(move |&j| (i, j)))
            .collect(),
    };

    let eval = |which: usize, coord: usize, delta: f64| -> Result<f64, EngineError> {
        let mut shifted = inputs.to_vec();
        shifted[which].data_mut()[coord] += delta;
        let mut tape = Tape::new();
        let vars: Vec<Var> = shifted.into_iter().map(|t| tape.constant(t)).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)[0])
    };

    let errors = exec::map(exec, &probes, |&(i, j)| -> Result<f64, EngineError> {
        let numeric = (eval(i, j, FD_STEP)? - eval(i, j, -FD_STEP)?) / (2.0 * FD_STEP);
        Ok(relative_error(analytic[i].data()[j], numeric))
    });
    errors
        .into_iter()
        .try_fold(0.0_f64, |acc, e| e.map(|e| acc.max(e)))
}
