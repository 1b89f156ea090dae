//! Adam with standard bias correction.

use super::tensor::Tensor;
use super::NumericsError;

/// Adam hyperparameters. Defaults: lr 1e-4, beta1 0.9, beta2 0.999,
/// eps 1e-8.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First- and second-moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state for a fixed, ordered parameter list.
///
/// Buffers are allocated on the first step; every later step must pass the
/// same number of parameters with the same element counts, in the same
/// order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    slots: Vec<Slot>,
    step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One Adam update over an ordered parameter list.
///
/// For each parameter: `m = b1*m + (1-b1)*g`, `v = b2*v + (1-b2)*g^2`, then
/// `p -= lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)`. A parameter
/// without a gradient is an error; gradients are left in place for the
/// caller to clear.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [&mut Tensor],
    hp: &AdamParams,
) -> Result<(), NumericsError> {
    if state.slots.is_empty() && state.step == 0 {
        state.slots =
            params.iter().map(|p| Slot { m: vec![0.0; p.numel()], v: vec![0.0; p.numel()] }).collect();
    }
    if state.slots.len() != params.len() {
        return Err(NumericsError::StateMismatch {
            detail: format!("state has {} slots, step got {} parameters", state.slots.len(), params.len()),
        });
    }
    for (index, (p, slot)) in params.iter().zip(&state.slots).enumerate() {
        let n = p.numel();
        if slot.m.len() != n {
            return Err(NumericsError::StateMismatch {
                detail: format!("slot {index} holds {} elements, parameter has {n}", slot.m.len()),
            });
        }
        match p.grad() {
            None => return Err(NumericsError::MissingGrad { index }),
            Some(g) => {
                if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
                    return Err(NumericsError::NonFinite { context: "adam_step gradient", index: bad });
                }
            }
        }
    }

    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - hp.beta1.powi(t as i32);
    let bc2 = 1.0 - hp.beta2.powi(t as i32);

    for (p, slot) in params.iter_mut().zip(&mut state.slots) {
        let g = p.grad().expect("validated above").to_vec();
        let data = &mut p.data;
        for i in 0..g.len() {
            let gv = g[i];
            slot.m[i] = hp.beta1 * slot.m[i] + (1.0 - hp.beta1) * gv;
            slot.v[i] = hp.beta2 * slot.v[i] + (1.0 - hp.beta2) * gv * gv;
            let mhat = slot.m[i] / bc1;
            let vhat = slot.v[i] / bc2;
            data[i] -= hp.lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: Vec<f64>) -> Tensor {
        Tensor::new(vec![v.len()], v).unwrap().with_grad()
    }

    #[test]
    fn first_step_matches_closed_form() {
        // With constant gradient 1, bias correction makes mhat = vhat = 1 at
        // every step, so each update is exactly lr / (1 + eps).
        let hp = AdamParams::default();
        let mut p = param(vec![1.0]);
        p.grad_mut()[0] = 1.0;
        let mut st = AdamState::new();
        adam_step(&mut st, &mut [&mut p], &hp).unwrap();
        let expect = 1.0 - hp.lr / (1.0 + hp.eps);
        assert!((p.data()[0] - expect).abs() < 1e-18, "{}", p.data()[0]);

        p.zero_grad();
        p.grad_mut()[0] = 1.0;
        adam_step(&mut st, &mut [&mut p], &hp).unwrap();
        let expect2 = expect - hp.lr / (1.0 + hp.eps);
        assert!((p.data()[0] - expect2).abs() < 1e-15);
        assert_eq!(st.steps(), 2);
    }

    #[test]
    fn descends_a_quadratic() {
        // min (x-3)^2 from 0; enough steps with lr 0.1 get close.
        let hp = AdamParams { lr: 0.1, ..AdamParams::default() };
        let mut p = param(vec![0.0]);
        let mut st = AdamState::new();
        for _ in 0..200 {
            let x = p.data()[0];
            p.zero_grad();
            p.grad_mut()[0] = 2.0 * (x - 3.0);
            adam_step(&mut st, &mut [&mut p], &hp).unwrap();
        }
        assert!((p.data()[0] - 3.0).abs() < 0.2, "{}", p.data()[0]);
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_noop() {
        let hp = AdamParams::default();
        let mut p = param(vec![0.7, -1.2]);
        p.grad_mut(); // zeros
        let mut st = AdamState::new();
        adam_step(&mut st, &mut [&mut p], &hp).unwrap();
        assert_eq!(p.data(), &[0.7, -1.2]);
    }

    #[test]
    fn zero_gradient_with_momentum_keeps_moving() {
        // Standard Adam: after a nonzero step, a zero gradient still decays
        // the first moment rather than freezing the parameter.
        let hp = AdamParams::default();
        let mut p = param(vec![1.0]);
        p.grad_mut()[0] = 1.0;
        let mut st = AdamState::new();
        adam_step(&mut st, &mut [&mut p], &hp).unwrap();
        let after_first = p.data()[0];
        p.zero_grad();
        p.grad_mut(); // zeros
        adam_step(&mut st, &mut [&mut p], &hp).unwrap();
        assert!(p.data()[0] < after_first);
    }

    #[test]
    fn missing_grad_and_shape_drift_are_errors() {
        let hp = AdamParams::default();
        let mut p = param(vec![1.0]);
        let mut st = AdamState::new();
        assert!(matches!(
            adam_step(&mut st, &mut [&mut p], &hp),
            Err(NumericsError::MissingGrad { index: 0 })
        ));

        p.grad_mut()[0] = 1.0;
        adam_step(&mut st, &mut [&mut p], &hp).unwrap();
        let mut q = param(vec![1.0, 2.0]);
        q.grad_mut();
        assert!(matches!(
            adam_step(&mut st, &mut [&mut q], &hp),
            Err(NumericsError::StateMismatch { .. })
        ));
    }

    #[test]
    fn nonfinite_gradient_is_rejected_before_any_update() {
        let hp = AdamParams::default();
        let mut p = param(vec![1.0]);
        p.grad_mut()[0] = f64::NAN;
        let mut st = AdamState::new();
        assert!(matches!(
            adam_step(&mut st, &mut [&mut p], &hp),
            Err(NumericsError::NonFinite { .. })
        ));
        assert_eq!(p.data(), &[1.0]);
        assert_eq!(st.steps(), 0);
    }
}
