//! Adam with coupled L2 weight decay (decay folded into the gradient,
//! the classic non-decoupled form).

use super::Tensor;
use crate::error::{Error, Result};

/// First and second moment buffers, one pair per parameter tensor.
/// Tensors with `requires_grad == false` (running statistics) are
/// tracked with empty buffers and skipped by the step.
#[derive(Debug, Clone)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let m = params
            .iter()
            .map(|p| if p.requires_grad { vec![0.0; p.numel()] } else { Vec::new() })
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState { step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One update over `params`. Every tensor with `requires_grad` must
/// carry a gradient (a missing one is an error, not a silent skip: it
/// means the training loop forgot to materialize or accumulate it).
pub fn adam_step(
    params: &mut [Tensor],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::invalid(format!(
            "adam_step: state tracks {} tensors, got {}",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - betas.0.powi(t);
    let bc2 = 1.0 - betas.1.powi(t);
    for (pi, p) in params.iter_mut().enumerate() {
        if !p.requires_grad {
            continue;
        }
        let grad = p
            .grad
            .take()
            .ok_or_else(|| Error::invalid(format!("adam_step: parameter {pi} has no gradient")))?;
        let (m, v) = (&mut state.m[pi], &mut state.v[pi]);
        let data = p.data_mut();
        for i in 0..data.len() {
            let g = grad[i] + weight_decay * data[i];
            m[i] = betas.0 * m[i] + (1.0 - betas.0) * g;
            v[i] = betas.1 * v[i] + (1.0 - betas.1) * g * g;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        p.grad = Some(grad); // keep the buffer allocated for reuse
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_leaves_parameter_unchanged() {
        let mut p = Tensor::new(&[2], vec![1.5, -0.5]).unwrap().with_grad();
        p.zero_grad();
        let mut state = AdamState::new(std::slice::from_ref(&p));
        let mut params = [p];
        adam_step(&mut params, &mut state, 0.01, (0.9, 0.999), 1e-8, 0.0).unwrap();
        assert_eq!(params[0].data(), &[1.5, -0.5]);
    }

    #[test]
    fn two_steps_match_a_scalar_hand_trace() {
        // Independent recurrence on plain f64 scalars.
        let (b1, b2, eps, lr, wd) = (0.9, 0.999, 1e-8, 0.01, 0.1);
        let grads = [0.3, -0.2];
        let mut x_ref = 2.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g0) in grads.iter().enumerate() {
            let g = g0 + wd * x_ref;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t as i32 + 1));
            let vhat = v / (1.0 - b2.powi(t as i32 + 1));
            x_ref -= lr * mhat / (vhat.sqrt() + eps);
        }

        let mut p = Tensor::new(&[1], vec![2.0]).unwrap().with_grad();
        p.zero_grad();
        let mut state = AdamState::new(std::slice::from_ref(&p));
        let mut params = [p];
        for g0 in grads {
            params[0].zero_grad();
            params[0].accumulate_grad(&[g0]);
            adam_step(&mut params, &mut state, lr, (b1, b2), eps, wd).unwrap();
        }
        assert_eq!(params[0].data()[0].to_bits(), x_ref.to_bits());
        assert_eq!(state.step_count(), 2);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let p = Tensor::new(&[1], vec![1.0]).unwrap().with_grad();
        let mut state = AdamState::new(std::slice::from_ref(&p));
        let mut params = [p];
        let err = adam_step(&mut params, &mut state, 0.01, (0.9, 0.999), 1e-8, 0.0).unwrap_err();
        assert!(err.to_string().contains("no gradient"));
    }

    #[test]
    fn non_trainable_tensors_are_skipped() {
        let p = Tensor::new(&[2], vec![0.25, 0.75]).unwrap(); // running stat
        let mut state = AdamState::new(std::slice::from_ref(&p));
        let mut params = [p];
        adam_step(&mut params, &mut state, 0.01, (0.9, 0.999), 1e-8, 0.1).unwrap();
        assert_eq!(params[0].data(), &[0.25, 0.75]);
    }
}
