//! AdamW with decoupled weight decay over named parameter sets.

use super::{Result, Tensor, TensorError};

/// A named trainable tensor. `decay` marks whether weight decay applies;
/// norms, biases and similar parameters are conventionally exempt.
#[derive(Debug, Clone)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor<f32>,
    pub decay: bool,
}

/// An ordered collection of named parameters. Order is the identity used by
/// optimizer state, EMA updates and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: Vec<NamedParam>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>, decay: bool) {
        let mut tensor = tensor;
        tensor.requires_grad = true;
        self.params.push(NamedParam { name: name.into(), tensor, decay });
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&NamedParam> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    /// True when `other` has the same names and shapes in the same order.
    pub fn shape_isomorphic(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape())
    }
}

/// First/second moment buffers and step counter for [`adamw_step`].
#[derive(Debug, Clone)]
pub struct AdamWState {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    pub step: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
}

impl AdamWState {
    pub fn new(params: &ParamSet) -> Self {
        AdamWState {
            m: params.params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            v: params.params.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One AdamW update over every parameter in the set. Decay is decoupled:
/// eligible parameters are shrunk by `lr * weight_decay` directly, outside
/// the moment estimates. Parameters without an accumulated gradient are
/// treated as having zero gradient (they still decay).
pub fn adamw_step(params: &mut ParamSet, state: &mut AdamWState, lr: f32, weight_decay: f32) -> Result<()> {
    if params.params.len() != state.m.len() {
        return Err(TensorError::InvalidArgument {
            op: "adamw_step",
            msg: format!("state tracks {} params, set has {}", state.m.len(), params.params.len()),
        });
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let (beta1, beta2, eps) = (state.beta1, state.beta2, state.epsilon);

    for (idx, p) in params.params.iter_mut().enumerate() {
        let n = p.tensor.numel();
        if state.m[idx].len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "adamw_step",
                lhs: p.tensor.shape().to_vec(),
                rhs: vec![state.m[idx].len()],
            });
        }
        if let Some(g) = &p.tensor.grad {
            if g.len() != n {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: vec![g.len()],
                });
            }
        }
        let decay_factor = if p.decay { 1.0 - lr * weight_decay } else { 1.0 };
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let grad = p.tensor.grad.take();
        let data = p.tensor.data_mut();
        match grad {
            Some(g) => {
                for i in 0..n {
                    data[i] *= decay_factor;
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            None => {
                for i in 0..n {
                    data[i] *= decay_factor;
                    m[i] *= beta1;
                    v[i] *= beta2;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(x: Vec<f32>, decay: bool) -> ParamSet {
        let mut set = ParamSet::new();
        set.push("w", Tensor::from_vec(vec![x.len()], x).unwrap(), decay);
        set
    }

    #[test]
    fn zero_grad_no_decay_leaves_parameters_unchanged() {
        let mut set = one_param(vec![1.0, -2.0, 0.5], false);
        let mut state = AdamWState::new(&set);
        adamw_step(&mut set, &mut state, 0.1, 0.0).unwrap();
        assert_eq!(set.params[0].tensor.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_grad_with_decay_scales_by_one_minus_lr_wd() {
        let mut set = one_param(vec![1.0, -2.0], true);
        let mut state = AdamWState::new(&set);
        adamw_step(&mut set, &mut state, 0.5, 0.1).unwrap();
        let factor = 1.0 - 0.5 * 0.1;
        assert_eq!(set.params[0].tensor.data(), &[factor, -2.0 * factor]);
    }

    #[test]
    fn first_step_on_quadratic_moves_by_about_lr() {
        // f(x) = x^2 at x = 1: g = 2. Bias-corrected first step is ~lr.
        let mut set = one_param(vec![1.0], false);
        set.params[0].tensor.grad = Some(vec![2.0]);
        let mut state = AdamWState::new(&set);
        let lr = 0.01;
        adamw_step(&mut set, &mut state, lr, 0.0).unwrap();
        let x = set.params[0].tensor.data()[0];
        assert!((1.0 - x - lr).abs() < 1e-5, "moved by {}", 1.0 - x);
    }

    #[test]
    fn step_counter_increments() {
        let mut set = one_param(vec![0.0], false);
        let mut state = AdamWState::new(&set);
        for expected in 1..=3 {
            adamw_step(&mut set, &mut state, 1e-3, 0.0).unwrap();
            assert_eq!(state.step, expected);
        }
    }

    #[test]
    fn grad_shape_mismatch_is_an_error() {
        let mut set = one_param(vec![0.0, 0.0], false);
        set.params[0].tensor.grad = Some(vec![1.0]);
        let mut state = AdamWState::new(&set);
        assert!(adamw_step(&mut set, &mut state, 1e-3, 0.0).is_err());
    }
}
