//! Bias-corrected Adam.

use serde::{Deserialize, Serialize};

use fpad_autograd::{Float, Tensor};

use crate::models::Network;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(shapes: &[Vec<usize>]) -> Self {
        AdamState {
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
        }
    }

    pub fn for_network(net: &Network<T>) -> Self {
        let shapes: Vec<Vec<usize>> = net
            .trainable_indices()
            .into_iter()
            .map(|i| net.tensor_at(i).shape().to_vec())
            .collect();
        AdamState::new(&shapes)
    }
}

/// One Adam update of every `params[i]` with `grads[i]`.
pub fn adam_step<T: Float>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    assert_eq!(params.len(), state.m.len(), "state does not match parameters");
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - T::of(cfg.beta1.powi(t));
    let c2 = T::one() - T::of(cfg.beta2.powi(t));
    let (lr, eps) = (T::of(cfg.learning_rate), T::of(cfg.eps));
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        assert_eq!(p.shape(), g.shape(), "gradient shape");
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Adam over the trainable tensors of `net`, with `grads` aligned to
/// [`Network::trainable_indices`].
pub fn adam_step_network<T: Float>(
    net: &mut Network<T>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &AdamConfig,
) {
    let idx = net.trainable_indices();
    assert_eq!(idx.len(), grads.len(), "one gradient per trainable tensor");
    let mut params: Vec<Tensor<T>> = idx.iter().map(|&i| net.tensor_at(i).clone()).collect();
    {
        let mut refs: Vec<&mut Tensor<T>> = params.iter_mut().collect();
        let grefs: Vec<&Tensor<T>> = grads.iter().collect();
        adam_step(&mut refs, &grefs, state, cfg);
    }
    for (&i, p) in idx.iter().zip(params) {
        *net.tensor_at_mut(i) = p;
    }
}
