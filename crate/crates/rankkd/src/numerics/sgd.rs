//! SGD with momentum: v <- m*v + g; p <- p - lr*v.

use crate::numerics::tensor::Tensor;

#[derive(Clone, Default)]
pub struct SgdState {
    velocity: Vec<Tensor<f32>>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

pub fn sgd_step(
    params: &mut [Tensor<f32>],
    grads: &[Tensor<f32>],
    state: &mut SgdState,
    lr: f32,
    momentum: f32,
) {
    assert!(lr > 0.0, "learning rate must be positive");
    assert!((0.0..1.0).contains(&momentum), "momentum must be in [0,1)");
    assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
    if state.velocity.is_empty() {
        state.velocity = params
            .iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        assert_eq!(p.shape(), g.shape(), "param/grad shape mismatch");
        for (pv, (gv, vv)) in p
            .data_mut()
            .iter_mut()
            .zip(g.data().iter().zip(v.data_mut()))
        {
            *vv = momentum * *vv + *gv;
            *pv -= lr * *vv;
        }
    }
}
