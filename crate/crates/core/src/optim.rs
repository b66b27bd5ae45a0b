//! Adam optimizer over a [`ParamSet`].

use crate::autograd::ParamSet;
use crate::tensor::Tensor;

/// Adam with bias correction. Moment buffers are allocated lazily per
/// trainable parameter; frozen parameters are never read or written, so their
/// bytes are invariant under any number of steps.
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub epsilon: f32,
    step_count: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(learning_rate: f32) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update from the gradients currently in `params`. Only trainable
    /// parameters move.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.step_count += 1;
        if self.moments.len() < params.len() {
            self.moments.resize_with(params.len(), || None);
        }
        let t = self.step_count as i32;
        let bc1 = 1.0 - (self.beta1 as f64).powi(t);
        let bc2 = 1.0 - (self.beta2 as f64).powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        let (lr, eps) = (self.learning_rate, self.epsilon);

        for (id, node) in params.iter_mut() {
            if !node.trainable {
                continue;
            }
            let slot = self.moments[id.index()].get_or_insert_with(|| {
                (
                    Tensor::zeros(node.value.shape()),
                    Tensor::zeros(node.value.shape()),
                )
            });
            let (m, v) = (slot.0.data_mut(), slot.1.data_mut());
            let g = node.grad.data();
            for ((w, g), (m, v)) in node
                .value
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *m = b1 * *m + (1.0 - b1) * *g;
                *v = b2 * *v + (1.0 - b2) * *g * *g;
                let m_hat = *m as f64 / bc1;
                let v_hat = *v as f64 / bc2;
                *w -= (lr as f64 * m_hat / (v_hat.sqrt() + eps as f64)) as f32;
            }
        }
    }
}
