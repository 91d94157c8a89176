//! Decoupled-weight-decay adaptive gradient optimizer (AdamW).

use super::param::ParamSet;

/// AdamW with fixed learning rate.
///
/// Moment buffers are addressed by visit order, so one optimizer instance
/// must stay paired with one trainable set for its lifetime (a training
/// stage owns exactly that pairing).
pub struct AdamW {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamW {
    pub fn new(lr: f32, weight_decay: f32) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from the accumulated gradients.
    pub fn step(&mut self, params: &mut dyn ParamSet) {
        self.step += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.lr;
        let wd = self.weight_decay;
        let eps = self.eps;
        let (m, v) = (&mut self.m, &mut self.v);
        let mut idx = 0usize;
        params.visit_mut(&mut |w, g| {
            if m.len() <= idx {
                m.push(vec![0.0; w.len()]);
                v.push(vec![0.0; w.len()]);
            }
            let mi = &mut m[idx];
            let vi = &mut v[idx];
            assert_eq!(mi.len(), w.len(), "trainable set changed under the optimizer");
            for i in 0..w.len() {
                mi[i] = b1 * mi[i] + (1.0 - b1) * g[i];
                vi[i] = b2 * vi[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = mi[i] / bc1;
                let v_hat = vi[i] / bc2;
                w[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * w[i]);
            }
            idx += 1;
        });
    }
}
