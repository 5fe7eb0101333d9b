//! First-order update rules.

use std::collections::HashMap;

use crate::tensor::Tensor;

/// Plain gradient descent: `p ← p − lr · g`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, lr: f64) {
    for (p, g) in param.data_mut().iter_mut().zip(grad.data()) {
        *p -= lr * g;
    }
}

/// Adam with bias correction, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    state: HashMap<String, Moments>,
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-12,
            state: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    /// Applies one update. `lr` holds either a single step size or one per
    /// element of `param`.
    pub fn step(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: &[f64]) {
        let n = param.len();
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        });
        st.t += 1;
        let c1 = 1.0 - self.beta1.powi(st.t);
        let c2 = 1.0 - self.beta2.powi(st.t);
        for (k, (p, &g)) in param.data_mut().iter_mut().zip(grad.data()).enumerate() {
            st.m[k] = self.beta1 * st.m[k] + (1.0 - self.beta1) * g;
            st.v[k] = self.beta2 * st.v[k] + (1.0 - self.beta2) * g * g;
            let mhat = st.m[k] / c1;
            let vhat = st.v[k] / c2;
            let step = if lr.len() == 1 { lr[0] } else { lr[k] };
            *p -= step * mhat / (vhat.sqrt() + self.eps);
        }
    }
}
