use crate::graph::Gradients;
use crate::params::ParamStore;

/// AdamW with decoupled weight decay:
///
/// ```text
/// w ← w − lr·wd·w
/// m ← β1·m + (1−β1)·g          v ← β2·v + (1−β2)·g²
/// w ← w − lr · m̂ / (√v̂ + ε)    with m̂ = m/(1−β1ᵗ), v̂ = v/(1−β2ᵗ)
/// ```
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    /// Update every parameter that has a gradient; the rest are untouched
    /// (their step counters do not advance).
    pub fn step(&self, store: &mut ParamStore, grads: &Gradients) {
        let params = store.params_mut();
        for (id, grad) in grads.iter() {
            let p = &mut params[id.index()];
            p.step += 1;
            let t = p.step as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let decay = 1.0 - self.lr * self.weight_decay;
            let w = p.value.data_mut();
            for i in 0..w.len() {
                let g = grad.data()[i];
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                w[i] = w[i] * decay - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    fn grads_for(store: &ParamStore, g_value: f64) -> Gradients {
        let id = store.find("w").unwrap();
        let mut g = Graph::new();
        let w = g.param(store, id);
        let s = g.sum(w).unwrap();
        let l = g.scale(s, g_value).unwrap();
        g.backward(l).unwrap()
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let grads = grads_for(&store, 0.0);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut store, &grads);
        assert_eq!(store.value(store.find("w").unwrap()).data(), &[0.3, -0.7]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![1], vec![0.5]).unwrap());
        let grads = grads_for(&store, 1.0);
        let opt = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        opt.step(&mut store, &grads);
        let w = store.value(store.find("w").unwrap()).item();
        // m̂ = 1, v̂ = 1 → Δw = −lr/(1+ε)
        let expected = 0.5 - 1e-4 / (1.0 + 1e-8);
        assert!((w - expected).abs() < 1e-15, "{w} vs {expected}");
        assert!(((w - 0.5) + 1e-4).abs() < 1e-10);
    }

    #[test]
    fn decoupled_decay_only() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(vec![2], vec![2.0, -4.0]).unwrap());
        let grads = grads_for(&store, 0.0);
        let opt = AdamW {
            weight_decay: 0.01,
            ..AdamW::default()
        };
        opt.step(&mut store, &grads);
        let k = 1.0 - 1e-4 * 0.01;
        assert_eq!(store.value(store.find("w").unwrap()).data(), &[2.0 * k, -4.0 * k]);
    }
}
