//! Adam optimizer with global-norm gradient clipping.

use crate::math::params::ParamStore;
use crate::math::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug)]
pub struct Adam<S> {
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    clip_norm: Option<S>,
    step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: f64, clip_norm: Option<f64>) -> Self {
        let (m, v) = store
            .iter()
            .map(|(_, _, t)| {
                (
                    Tensor::zeros(t.rows(), t.cols()),
                    Tensor::zeros(t.rows(), t.cols()),
                )
            })
            .unzip();
        Self {
            lr: S::of_f64(lr),
            beta1: S::of_f64(0.9),
            beta2: S::of_f64(0.999),
            eps: S::of_f64(1e-8),
            clip_norm: clip_norm.map(S::of_f64),
            step: 0,
            m,
            v,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = S::of_f64(lr);
    }

    /// Apply one update from gradients aligned with the store's entries.
    pub fn step(&mut self, store: &mut ParamStore<S>, mut grads: Vec<Option<Tensor<S>>>) {
        assert_eq!(grads.len(), store.len(), "gradient/store mismatch");
        if let Some(clip) = self.clip_norm {
            let total: S = grads
                .iter()
                .flatten()
                .map(|g| g.squared_norm())
                .sum::<S>()
                .sqrt();
            if total > clip {
                let scale = clip / total;
                for g in grads.iter_mut().flatten() {
                    g.scale_assign(scale);
                }
            }
        }

        self.step += 1;
        let t = self.step;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bias1 = S::one() - b1.powi(t as i32);
        let bias2 = S::one() - b2.powi(t as i32);

        for (idx, grad) in grads.into_iter().enumerate() {
            let Some(grad) = grad else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let value = store.value_mut(crate::math::params::ParamId::from_index(idx));
            for ((p, (mi, vi)), &g) in value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                .zip(grad.data())
            {
                *mi = b1 * *mi + (S::one() - b1) * g;
                *vi = b2 * *vi + (S::one() - b2) * g * g;
                let m_hat = *mi / bias1;
                let v_hat = *vi / bias2;
                *p = *p - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::graph::Graph;

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.add("x", Tensor::row_vector(&[5.0, -3.0]));
        let mut adam = Adam::new(&store, 0.1, None);
        for _ in 0..500 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let sq = g.square(x);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss);
            let pg = g.param_grads(&grads, &store);
            adam.step(&mut store, pg);
        }
        for &v in store.value(id).data() {
            assert!(v.abs() < 1e-3, "adam failed to reach minimum: {v}");
        }
    }

    #[test]
    fn clipping_bounds_update_magnitude() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.add("x", Tensor::row_vector(&[0.0]));
        let mut adam = Adam::new(&store, 0.5, Some(1.0));
        let huge = Tensor::row_vector(&[1e9]);
        adam.step(&mut store, vec![Some(huge)]);
        // after clipping the gradient is 1.0; the first adam step is bounded by lr
        assert!(store.value(id).data()[0].abs() <= 0.5 + 1e-12);
    }
}
